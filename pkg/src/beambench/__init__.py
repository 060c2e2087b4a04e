"""beambench: a desk-scale distributed control framework.

Front-end processors, supervisors and an operator gateway are all
instances of one generic process template, differentiated only by the
object factories they register. Shared service frameworks (logging,
events and alerts, reservations, status monitoring, pub/sub publication,
connection recovery) give every process the same structure and behavior.
"""

from .errors import ControlError, ErrorCode

__version__ = "0.1.0"

__all__ = ["ControlError", "ErrorCode", "__version__"]
