"""Fault injection against managed processes.

Faults are reserved-method state inside each process dispatcher, so no
name-service entry is needed: the injector calls ``__inject`` at the
process endpoint from the facility configuration. Supported switches:
``{"crash": true}``, ``{"reply_delay_ms": n}``, ``{"drop_connections":
bool}``, ``{"clear": true}``.
"""

from __future__ import annotations

from ..conduit import Conduit, ConnectionPolicy, ObjectRef
from ..registry import FacilityConfig

INJECT_POLICY = ConnectionPolicy(max_attempts=2, retry_backoff_ms=100, call_timeout_ms=3000)


def inject(config: FacilityConfig, conduit: Conduit, process: str, fault: dict) -> dict:
    """Apply *fault* switches to one process; raises NO_SUCH_OBJECT if unknown."""
    spec = config.process(process)
    ref = ObjectRef(spec.host, spec.port, process, "__process")
    return conduit.invoke(ref, "__inject", fault, INJECT_POLICY, refreshable=False)


def clear(config: FacilityConfig, conduit: Conduit, process: str) -> dict:
    return inject(config, conduit, process, {"clear": True})
