"""Demo deployment: simulated hardware, the alignment LCU, and templates."""

from .devices import (
    ActuatorDevice,
    AxisController,
    SensorDevice,
    ShutterDevice,
    SimClock,
    get_clock,
    get_monitor_hub,
)
from .alignment import AlignmentLCU
from .faults import inject
from .templates import (
    TEMPLATE_VARIANTS,
    alignment_fep_factories,
    diagnostics_fep_factories,
    gateway_factories,
    make_template,
    select_template,
    supervisor_factories,
)

__all__ = [
    "ActuatorDevice",
    "AlignmentLCU",
    "AxisController",
    "SensorDevice",
    "ShutterDevice",
    "SimClock",
    "TEMPLATE_VARIANTS",
    "alignment_fep_factories",
    "diagnostics_fep_factories",
    "gateway_factories",
    "get_clock",
    "get_monitor_hub",
    "inject",
    "make_template",
    "select_template",
    "supervisor_factories",
]
