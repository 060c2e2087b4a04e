"""Process templates: the factory pairs that distinguish process variants.

Every variant boots through the same generic path; the only difference
between, say, the alignment FEP and the diagnostics FEP is which type tags
their factories know. A process is matched to the variant whose factories
cover the most of its manifest; an uncoverable tag then fails boot with
BAD_ARGS as usual.
"""

from __future__ import annotations

from ..errors import ControlError, ErrorCode
from ..kernel import Factory, ProcessTemplate
from ..registry import FacilityConfig, ProcessSpec
from .alignment import AlignmentLCU
from .devices import ActuatorDevice, AxisController, SensorDevice, ShutterDevice


def alignment_fep_factories() -> tuple[Factory, Factory]:
    controllers = Factory("local", "alignment-fep-controllers")
    controllers.register_type("axis", AxisController)
    devices = Factory("distributed", "alignment-fep-devices")
    devices.register_type("actuator", ActuatorDevice)
    return controllers, devices


def diagnostics_fep_factories() -> tuple[Factory, Factory]:
    controllers = Factory("local", "diagnostics-fep-controllers")
    devices = Factory("distributed", "diagnostics-fep-devices")
    devices.register_type("shutter", ShutterDevice)
    devices.register_type("sensor", SensorDevice)
    return controllers, devices


def supervisor_factories() -> tuple[Factory, Factory]:
    controllers = Factory("local", "supervisor-controllers")
    devices = Factory("distributed", "supervisor-devices")
    devices.register_type("alignment_lcu", AlignmentLCU)
    return controllers, devices


def gateway_factories() -> tuple[Factory, Factory]:
    # The gateway's Director is registered here to keep the import local.
    from ..gateway import GatewayDirector

    controllers = Factory("local", "gateway-controllers")
    devices = Factory("distributed", "gateway-devices")
    devices.register_type("gateway", GatewayDirector)
    return controllers, devices


TEMPLATE_VARIANTS: dict[str, tuple] = {
    "alignment_fep": alignment_fep_factories,
    "diagnostics_fep": diagnostics_fep_factories,
    "supervisor": supervisor_factories,
    "gateway": gateway_factories,
}


def make_template(variant: str, spec: ProcessSpec) -> ProcessTemplate:
    try:
        builder = TEMPLATE_VARIANTS[variant]
    except KeyError:
        raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no template variant {variant!r}")
    controllers, devices = builder()
    return ProcessTemplate(spec, controllers, devices, variant=variant)


def select_template(config: FacilityConfig, process: str) -> ProcessTemplate:
    """Pick the variant whose factories best cover the process manifest."""
    spec = config.process(process)
    manifest_tags = {o.type_tag for o in spec.objects}
    best_variant = None
    best_cover = -1
    for variant, builder in TEMPLATE_VARIANTS.items():
        controllers, devices = builder()
        cover = len(manifest_tags & (controllers.type_tags | devices.type_tags))
        if cover > best_cover:
            best_variant, best_cover = variant, cover
    return make_template(best_variant, spec)
