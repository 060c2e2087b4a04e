"""Simulated controllers and devices for the demo facility.

Controllers (axes) are local configurables integrated by a per-process
simulation clock; devices (actuator, shutter, sensor) are distributed
configurables composed from them. The clock ticks all controllers of a
process atomically between dispatches: every handler that mutates
controller state does so under ``clock.lock``.
"""

from __future__ import annotations

import math
import random
import threading
import time
from typing import Any, Optional

from ..conduit import ConnectionPolicy, parse_ref
from ..errors import ControlError, ErrorCode, bad_args
from ..kernel import Configurable, ProcessContext
from ..statusmon import MonitorHub, MonitorSpec
from ..supervisory import Director, Record

TICK_MS = 10


class SimClock:
    """Fixed-step simulation clock; real-time thread or manual advance."""

    def __init__(self, tick_ms: int = TICK_MS, manual: bool = False):
        self.tick_ms = tick_ms
        self.manual = manual
        self.lock = threading.RLock()
        self._subscribers: list = []
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def subscribe(self, callback) -> None:
        with self.lock:
            self._subscribers.append(callback)

    def advance(self, dt: float) -> None:
        with self.lock:
            for callback in list(self._subscribers):
                callback(dt)

    def start(self) -> None:
        if self.manual or self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, daemon=True, name="sim-clock")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        dt = self.tick_ms / 1000.0
        while not self._stop.wait(dt):
            self.advance(dt)


def get_clock(ctx: ProcessContext) -> SimClock:
    clock = ctx.extras.get("sim_clock")
    if clock is None:
        clock = SimClock()
        clock.start()
        ctx.extras["sim_clock"] = clock
    return clock


def get_monitor_hub(ctx: ProcessContext) -> MonitorHub:
    hub = ctx.extras.get("monitor_hub")
    if hub is None:
        hub = MonitorHub(ctx.conduit, warn=ctx.warning)
        ctx.extras["monitor_hub"] = hub
    return hub


class MonitoringMixin:
    """Gives a distributed configurable the status-monitor surface."""

    def begin_monitoring(self, field: str, precision: float = 0.0,
                         latency_ms: int = 100, subscriber: str = "") -> str:
        spec = MonitorSpec(self.name, field, float(precision), int(latency_ms),
                           parse_ref(subscriber))
        hub = get_monitor_hub(self.ctx)
        return hub.begin(spec, lambda: self.read_field(field))

    def end_monitoring(self, monitor_id: str) -> bool:
        get_monitor_hub(self.ctx).end(monitor_id)
        return True


class AxisController(Configurable):
    """One motor axis: integrates position toward target at fixed velocity."""

    scope = "local"
    monitored = ("position", "target", "moving")

    def __init__(self, name: str, ctx: ProcessContext, params: dict):
        super().__init__(name, ctx, params)
        self.clock = get_clock(ctx)
        limits = params.get("limits", [-10.0, 10.0])
        if len(limits) != 2 or limits[0] >= limits[1]:
            raise bad_args(f"axis {name!r}: bad limits {limits!r}")
        self.limits = (float(limits[0]), float(limits[1]))
        self.velocity = float(params.get("velocity", 5.0))
        if self.velocity <= 0:
            raise bad_args(f"axis {name!r}: velocity must be > 0")
        start = float(params.get("position", 0.0))
        if not (self.limits[0] <= start <= self.limits[1]):
            raise bad_args(f"axis {name!r}: start position outside limits")
        self.position = start
        self.target = start
        self.clock.subscribe(self._tick)

    @property
    def moving(self) -> bool:
        return self.position != self.target

    def in_limits(self, value: float) -> bool:
        return self.limits[0] <= value <= self.limits[1]

    def set_target(self, value: float) -> None:
        # caller holds clock.lock
        if not self.in_limits(value):
            raise ControlError(ErrorCode.OUT_OF_RANGE,
                               f"axis {self.name!r}: target {value} outside {self.limits}")
        self.target = float(value)

    def _tick(self, dt: float) -> None:
        if not self.moving:
            return
        step = self.velocity * dt
        delta = self.target - self.position
        if abs(delta) <= step:
            self.position = self.target  # snap exactly at arrival
        else:
            self.position += math.copysign(step, delta)

    def read_field(self, field_name: str) -> Any:
        with self.clock.lock:
            return super().read_field(field_name)


class ActuatorDevice(MonitoringMixin, Configurable):
    """Multi-axis actuator composed from 1-4 same-process axis controllers."""

    scope = "distributed"
    exposed = ("move_to", "status", "begin_monitoring", "end_monitoring")

    def __init__(self, name: str, ctx: ProcessContext, params: dict):
        super().__init__(name, ctx, params)
        bindings = params.get("controllers", [])
        if not (1 <= len(bindings) <= 4):
            raise bad_args(f"actuator {name!r}: need 1-4 controllers, got {len(bindings)}")
        self.axes: list[AxisController] = []
        for bound in bindings:
            obj = ctx.local_object(bound)
            if not isinstance(obj, AxisController):
                raise bad_args(f"actuator {name!r}: {bound!r} is not an axis controller")
            self.axes.append(obj)
        self.clock = get_clock(ctx)
        self.move_count = 0
        self._settled = True
        self.clock.subscribe(self._check_settled)
        self.monitored = tuple(f"position_{i}" for i in range(len(self.axes))) + (
            "moving", "move_count")

    def _require_token(self, token: Any) -> None:
        if self.ctx.reservations is None or not self.ctx.reservations.validate(self.name, token):
            raise ControlError(ErrorCode.RESERVED,
                               f"{self.name!r} requires a valid reservation token")

    def move_to(self, targets: list, token: str = "") -> dict:
        self._require_token(token)
        if not isinstance(targets, list) or len(targets) != len(self.axes):
            raise bad_args(f"{self.name!r} expects {len(self.axes)} targets")
        values = [float(t) for t in targets]
        with self.clock.lock:
            for axis, value in zip(self.axes, values):
                if not axis.in_limits(value):
                    raise ControlError(
                        ErrorCode.OUT_OF_RANGE,
                        f"target {value} outside limits of axis {axis.name!r}")
            for axis, value in zip(self.axes, values):
                axis.set_target(value)
            self.move_count += 1
            move_id = self.move_count
            self._settled = not self._any_moving()
            if self._settled:  # no-op move: already at target, complete now
                positions = [axis.position for axis in self.axes]
                threading.Thread(target=self._emit_completion,
                                 args=(move_id, positions), daemon=True).start()
        return {"accepted": True, "move_id": move_id}

    def _any_moving(self) -> bool:
        return any(axis.moving for axis in self.axes)

    def _check_settled(self, dt: float) -> None:
        if self._settled or self._any_moving():
            return
        self._settled = True
        positions = [axis.position for axis in self.axes]
        move_id = self.move_count
        threading.Thread(
            target=self._emit_completion, args=(move_id, positions), daemon=True).start()

    def _emit_completion(self, move_id: int, positions: list) -> None:
        if self.ctx.events is None:
            return
        try:
            self.ctx.events.emit("move_complete",
                                 {"device": self.name, "move_id": move_id,
                                  "positions": positions})
        except ControlError:
            pass

    def status(self) -> dict:
        with self.clock.lock:
            return {
                "axes": [axis.name for axis in self.axes],
                "positions": [axis.position for axis in self.axes],
                "targets": [axis.target for axis in self.axes],
                "limits": [list(axis.limits) for axis in self.axes],
                "moving": self._any_moving(),
                "move_count": self.move_count,
            }

    def read_field(self, field_name: str) -> Any:
        with self.clock.lock:
            if field_name.startswith("position_"):
                index = int(field_name.rsplit("_", 1)[1])
                return self.axes[index].position
            if field_name == "moving":
                return self._any_moving()
            if field_name == "move_count":
                return self.move_count
        raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                           f"{self.name!r} has no monitorable field {field_name!r}")


class ShutterDevice(MonitoringMixin, Configurable):
    """Beam shutter with a transit time; commands during transit are rejected."""

    scope = "distributed"
    exposed = ("open", "close", "status", "begin_monitoring", "end_monitoring")
    monitored = ("state",)

    def __init__(self, name: str, ctx: ProcessContext, params: dict):
        super().__init__(name, ctx, params)
        self.clock = get_clock(ctx)
        self.transit_ms = int(params.get("transit_ms", 50))
        self.state = params.get("initial", "closed")
        if self.state not in ("open", "closed"):
            raise bad_args(f"shutter {name!r}: bad initial state {self.state!r}")
        self._target_state = self.state
        self._remaining = 0.0
        self.clock.subscribe(self._tick)

    def _require_token(self, token: Any) -> None:
        if self.ctx.reservations is None or not self.ctx.reservations.validate(self.name, token):
            raise ControlError(ErrorCode.RESERVED,
                               f"{self.name!r} requires a valid reservation token")

    def _command(self, wanted: str, token: str) -> dict:
        self._require_token(token)
        with self.clock.lock:
            if self.state == "transit":
                raise ControlError(ErrorCode.APP_ERROR,
                                   f"shutter {self.name!r} is in transit")
            if self.state != wanted:
                self._target_state = wanted
                self._remaining = self.transit_ms / 1000.0
                self.state = "transit"
            return {"state": self.state, "target": self._target_state}

    def open(self, token: str = "") -> dict:
        return self._command("open", token)

    def close(self, token: str = "") -> dict:
        return self._command("closed", token)

    def _tick(self, dt: float) -> None:
        if self.state != "transit":
            return
        self._remaining -= dt
        if self._remaining <= 0:
            self.state = self._target_state

    def status(self) -> dict:
        with self.clock.lock:
            return {"state": self.state, "transit_ms": self.transit_ms}

    def read_field(self, field_name: str) -> Any:
        with self.clock.lock:
            return super().read_field(field_name)


class SensorDevice(MonitoringMixin, Director):
    """Beam-power sensor: a seeded, noisy Gaussian of the beam offsets.

    The offsets follow the alignment actuator through the status-monitor
    path: at start-up the sensor subscribes to the source device's per-axis
    position monitors, so all periodic sampling stays inside the owning
    FEP. With no source configured the offsets are the static ``offsets``
    parameter.
    """

    scope = "distributed"
    exposed = ("read", "status", "update", "begin_monitoring", "end_monitoring")
    monitored = ("value",)

    def __init__(self, name: str, ctx: ProcessContext, params: dict):
        super().__init__(name, ctx, params)
        self.sigma = float(params.get("sigma", 1.0))
        self.eta = float(params.get("eta", 0.01))
        if self.sigma <= 0:
            raise bad_args(f"sensor {name!r}: sigma must be > 0")
        if self.eta < 0:
            raise bad_args(f"sensor {name!r}: eta must be >= 0")
        self._rng = random.Random(int(params.get("seed", 0)))
        self.shutter_name = params.get("shutter")
        self.source_device = params.get("source_device")
        self.source_fields = list(params.get("source_fields", []))
        self.feed_latency_ms = int(params.get("feed_latency_ms", 20))
        self._offsets = [float(v) for v in params.get("offsets", [0.0])]
        self._feed_seen: set[str] = set()
        if self.source_device and self.source_fields:
            self._offsets = [0.0] * len(self.source_fields)
        self._lock = threading.Lock()
        self._feed_thread: Optional[threading.Thread] = None

    def _feed_ready(self) -> bool:
        # caller holds self._lock
        if not (self.source_device and self.source_fields):
            return True
        return len(self._feed_seen) == len(self.source_fields)

    def started(self) -> None:
        if not (self.source_device and self.source_fields):
            return
        self._feed_thread = threading.Thread(target=self._attach_feed, daemon=True,
                                             name=f"sensor-feed-{self.name}")
        self._feed_thread.start()

    def _attach_feed(self) -> None:
        if self.ctx.registry is None:
            return
        try:
            self.ctx.registry.wait_for(self.source_device, timeout_ms=30000)
            my_ref = self.ctx.self_ref(self.name)
            for field_name in self.source_fields:
                self.ctx.conduit.invoke(self.source_device, "begin_monitoring", {
                    "field": field_name, "precision": 0.0,
                    "latency_ms": self.feed_latency_ms, "subscriber": str(my_ref),
                }, ConnectionPolicy(wait_for_presence=True, max_attempts=5,
                                    retry_backoff_ms=200, call_timeout_ms=5000))
            self.ctx.info(f"sensor {self.name} following {self.source_device}")
        except ControlError as exc:
            self.ctx.warning(f"sensor {self.name} could not follow {self.source_device}: {exc}")

    def handle_update(self, publisher: str, mapper: str, record: Record) -> None:
        if publisher != self.source_device or not mapper.startswith("status:"):
            return
        field_name = mapper.split(":", 1)[1]
        if field_name not in self.source_fields:
            return
        index = self.source_fields.index(field_name)
        value = record.as_dict().get("value")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            with self._lock:
                self._offsets[index] = float(value)
                self._feed_seen.add(field_name)

    def _shutter_open(self) -> bool:
        if not self.shutter_name:
            return True
        sibling = self.ctx.host.get_object(self.shutter_name)
        if sibling is None:
            return True
        return getattr(sibling, "state", "open") == "open"

    def read(self) -> float:
        with self._lock:
            offsets = list(self._offsets)
            ready = self._feed_ready()
        if not ready or not self._shutter_open():
            return 0.0  # no beam image yet, or beam blocked
        value = math.exp(-sum(o * o for o in offsets) / (self.sigma * self.sigma))
        if self.eta:
            value += self._rng.uniform(-self.eta, self.eta)
        return min(1.0, max(0.0, value))

    def status(self) -> dict:
        with self._lock:
            offsets = list(self._offsets)
        return {"sigma": self.sigma, "eta": self.eta, "offsets": offsets,
                "shutter": self.shutter_name, "source_device": self.source_device}

    def read_field(self, field_name: str) -> Any:
        if field_name == "value":
            return self.read()
        raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                           f"{self.name!r} has no monitorable field {field_name!r}")
