"""Alignment LCU: drives an actuator to maximize a sensor reading.

All device observation travels through status monitors (the device image
below is fed purely by pushed reports; the LCU never polls a device), and
all commands go through reserved conduit invocations. The search is a
coordinate descent: step one axis at a time, keep improving steps, revert
and shrink otherwise.
"""

from __future__ import annotations

import threading
import time
from typing import Any, Optional

from ..conduit import ConnectionPolicy
from ..errors import ControlError, ErrorCode
from ..kernel import ProcessContext
from ..supervisory import LCU, Record

COMMAND_POLICY = ConnectionPolicy(ping_before_invoke=False, refresh_on_failure=True,
                                  max_attempts=3, retry_backoff_ms=100, call_timeout_ms=5000)

PHASES = ("idle", "aligning", "aligned", "fault")


class AlignmentLCU(LCU):
    """Supervisory object for one alignment chain (actuator + sensor + shutter)."""

    exposed = ("align", "reset", "status", "begin_follow")

    def __init__(self, name: str, ctx: Optional[ProcessContext], params: dict):
        super().__init__(name, ctx, params)
        self.actuator = params.get("actuator")
        self.sensor = params.get("sensor")
        self.shutter = params.get("shutter")
        self.monitor_latency_ms = int(params.get("monitor_latency_ms", 25))
        self.settle_ms = int(params.get("settle_ms", 4 * self.monitor_latency_ms))
        self.step_init = float(params.get("step_init", 0.1))
        self.step_floor = float(params.get("step_floor", 0.001))
        self._image_cond = threading.Condition(self._guard)
        self._report_counts: dict[str, int] = {}
        self._axis_count = 0
        self._limits: list[list[float]] = []
        self._monitors_started = False
        self._state = {
            "phase": "idle", "iteration": 0, "best_value": 0.0,
            "sensor": None, "positions": [], "moving": None, "shutter": None,
        }
        self.add_mapper("summary", lambda s: [
            ("phase", s.get("phase", "idle")),
            ("best_value", s.get("best_value", 0.0)),
            ("iteration", s.get("iteration", 0)),
        ])
        self.add_mapper("positions", lambda s: [
            (f"axis_{i}", v) for i, v in enumerate(s.get("positions", []))
        ])

    # -- device image (fed only by pushed status reports) -------------------

    def handle_update(self, publisher: str, mapper: str, record: Record) -> None:
        if not mapper.startswith("status:"):
            return
        field_name = mapper.split(":", 1)[1]
        value = record.as_dict().get("value")
        delta: dict[str, Any] = {}
        with self._guard:
            if publisher == self.sensor and field_name == "value":
                delta["sensor"] = value
            elif publisher == self.actuator and field_name.startswith("position_"):
                index = int(field_name.rsplit("_", 1)[1])
                positions = list(self._state.get("positions", []))
                while len(positions) <= index:
                    positions.append(None)
                positions[index] = value
                delta["positions"] = positions
            elif publisher == self.actuator and field_name == "moving":
                delta["moving"] = value
            elif publisher == self.shutter and field_name == "state":
                delta["shutter"] = value
            else:
                return
            self._report_counts[mapper] = self._report_counts.get(mapper, 0) + 1
            self.evolve(delta)
            self._image_cond.notify_all()

    def _wait_image(self, predicate, timeout_s: float) -> bool:
        deadline = time.monotonic() + timeout_s
        with self._guard:
            while not predicate(self._state):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._image_cond.wait(remaining)
            return True

    def _settle(self) -> None:
        """Let the sensor image catch up with a now-quiescent device state.

        Reports from one monitor arrive in order, so after a full settle
        window the newest-arrived sensor report reflects a sample taken at
        rest; an early return on "some report arrived" could instead catch
        a stale in-flight sample and make runs diverge.
        """
        time.sleep(self.settle_ms / 1000.0)

    # -- setup ---------------------------------------------------------------

    def begin_follow(self) -> bool:
        """Start the status monitors that keep the device image alive."""
        if self.ctx is None:
            raise ControlError(ErrorCode.APP_ERROR, "no context")
        if self._monitors_started:
            return True
        info = self.ctx.conduit.invoke(self.actuator, "status", {}, COMMAND_POLICY)
        self._axis_count = len(info["axes"])
        self._limits = info["limits"]
        my_ref = str(self.ctx.self_ref(self.name))

        def begin(device: str, field_name: str) -> None:
            self.ctx.conduit.invoke(device, "begin_monitoring", {
                "field": field_name, "precision": 0.0,
                "latency_ms": self.monitor_latency_ms, "subscriber": my_ref,
            }, COMMAND_POLICY)

        begin(self.sensor, "value")
        begin(self.actuator, "moving")
        for i in range(self._axis_count):
            begin(self.actuator, f"position_{i}")
        if self.shutter:
            begin(self.shutter, "state")
        self._monitors_started = True
        return True

    def reset(self) -> str:
        with self._guard:
            phase = self._state["phase"]
            if phase == "aligning":
                raise ControlError(ErrorCode.APP_ERROR, "cannot reset while aligning")
            self.evolve({"phase": "idle", "iteration": 0, "best_value": 0.0})
            return "idle"

    def status(self) -> dict:
        with self._guard:
            return dict(self._state)

    # -- the alignment loop ----------------------------------------------------

    def align(self, threshold: float, max_iters: int, operator: str = "") -> str:
        """Run coordinate descent until the sensor clears *threshold*.

        Returns the final phase: ``aligned`` or ``fault``.
        """
        if not (0.0 < threshold <= 1.0):
            raise ControlError(ErrorCode.BAD_ARGS, "threshold must be in (0, 1]")
        operator = operator or self.name
        with self._guard:
            if self._state["phase"] != "idle":
                raise ControlError(ErrorCode.APP_ERROR,
                                   f"align requires phase idle, not {self._state['phase']!r}")
            self.evolve({"phase": "aligning", "iteration": 0, "best_value": 0.0})
        tokens: dict[str, str] = {}
        try:
            self.begin_follow()
            tokens = self._reserve_devices(operator)
            self._open_shutter(tokens)
            self._await_first_reports()
            self._settle()  # deterministic post-open baseline
            aligned = self._descend(threshold, max_iters, tokens)
            final = "aligned" if aligned else "fault"
        except ControlError:
            with self._guard:
                self.evolve({"phase": "fault"})
            raise
        finally:
            self._release_devices(tokens)
        with self._guard:
            self.evolve({"phase": final})
        return final

    def _reserve_devices(self, operator: str) -> dict[str, str]:
        tokens: dict[str, str] = {}
        devices = [self.actuator] + ([self.shutter] if self.shutter else [])
        for device in devices:
            res = self.ctx.reservations.reserve(device, operator)
            tokens[device] = res["token"]
        return tokens

    def _release_devices(self, tokens: dict[str, str]) -> None:
        if self.ctx is None or self.ctx.reservations is None:
            return
        for token in tokens.values():
            try:
                self.ctx.reservations.release(token)
            except ControlError:
                pass

    def _open_shutter(self, tokens: dict[str, str]) -> None:
        if not self.shutter:
            return
        status = self.ctx.conduit.invoke(self.shutter, "status", {}, COMMAND_POLICY)
        if status["state"] == "open":
            return
        transit = status.get("transit_ms", 100)
        self.ctx.conduit.invoke(self.shutter, "open", {"token": tokens[self.shutter]},
                                COMMAND_POLICY)
        if not self._wait_image(lambda s: s.get("shutter") == "open",
                                (transit + 2000) / 1000.0):
            raise ControlError(ErrorCode.TIMEOUT, "shutter did not open")

    def _await_first_reports(self) -> None:
        ok = self._wait_image(
            lambda s: s.get("sensor") is not None
            and len(s.get("positions", [])) == self._axis_count
            and all(p is not None for p in s.get("positions", [])),
            timeout_s=5.0)
        if not ok:
            raise ControlError(ErrorCode.TIMEOUT, "no initial status reports")

    def _move_and_settle(self, targets: list[float], token: str) -> None:
        self.ctx.conduit.invoke(self.actuator, "move_to",
                                {"targets": targets, "token": token}, COMMAND_POLICY)
        arrived = self._wait_image(
            lambda s: list(s.get("positions", [])) == targets, timeout_s=10.0)
        if not arrived:
            raise ControlError(ErrorCode.TIMEOUT, f"actuator did not reach {targets}")
        self._settle()

    def _descend(self, threshold: float, max_iters: int, tokens: dict[str, str]) -> bool:
        token = tokens[self.actuator]
        with self._guard:
            positions = [float(p) for p in self._state["positions"]]
            best = float(self._state["sensor"])
            self.evolve({"best_value": best})
        if best >= threshold:
            return True
        axis_count = self._axis_count
        steps = [self.step_init] * axis_count
        directions = [1.0] * axis_count
        tried_other = [False] * axis_count
        for iteration in range(1, max_iters + 1):
            axis = (iteration - 1) % axis_count
            candidate = list(positions)
            lo, hi = self._limits[axis]
            candidate[axis] = min(hi, max(lo, candidate[axis] + directions[axis] * steps[axis]))
            moved = candidate[axis] != positions[axis]
            if moved:
                self._move_and_settle(candidate, token)
                with self._guard:
                    value = float(self._state["sensor"])
            else:
                value = best  # pinned at a limit: treat as non-improving
            if value > best:
                positions = candidate
                best = value
                tried_other[axis] = False
            else:
                if moved:
                    self._move_and_settle(positions, token)  # revert
                if tried_other[axis]:
                    steps[axis] = max(self.step_floor, steps[axis] / 2.0)
                    tried_other[axis] = False
                else:
                    directions[axis] = -directions[axis]
                    tried_other[axis] = True
            with self._guard:
                self.evolve({"iteration": iteration, "best_value": best})
            if best >= threshold:
                return True
        return False
