"""Status monitoring: FEP-side pollers with per-subscriber deadbands.

Supervisors never poll devices over the network. Instead they ask a
device to begin monitoring a field; the device's host process samples the
field locally every ``latency_ms`` and sends a report only when the change
is significant for that subscriber: numeric fields report when the sample
moved at least ``precision`` away from the last *reported* value,
non-numeric fields report on any change. Each (device, field, subscriber)
has its own monitor, so two observers of one field can ask for different
precision and latency.

``poll_step`` is the whole filtering rule as a pure function so it can be
checked sample-by-sample against an independent replay.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

from .conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref
from .errors import ControlError, ErrorCode, bad_args

log = logging.getLogger(__name__)

#: Sentinel for "no report has been emitted yet".
UNSET = object()

DELIVERY_POLICY = ConnectionPolicy(max_attempts=2, retry_backoff_ms=50, call_timeout_ms=2000)
OUTBOX_LIMIT = 256


@dataclass(frozen=True)
class MonitorSpec:
    device: str
    field: str
    precision: float
    latency_ms: int
    subscriber: ObjectRef

    def __post_init__(self):
        if self.precision < 0:
            raise bad_args("precision must be >= 0")
        if self.latency_ms <= 0:
            raise bad_args("latency must be > 0")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.device, self.field, format_ref(self.subscriber))


@dataclass(frozen=True)
class StatusReport:
    device: str
    field: str
    value: Any
    timestamp: float
    reason: str  # initial | change

    def to_entries(self) -> list[list]:
        return [["device", self.device], ["field", self.field], ["value", self.value],
                ["timestamp", self.timestamp], ["reason", self.reason]]


@dataclass(frozen=True)
class MonitorState:
    spec: MonitorSpec
    last_reported: Any = UNSET
    active: bool = True


def _is_numeric(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def poll_step(state: MonitorState, sample: Any,
              timestamp: Optional[float] = None) -> tuple[MonitorState, Optional[StatusReport]]:
    """Apply one sample to a monitor; returns the new state and a report or None.

    The first sample always reports with reason ``initial``. After that a
    numeric sample reports iff it differs from the last reported value by
    at least the precision (so precision 0 reports every change); any
    other value reports iff it changed at all.
    """
    if not state.active:
        return state, None
    ts = time.time() if timestamp is None else timestamp
    last = state.last_reported
    if last is UNSET:
        report = StatusReport(state.spec.device, state.spec.field, sample, ts, "initial")
        return replace(state, last_reported=sample), report
    if _is_numeric(sample) and _is_numeric(last):
        significant = sample != last and abs(sample - last) >= state.spec.precision
    else:
        significant = sample != last
    if not significant:
        return state, None
    report = StatusReport(state.spec.device, state.spec.field, sample, ts, "change")
    return replace(state, last_reported=sample), report


class _Monitor:
    """One running poller: samples locally, delivers through its outbox."""

    def __init__(self, monitor_id: str, state: MonitorState,
                 sample_fn: Callable[[], Any], deliver_fn: Callable[[StatusReport, int], None],
                 on_overflow: Callable[[str], None]):
        self.id = monitor_id
        self.state = state
        self._sample = sample_fn
        self._deliver = deliver_fn
        self._on_overflow = on_overflow
        self._outbox: deque[tuple[StatusReport, int]] = deque()
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._seq = 0
        self.sample_count = 0
        self._poll_thread = threading.Thread(target=self._poll_loop, daemon=True,
                                             name=f"monitor-{monitor_id}")
        self._send_thread = threading.Thread(target=self._send_loop, daemon=True,
                                             name=f"monitor-send-{monitor_id}")

    def start(self) -> None:
        self._step()  # immediate initial report
        self._poll_thread.start()
        self._send_thread.start()

    def stop(self) -> None:
        self._stop.set()
        with self._cond:
            self._cond.notify_all()

    @property
    def active(self) -> bool:
        return not self._stop.is_set()

    def _step(self) -> None:
        try:
            sample = self._sample()
        except ControlError:
            return  # field temporarily unreadable; try next period
        self.sample_count += 1
        self.state, report = poll_step(self.state, sample)
        if report is None:
            return
        with self._cond:
            self._seq += 1
            if len(self._outbox) >= OUTBOX_LIMIT:
                self._outbox.popleft()
                self._on_overflow(self.id)
            self._outbox.append((report, self._seq))
            self._cond.notify_all()

    def _poll_loop(self) -> None:
        period = self.state.spec.latency_ms / 1000.0
        while not self._stop.wait(period):
            self._step()

    def _send_loop(self) -> None:
        while True:
            with self._cond:
                while not self._outbox and not self._stop.is_set():
                    self._cond.wait()
                if self._stop.is_set() and not self._outbox:
                    return
                report, seq = self._outbox.popleft()
            try:
                self._deliver(report, seq)
            except ControlError as exc:
                log.warning("monitor %s delivery failed: %s", self.id, exc)


class MonitorHub:
    """Per-process registry of running monitors for the devices it hosts.

    Keyed by (device, field, subscriber): a re-request replaces the prior
    monitor. Reports travel to the subscriber's ``update`` method over the
    process conduit; delivery never blocks sampling.
    """

    def __init__(self, conduit: Conduit, warn: Optional[Callable[[str], None]] = None):
        self._conduit = conduit
        self._warn = warn or (lambda text: log.warning("%s", text))
        self._monitors: dict[str, _Monitor] = {}
        self._by_key: dict[tuple, str] = {}
        self._lock = threading.Lock()
        self._next = 1

    def begin(self, spec: MonitorSpec, sample_fn: Callable[[], Any]) -> str:
        sample_fn()  # validates the field exists before anything starts
        with self._lock:
            monitor_id = f"mon-{self._next}"
            self._next += 1
            old_id = self._by_key.pop(spec.key, None)
            old = self._monitors.pop(old_id, None) if old_id else None
            monitor = _Monitor(
                monitor_id,
                MonitorState(spec),
                sample_fn,
                self._make_deliver(spec),
                lambda mid: self._warn(f"monitor {mid} outbox overflow; oldest report dropped"),
            )
            self._monitors[monitor_id] = monitor
            self._by_key[spec.key] = monitor_id
        if old is not None:
            old.stop()
        monitor.start()
        return monitor_id

    def end(self, monitor_id: str) -> None:
        with self._lock:
            monitor = self._monitors.pop(monitor_id, None)
            if monitor is not None:
                self._by_key.pop(monitor.state.spec.key, None)
        if monitor is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no monitor {monitor_id!r}")
        monitor.stop()

    def end_all(self) -> None:
        with self._lock:
            monitors = list(self._monitors.values())
            self._monitors.clear()
            self._by_key.clear()
        for m in monitors:
            m.stop()

    def _make_deliver(self, spec: MonitorSpec) -> Callable[[StatusReport, int], None]:
        def deliver(report: StatusReport, seq: int) -> None:
            self._conduit.invoke(spec.subscriber, "update", {
                "publisher": spec.device,
                "mapper": f"status:{spec.field}",
                "record": {"seq": seq, "entries": report.to_entries()},
            }, DELIVERY_POLICY)
        return deliver

    def sample_counts(self) -> dict[str, int]:
        with self._lock:
            return {mid: m.sample_count for mid, m in self._monitors.items()}
