"""Shared service frameworks: central message log, events, alerts, reservations.

Each store is an in-memory ring buffer behind one lock (append is the
serialization point; queries snapshot). The stores live in the central
control process and are served as the distributed objects ``__log``,
``__events`` and ``__reservations``; processes talk to them through the
thin clients at the bottom of this module.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref, parse_ref
from .errors import ControlError, ErrorCode, bad_args

SEVERITIES = ("debug", "info", "warning", "error")
ALERT_SEVERITIES = ("warning", "critical")
DEFAULT_CAPACITY = 65536


@dataclass
class LogRecord:
    seq: int
    timestamp: float
    process: str
    severity: str
    text: str

    def to_wire(self) -> dict:
        return {"seq": self.seq, "timestamp": self.timestamp, "process": self.process,
                "severity": self.severity, "text": self.text}


@dataclass
class Event:
    seq: int
    timestamp: float
    name: str
    source: str
    payload: Any

    def to_wire(self) -> dict:
        return {"seq": self.seq, "timestamp": self.timestamp, "name": self.name,
                "source": self.source, "payload": self.payload}


@dataclass
class Alert:
    id: str
    event: Event
    severity: str
    state: str = "raised"  # raised | acknowledged
    acked_by: Optional[str] = None

    def to_wire(self) -> dict:
        return {"id": self.id, "event": self.event.to_wire(), "severity": self.severity,
                "state": self.state, "acked_by": self.acked_by}


@dataclass
class Reservation:
    device: str
    holder: str
    token: str
    acquired_at: float

    def to_wire(self) -> dict:
        return {"device": self.device, "holder": self.holder, "token": self.token,
                "acquired_at": self.acquired_at}


class LogStore:
    """Central message log: strictly increasing seq in arrival order."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, file_path: Optional[str | Path] = None):
        self._records: deque[LogRecord] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._next_seq = 1
        self._file = open(file_path, "a", encoding="utf-8") if file_path else None

    def append(self, process: str, severity: str, text: str) -> int:
        if severity not in SEVERITIES:
            raise bad_args(f"bad severity {severity!r}")
        with self._lock:
            record = LogRecord(self._next_seq, time.time(), process, severity, str(text))
            self._next_seq += 1
            self._records.append(record)
            if self._file is not None:
                self._file.write(json.dumps(record.to_wire()) + "\n")
                self._file.flush()
        return record.seq

    def query(self, min_severity: Optional[str] = None, process: Optional[str] = None,
              since_seq: int = 0, limit: int = 0) -> list[LogRecord]:
        if min_severity is not None and min_severity not in SEVERITIES:
            raise bad_args(f"bad severity {min_severity!r}")
        floor = SEVERITIES.index(min_severity) if min_severity else 0
        with self._lock:
            snapshot = list(self._records)
        out = [r for r in snapshot
               if SEVERITIES.index(r.severity) >= floor
               and (process is None or r.process == process)
               and r.seq > since_seq]
        return out[-limit:] if limit else out


class EventStore:
    """Facility event stream with push delivery to subscribed Directors."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self._events: deque[Event] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._next_seq = 1
        self._sinks: list[Callable[[Event], None]] = []

    def add_sink(self, sink: Callable[[Event], None]) -> None:
        with self._lock:
            self._sinks.append(sink)

    def emit(self, name: str, source: str, payload: Any = None) -> Event:
        with self._lock:
            event = Event(self._next_seq, time.time(), name, source, payload)
            self._next_seq += 1
            self._events.append(event)
            sinks = list(self._sinks)
        for sink in sinks:
            sink(event)
        return event

    def query(self, name: Optional[str] = None, source: Optional[str] = None,
              since_seq: int = 0) -> list[Event]:
        with self._lock:
            snapshot = list(self._events)
        return [e for e in snapshot
                if (name is None or e.name == name)
                and (source is None or e.source == source)
                and e.seq > since_seq]


class AlertStore:
    """Raised/acknowledged alerts; both transitions propagate to sinks."""

    def __init__(self, events: EventStore):
        self._events = events
        self._alerts: dict[str, Alert] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._sinks: list[Callable[[Alert], None]] = []

    def add_sink(self, sink: Callable[[Alert], None]) -> None:
        with self._lock:
            self._sinks.append(sink)

    def raise_alert(self, name: str, source: str, payload: Any, severity: str) -> Alert:
        if severity not in ALERT_SEVERITIES:
            raise bad_args(f"bad alert severity {severity!r}")
        event = self._events.emit(name, source, payload)
        with self._lock:
            alert = Alert(id=uuid.uuid4().hex, event=event, severity=severity)
            self._alerts[alert.id] = alert
            self._order.append(alert.id)
            sinks = list(self._sinks)
        for sink in sinks:
            sink(alert)
        return alert

    def acknowledge(self, alert_id: str, operator: str) -> Alert:
        with self._lock:
            alert = self._alerts.get(alert_id)
            if alert is None:
                raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no alert {alert_id!r}")
            if alert.state == "acknowledged":
                raise bad_args(f"alert {alert_id!r} already acknowledged")
            alert.state = "acknowledged"
            alert.acked_by = operator
            sinks = list(self._sinks)
        for sink in sinks:
            sink(alert)
        return alert

    def list(self, state: Optional[str] = None) -> list[Alert]:
        with self._lock:
            alerts = [self._alerts[i] for i in self._order]
        if state is not None:
            alerts = [a for a in alerts if a.state == state]
        return alerts


class ReservationStore:
    """Advisory device locks: at most one live reservation per device.

    With ``lease_ms`` set, reservations expire that long after the last
    acquire/renewal, so a crashed holder cannot wedge a device forever.
    """

    def __init__(self, lease_ms: Optional[int] = None):
        self._by_device: dict[str, Reservation] = {}
        self._lock = threading.Lock()
        self._lease_ms = lease_ms

    def _expired(self, res: Reservation) -> bool:
        return (self._lease_ms is not None
                and (time.time() - res.acquired_at) * 1000.0 > self._lease_ms)

    def reserve(self, device: str, holder: str) -> Reservation:
        with self._lock:
            current = self._by_device.get(device)
            if current is not None and self._expired(current):
                del self._by_device[device]
                current = None
            if current is not None:
                if current.holder != holder:
                    raise ControlError(
                        ErrorCode.RESERVED, f"{device!r} is reserved by {current.holder!r}")
                current.acquired_at = time.time()  # same-holder renewal
                return current
            res = Reservation(device, holder, uuid.uuid4().hex, time.time())
            self._by_device[device] = res
            return res

    def release(self, token: str) -> None:
        with self._lock:
            for device, res in self._by_device.items():
                if res.token == token:
                    del self._by_device[device]
                    return
        raise bad_args("unknown reservation token")

    def holder_of(self, device: str) -> Optional[str]:
        with self._lock:
            res = self._by_device.get(device)
            if res is None or self._expired(res):
                return None
            return res.holder

    def validate(self, device: str, token: Any) -> bool:
        if not isinstance(token, str):
            return False
        with self._lock:
            res = self._by_device.get(device)
            return res is not None and not self._expired(res) and res.token == token


# -- served method tables ----------------------------------------------------


class LogService:
    def __init__(self, store: LogStore):
        self._store = store

    def append(self, process: str, severity: str, text: str) -> int:
        return self._store.append(process, severity, text)

    def query(self, min_severity: str | None = None, process: str | None = None,
              since_seq: int = 0, limit: int = 0) -> list[dict]:
        return [r.to_wire() for r in self._store.query(min_severity, process, since_seq, limit)]


class EventService:
    """Wire surface for both the event stream and the alert list."""

    def __init__(self, events: EventStore, alerts: AlertStore):
        self._events = events
        self._alerts = alerts

    def emit(self, name: str, source: str, payload: Any = None) -> int:
        return self._events.emit(name, source, payload).seq

    def query(self, name: str | None = None, source: str | None = None,
              since_seq: int = 0) -> list[dict]:
        return [e.to_wire() for e in self._events.query(name, source, since_seq)]

    def raise_alert(self, name: str, source: str, payload: Any, severity: str) -> str:
        return self._alerts.raise_alert(name, source, payload, severity).id

    def acknowledge(self, alert_id: str, operator: str) -> bool:
        self._alerts.acknowledge(alert_id, operator)
        return True

    def list_alerts(self, state: str | None = None) -> list[dict]:
        return [a.to_wire() for a in self._alerts.list(state)]

    def subscribe(self, subscriber: str) -> bool:
        """Push every event and alert transition to *subscriber* (a Director ref)."""
        self._push_target(parse_ref(subscriber))
        return True

    # Push plumbing is attached by the control process, which owns the
    # conduit used for outbound update calls.
    _attach_push: Optional[Callable[[ObjectRef], None]] = None

    def _push_target(self, ref: ObjectRef) -> None:
        if self._attach_push is None:
            raise ControlError(ErrorCode.APP_ERROR, "event push not wired")
        self._attach_push(ref)


# -- clients ------------------------------------------------------------------

_SERVICE_POLICY = ConnectionPolicy(max_attempts=2, retry_backoff_ms=100, call_timeout_ms=5000)


class LogClient:
    """Best-effort central logger; failures never disturb the caller."""

    def __init__(self, conduit: Conduit, control_host: str, control_port: int, process: str):
        self._conduit = conduit
        self._ref = ObjectRef(control_host, control_port, "control", "__log")
        self.process = process

    def log(self, severity: str, text: str) -> Optional[int]:
        try:
            return self._conduit.invoke(
                self._ref, "append",
                {"process": self.process, "severity": severity, "text": text},
                _SERVICE_POLICY, refreshable=False)
        except ControlError:
            return None

    def query(self, **kwargs) -> list[dict]:
        return self._conduit.invoke(self._ref, "query", kwargs, _SERVICE_POLICY, refreshable=False)


class EventsClient:
    def __init__(self, conduit: Conduit, control_host: str, control_port: int, source: str):
        self._conduit = conduit
        self._ref = ObjectRef(control_host, control_port, "control", "__events")
        self.source = source

    def emit(self, name: str, payload: Any = None) -> int:
        return self._conduit.invoke(
            self._ref, "emit", {"name": name, "source": self.source, "payload": payload},
            _SERVICE_POLICY, refreshable=False)

    def raise_alert(self, name: str, payload: Any, severity: str) -> str:
        return self._conduit.invoke(
            self._ref, "raise_alert",
            {"name": name, "source": self.source, "payload": payload, "severity": severity},
            _SERVICE_POLICY, refreshable=False)

    def acknowledge(self, alert_id: str, operator: str) -> None:
        self._conduit.invoke(self._ref, "acknowledge",
                             {"alert_id": alert_id, "operator": operator},
                             _SERVICE_POLICY, refreshable=False)

    def query(self, **kwargs) -> list[dict]:
        return self._conduit.invoke(self._ref, "query", kwargs, _SERVICE_POLICY, refreshable=False)

    def list_alerts(self, state: str | None = None) -> list[dict]:
        return self._conduit.invoke(self._ref, "list_alerts", {"state": state},
                                    _SERVICE_POLICY, refreshable=False)

    def subscribe(self, subscriber: ObjectRef) -> None:
        self._conduit.invoke(self._ref, "subscribe",
                             {"subscriber": format_ref(subscriber)},
                             _SERVICE_POLICY, refreshable=False)


class ReservationsClient:
    def __init__(self, conduit: Conduit, control_host: str, control_port: int):
        self._conduit = conduit
        self._ref = ObjectRef(control_host, control_port, "control", "__reservations")

    def reserve(self, device: str, holder: str) -> dict:
        return self._conduit.invoke(self._ref, "reserve",
                                    {"device": device, "holder": holder},
                                    _SERVICE_POLICY, refreshable=False)

    def release(self, token: str) -> None:
        self._conduit.invoke(self._ref, "release", {"token": token},
                             _SERVICE_POLICY, refreshable=False)

    def validate(self, device: str, token: Any) -> bool:
        return bool(self._conduit.invoke(self._ref, "validate",
                                         {"device": device, "token": token},
                                         _SERVICE_POLICY, refreshable=False))

    def holder_of(self, device: str) -> Optional[str]:
        return self._conduit.invoke(self._ref, "holder_of", {"device": device},
                                    _SERVICE_POLICY, refreshable=False)


class ReservationService:
    def __init__(self, store: ReservationStore):
        self._store = store

    def reserve(self, device: str, holder: str) -> dict:
        return self._store.reserve(device, holder).to_wire()

    def release(self, token: str) -> bool:
        self._store.release(token)
        return True

    def validate(self, device: str, token: Any = None) -> bool:
        return self._store.validate(device, token)

    def holder_of(self, device: str) -> Optional[str]:
        return self._store.holder_of(device)
