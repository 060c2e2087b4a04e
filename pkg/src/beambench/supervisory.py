"""Supervisory tier: Directors, LCUs and data-mapper publication.

A Director is anything exposing ``update``; GUIs (via the gateway) and
LCUs are both Directors, so any of them can subscribe to any publisher.
An LCU holds private state that subscribers never see directly: every
published record is produced by a named data mapper, a pure projection of
the state. Publication is change-driven: after each state evolution, a
mapper whose projection differs from its last published record gets the
next sequence number and the new record is fanned out.

Delivery is decoupled from evolution: each subscriber has its own ordered
outbox and worker, so a dead subscriber delays nobody. A delivery that
fails (after its connection policy's attempts) detaches the subscriber
and raises an alert.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .conduit import ConnectionPolicy, ObjectRef, format_ref, parse_ref
from .errors import ControlError, ErrorCode, bad_args
from .kernel import Configurable, ProcessContext

log = logging.getLogger(__name__)

PUBLISH_POLICY = ConnectionPolicy(max_attempts=2, retry_backoff_ms=50, call_timeout_ms=2000)

Entries = list[list]  # ordered [key, value] pairs


@dataclass(frozen=True)
class Record:
    seq: int
    entries: tuple[tuple[str, Any], ...]

    def to_wire(self) -> dict:
        return {"seq": self.seq, "entries": [[k, v] for k, v in self.entries]}

    @classmethod
    def from_wire(cls, raw: dict) -> "Record":
        return cls(int(raw["seq"]), tuple((k, v) for k, v in raw.get("entries", [])))

    def as_dict(self) -> dict:
        return {k: v for k, v in self.entries}


@dataclass(frozen=True)
class DataMapper:
    """A named pure projection of LCU private state into record entries."""

    name: str
    projection: Callable[[dict], list[tuple[str, Any]]]

    def project(self, state: dict) -> tuple[tuple[str, Any], ...]:
        entries = tuple((str(k), v) for k, v in self.projection(state))
        keys = [k for k, _ in entries]
        if len(keys) != len(set(keys)):
            raise bad_args(f"mapper {self.name!r} produced duplicate keys")
        return entries


class Director(Configurable):
    """Subscriber role: any publisher can call ``update`` on it.

    Redelivery of the same (publisher, mapper, seq) is ignored, so the
    handler is idempotent under at-least-once delivery.
    """

    scope = "distributed"
    exposed = ("update",)
    # Updates arrive from many publishers at once and must not queue
    # behind a long-running call on the same object; Directors do their
    # own locking instead of relying on per-object dispatch serialization.
    serialize_dispatch = False

    def __init__(self, name: str, ctx: Optional[ProcessContext], params: dict):
        super().__init__(name, ctx, params)
        self._seen: dict[tuple[str, str], int] = {}
        self._seen_lock = threading.Lock()

    def update(self, publisher: str, mapper: str, record: dict) -> bool:
        rec = Record.from_wire(record)
        with self._seen_lock:
            last = self._seen.get((publisher, mapper))
            if last is not None and rec.seq <= last:
                return True
            self._seen[(publisher, mapper)] = rec.seq
        self.handle_update(publisher, mapper, rec)
        return True

    def reset_dedupe(self, publisher: str, mapper: str) -> None:
        """Forget delivery history, e.g. before re-attaching to a publisher."""
        with self._seen_lock:
            self._seen.pop((publisher, mapper), None)

    def handle_update(self, publisher: str, mapper: str, record: Record) -> None:
        """Subclass hook; the base class only deduplicates."""


@dataclass
class _Subscription:
    id: str
    mapper: str
    ref: ObjectRef
    outbox: list = None  # type: ignore[assignment]

    def __post_init__(self):
        self.outbox = []
        self.cond = threading.Condition()
        self.closed = False


class LCU(Director):
    """Publisher+subscriber modeling one portion of the facility.

    Subclasses seed ``self._state`` and register mappers; all reads and
    writes of private state go through :meth:`evolve` (or run under
    ``self._guard``), which keeps one LCU's operations mutually ordered.
    """

    def __init__(self, name: str, ctx: Optional[ProcessContext], params: dict):
        super().__init__(name, ctx, params)
        self._guard = threading.RLock()
        self._state: dict = {}
        self._mappers: dict[str, DataMapper] = {}
        self._subs: dict[str, _Subscription] = {}
        self._last: dict[str, Record] = {}
        self._seqs: dict[str, int] = {}
        self.exposed = tuple(set(self.exposed) | {"update", "attach_mapper", "detach"})

    # -- mapper management -------------------------------------------------

    def add_mapper(self, name: str, projection: Callable[[dict], list[tuple[str, Any]]]) -> None:
        mapper = DataMapper(name, projection)
        with self._guard:
            self._mappers[name] = mapper
            self._seqs.setdefault(name, 0)
            self._last.setdefault(name, Record(0, mapper.project(self._state)))

    # -- subscription protocol ----------------------------------------------

    def attach_mapper(self, mapper: str, subscriber: str) -> str:
        """Subscribe *subscriber* (a ref string) to one of our mappers.

        The current snapshot is queued for delivery before any
        change-driven record.
        """
        ref = parse_ref(subscriber) if isinstance(subscriber, str) else subscriber
        with self._guard:
            if mapper not in self._mappers:
                raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                                   f"{self.name!r} has no mapper {mapper!r}")
            sub = _Subscription(uuid.uuid4().hex, mapper, ref)
            self._subs[sub.id] = sub
            snapshot = self._last[mapper]
            self._enqueue(sub, snapshot)
        self._start_delivery(sub)
        return sub.id

    def detach(self, subscription_id: str) -> bool:
        with self._guard:
            sub = self._subs.pop(subscription_id, None)
        if sub is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                               f"no subscription {subscription_id!r}")
        with sub.cond:
            sub.closed = True
            sub.cond.notify_all()
        return True

    def subscriber_count(self, mapper: Optional[str] = None) -> int:
        with self._guard:
            return sum(1 for s in self._subs.values() if mapper is None or s.mapper == mapper)

    # -- evolution -----------------------------------------------------------

    def apply_delta(self, state: dict, delta: dict) -> dict:
        """Default state transition: shallow merge. Subclasses may reject."""
        merged = dict(state)
        merged.update(delta)
        return merged

    def evolve(self, delta: dict) -> bool:
        """Apply a state delta, then publish every mapper whose projection changed."""
        with self._guard:
            self._state = self.apply_delta(self._state, delta)
            for name, mapper in self._mappers.items():
                entries = mapper.project(self._state)
                if entries == self._last[name].entries:
                    continue
                self._seqs[name] += 1
                record = Record(self._seqs[name], entries)
                self._last[name] = record
                self._publish(name, record)
        return True

    def peek(self, mapper: str) -> Record:
        with self._guard:
            if mapper not in self._mappers:
                raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                                   f"{self.name!r} has no mapper {mapper!r}")
            return self._last[mapper]

    # -- delivery ------------------------------------------------------------

    def _publish(self, mapper: str, record: Record) -> None:
        # caller holds the guard
        for sub in self._subs.values():
            if sub.mapper == mapper:
                self._enqueue(sub, record)

    def _enqueue(self, sub: _Subscription, record: Record) -> None:
        with sub.cond:
            sub.outbox.append(record)
            sub.cond.notify_all()

    def _start_delivery(self, sub: _Subscription) -> None:
        threading.Thread(target=self._delivery_loop, args=(sub,), daemon=True,
                         name=f"deliver-{self.name}-{sub.id[:6]}").start()

    def _delivery_loop(self, sub: _Subscription) -> None:
        while True:
            with sub.cond:
                while not sub.outbox and not sub.closed:
                    sub.cond.wait()
                if sub.closed:
                    return
                record = sub.outbox.pop(0)
            try:
                self._deliver(sub, record)
            except ControlError as exc:
                self._drop_subscriber(sub, exc)
                return

    def _deliver(self, sub: _Subscription, record: Record) -> None:
        if self.ctx is None:
            raise ControlError(ErrorCode.COMM_FAILURE, "no conduit in context")
        self.ctx.conduit.invoke(sub.ref, "update", {
            "publisher": self.name, "mapper": sub.mapper, "record": record.to_wire(),
        }, self.delivery_policy())

    def delivery_policy(self) -> ConnectionPolicy:
        return PUBLISH_POLICY

    def _drop_subscriber(self, sub: _Subscription, exc: ControlError) -> None:
        with self._guard:
            self._subs.pop(sub.id, None)
        log.warning("%s: dropping subscriber %s after failed delivery: %s",
                    self.name, format_ref(sub.ref), exc)
        if self.ctx is not None and self.ctx.events is not None:
            try:
                self.ctx.events.raise_alert(
                    "subscriber_dropped",
                    {"lcu": self.name, "mapper": sub.mapper, "subscriber": format_ref(sub.ref),
                     "error": exc.code.value},
                    "warning")
            except ControlError:
                log.warning("%s: could not raise subscriber_dropped alert", self.name)
