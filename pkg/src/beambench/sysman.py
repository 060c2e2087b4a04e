"""Central system manager plus the control hub it lives in.

The hub is one process hosting the name service (``__registry``), the
shared service stores (``__log``, ``__events``, ``__reservations``) and the
manager itself (``__sysman``). It mediates facility start-up in three
phases (FEPs, then supervisors, then gateways), tracks per-process state
reported by local-manager proxies, and watches for unscheduled
termination: a process that misses heartbeats or exits as an OS child is
marked failed, an alert is raised, and its names are dropped from the
name service.
"""

from __future__ import annotations

import logging
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref, parse_ref
from .errors import ControlError, ErrorCode, bad_args
from .kernel import Configurable, ProcessContext, ProcessHost
from .registry import FacilityConfig, NameTable, RegistryService
from .services import (
    AlertStore,
    EventService,
    EventStore,
    LogService,
    LogStore,
    ReservationService,
    ReservationStore,
)

log = logging.getLogger(__name__)

STATES = ("pending", "starting", "ready", "failed", "stopped")
_ALLOWED = {
    "pending": {"starting"},
    "starting": {"ready", "failed", "stopped"},
    "ready": {"ready", "failed", "stopped"},  # ready->ready is the heartbeat
    "failed": set(),
    "stopped": set(),
}
PHASE_ORDER = ("fep", "supervisor", "gateway")


@dataclass
class ProcessRecord:
    name: str
    category: str
    state: str = "pending"
    last_heartbeat: float = 0.0
    handle: Optional[subprocess.Popen] = None


@dataclass
class StartPlan:
    phases: list[list[str]]


def plan(config: FacilityConfig) -> StartPlan:
    """Partition the facility into the three ordered start phases."""
    phases = [[p.name for p in config.processes if p.category == cat] for cat in PHASE_ORDER]
    return StartPlan(phases)


class SystemManager:
    """Facility state machine; all mutations pass through one lock."""

    def __init__(self, config: FacilityConfig, names: NameTable, events: EventStore,
                 alerts: AlertStore, spawn: Optional[Callable[[str], subprocess.Popen]] = None,
                 restart: bool = False):
        self.config = config
        self.names = names
        self.events = events
        self.alerts = alerts
        self.spawn = spawn or self._spawn_cli
        self.restart = restart
        self._records = {p.name: ProcessRecord(p.name, p.category) for p in config.processes}
        self._cond = threading.Condition()
        self._watch_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- records ----------------------------------------------------------

    def record(self, name: str) -> ProcessRecord:
        rec = self._records.get(name)
        if rec is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"unknown process {name!r}")
        return rec

    def report(self, process: str, state: str) -> None:
        """Accept a state report from a local-manager proxy."""
        if state not in STATES:
            raise bad_args(f"unknown state {state!r}")
        with self._cond:
            rec = self.record(process)
            if state == rec.state == "ready":
                rec.last_heartbeat = time.time()
                return
            if state not in _ALLOWED[rec.state]:
                raise bad_args(f"illegal transition {rec.state} -> {state} for {process!r}")
            self._transition(rec, state)

    def _transition(self, rec: ProcessRecord, state: str) -> None:
        # caller holds the lock
        rec.state = state
        if state == "ready":
            rec.last_heartbeat = time.time()
        self._cond.notify_all()
        self.events.emit("process_state", rec.name, {"state": state})
        log.info("process %s -> %s", rec.name, state)

    def states(self) -> dict[str, str]:
        with self._cond:
            return {n: r.state for n, r in self._records.items()}

    # -- launch -----------------------------------------------------------

    def _spawn_cli(self, process: str) -> subprocess.Popen:
        spec = self.config.process(process)
        cmd = [sys.executable, "-m", "beambench", spec.category,
               "--name", process, "--config", self.config.source_path or ""]
        return subprocess.Popen(cmd)

    def launch(self, start_plan: Optional[StartPlan] = None, ready_timeout: float = 30.0) -> None:
        """Spawn phase n+1 only after every phase-n process is ready."""
        start_plan = start_plan or plan(self.config)
        for phase_names in start_plan.phases:
            for name in phase_names:
                self._launch_one(name)
            self._await_phase(phase_names, ready_timeout)
        self.events.emit("facility_ready", "sysman", {"facility": self.config.facility_name})

    def _launch_one(self, name: str) -> None:
        with self._cond:
            rec = self.record(name)
            if rec.state in ("failed", "stopped"):
                rec.state = "pending"  # relaunch resets the record
            handle = self.spawn(name)
            rec.handle = handle
        log.info("spawned %s (pid %s)", name, getattr(handle, "pid", "?"))

    def _await_phase(self, names: list[str], timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                for n in names:
                    rec = self._records[n]
                    if (rec.state in ("pending", "starting") and rec.handle is not None
                            and rec.handle.poll() is not None):
                        self._fail(rec, "exited during boot")
                states = {n: self._records[n].state for n in names}
                failed = [n for n, s in states.items() if s in ("failed", "stopped")]
                if failed:
                    self.alerts.raise_alert(
                        "launch_halted", "sysman",
                        {"failed": failed, "phase": names}, "critical")
                    raise ControlError(
                        ErrorCode.APP_ERROR,
                        f"launch halted: {failed} failed before ready")
                if all(s == "ready" for s in states.values()):
                    return
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ControlError(ErrorCode.TIMEOUT,
                                       f"phase {names} not ready within {timeout}s")
                self._cond.wait(min(remaining, 0.2))

    # -- watch ------------------------------------------------------------

    def watch(self, heartbeat_period_ms: int, missed_limit: int = 3) -> None:
        """Start continuous termination monitoring (idempotent)."""
        if self._watch_thread is not None:
            return
        self._watch_thread = threading.Thread(
            target=self._watch_loop, args=(heartbeat_period_ms, missed_limit),
            daemon=True, name="sysman-watch")
        self._watch_thread.start()

    def _watch_loop(self, period_ms: int, missed_limit: int) -> None:
        # OS child exits are checked far more often than the heartbeat
        # period so a killed process is flagged well inside the bound.
        poll_s = min(period_ms / 1000.0 / 4, 0.05)
        while not self._stop.wait(poll_s):
            now = time.time()
            with self._cond:
                for rec in self._records.values():
                    if rec.state != "ready":
                        continue
                    exited = rec.handle is not None and rec.handle.poll() is not None
                    missed = now - rec.last_heartbeat > missed_limit * period_ms / 1000.0
                    if exited or missed:
                        reason = "exited" if exited else f"missed {missed_limit} heartbeats"
                        self._fail(rec, reason)

    def _fail(self, rec: ProcessRecord, reason: str) -> None:
        # caller holds the lock
        self._transition(rec, "failed")
        dropped = self.names.remove_process(rec.name)
        self.alerts.raise_alert(
            "unscheduled_termination", "sysman",
            {"process": rec.name, "reason": reason, "names_dropped": dropped}, "critical")
        log.warning("process %s failed (%s); dropped names %s", rec.name, reason, dropped)
        if self.restart:
            threading.Thread(target=self._relaunch, args=(rec.name,), daemon=True).start()

    def _relaunch(self, name: str) -> None:
        log.info("relaunching %s", name)
        try:
            self._launch_one(name)
        except Exception:
            log.error("relaunch of %s failed", name, exc_info=True)

    # -- shutdown ---------------------------------------------------------

    def stop(self) -> None:
        self._stop.set()

    def shutdown(self, conduit: Conduit, grace_s: float = 5.0) -> None:
        """Ask every live child to stop, reverse phase order, then reap."""
        for phase_names in reversed(plan(self.config).phases):
            for name in phase_names:
                with self._cond:
                    rec = self._records[name]
                    if rec.state not in ("starting", "ready"):
                        continue
                spec = self.config.process(name)
                ref = ObjectRef(spec.host, spec.port, name, "__process")
                try:
                    conduit.invoke(ref, "__shutdown", None,
                                   ConnectionPolicy(call_timeout_ms=2000), refreshable=False)
                except ControlError:
                    pass
        deadline = time.monotonic() + grace_s
        for rec in self._records.values():
            if rec.handle is None:
                continue
            while rec.handle.poll() is None and time.monotonic() < deadline:
                time.sleep(0.05)
            if rec.handle.poll() is None:
                rec.handle.terminate()
        self._stop.set()


class SysmanService:
    """Wire surface of the ``__sysman`` distributed object."""

    def __init__(self, manager: SystemManager):
        self._manager = manager

    def report(self, process: str, state: str) -> bool:
        self._manager.report(process, state)
        return True

    def query_states(self) -> dict[str, str]:
        return self._manager.states()


class _ServiceObject(Configurable):
    """Adapter hosting a plain service instance as a configurable.

    Service stores guard themselves, and the registry's wait_for parks
    callers until a matching register arrives; serializing dispatch per
    object would let one parked wait_for block every other registry call
    (including the register that would wake it).
    """

    scope = "distributed"
    serialize_dispatch = False

    def __init__(self, name: str, service, exposed: tuple[str, ...]):
        self.name = name
        self.service = service
        self.exposed = exposed
        self.params = {}

    def method_table(self):
        return {m: getattr(self.service, m) for m in self.exposed}


@dataclass
class ControlHub:
    """The assembled control process and every piece it serves."""

    config: FacilityConfig
    host: ProcessHost
    names: NameTable
    manager: SystemManager
    logs: LogStore
    events: EventStore
    alerts: AlertStore
    reservations: ReservationStore
    conduit: Conduit

    def stop(self) -> None:
        self.manager.stop()
        self.conduit.close()
        self.host.stop()


def start_hub(config: FacilityConfig, spawn: Optional[Callable] = None, restart: bool = False,
              log_file: Optional[str] = None, lease_ms: Optional[int] = None) -> ControlHub:
    """Bring up the control process serving registry, services and sysman."""
    names = NameTable()
    logs = LogStore(file_path=log_file)
    events = EventStore()
    alerts = AlertStore(events)
    reservations = ReservationStore(lease_ms=lease_ms)
    manager = SystemManager(config, names, events, alerts, spawn=spawn, restart=restart)

    # Parked wait_for calls occupy worker slots until their name appears,
    # so the hub runs a wider pool than ordinary processes.
    host = ProcessHost("control", config.control_host, config.control_port, worker_count=16)
    conduit = Conduit()

    event_service = EventService(events, alerts)
    _wire_event_push(event_service, events, alerts, conduit)

    for name, service, exposed in (
        ("__registry", RegistryService(names, config),
         ("register", "resolve", "wait_for", "manifest_for", "list_names")),
        ("__sysman", SysmanService(manager), ("report", "query_states")),
        ("__log", LogService(logs), ("append", "query")),
        ("__events", event_service,
         ("emit", "query", "raise_alert", "acknowledge", "list_alerts", "subscribe")),
        ("__reservations", ReservationService(reservations),
         ("reserve", "release", "validate", "holder_of")),
    ):
        obj = _ServiceObject(name, service, exposed)
        host.add_object(obj)
        names.register(name, host.ref_for(name))
    host.start()
    logs.append("control", "info", f"control hub serving {config.facility_name}")
    return ControlHub(config, host, names, manager, logs, events, alerts, reservations, conduit)


def _wire_event_push(service: EventService, events: EventStore, alerts: AlertStore,
                     conduit: Conduit) -> None:
    """Deliver events/alert transitions to subscribed Directors, decoupled."""
    targets: list[ObjectRef] = []
    lock = threading.Lock()
    policy = ConnectionPolicy(max_attempts=2, retry_backoff_ms=100, call_timeout_ms=2000)
    seq = {"n": 0}

    def attach(ref: ObjectRef) -> None:
        with lock:
            if all(format_ref(t) != format_ref(ref) for t in targets):
                targets.append(ref)

    def push(mapper: str, payload: dict) -> None:
        with lock:
            seq["n"] += 1
            n = seq["n"]
            current = list(targets)
        for ref in current:
            def deliver(r=ref):
                try:
                    conduit.invoke(r, "update", {
                        "publisher": "__events", "mapper": mapper,
                        "record": {"seq": n, "entries": [[k, v] for k, v in payload.items()]},
                    }, policy, refreshable=False)
                except ControlError:
                    with lock:
                        if r in targets:
                            targets.remove(r)
            threading.Thread(target=deliver, daemon=True).start()

    events.add_sink(lambda e: push("events", e.to_wire()))
    alerts.add_sink(lambda a: push("alerts", a.to_wire()))
    service._attach_push = attach
