"""The generic main program: boot, factories, and the dispatch worker pool.

Every process in the facility (FEP, supervisor or gateway) runs the same
boot path. The only per-process customization is the pair of factories in
its template: one building local configurables (controllers), one building
distributed configurables (devices, LCUs). Swapping factory registrations
alone changes which objects a process hosts.

Incoming calls flow through a bounded pool: ``worker_count`` slots execute
handlers, everything else queues FIFO. Calls to one object are serialized;
calls to distinct objects run in parallel up to the pool bound. ``__ping``
is answered by the dispatcher itself for any object name, so liveness
probes work even when every worker slot is busy.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .conduit import (
    Conduit,
    ConnectionPolicy,
    ObjectRef,
    decode_envelope,
    encode_envelope,
    read_frame,
    write_frame,
)
from .errors import ControlError, ErrorCode, bad_args
from .registry import ObjectSpec, ProcessSpec, RegistryClient
from .services import EventsClient, LogClient, ReservationsClient

log = logging.getLogger(__name__)

RESERVED_METHODS = ("__ping", "__inject", "__shutdown")


class Configurable:
    """Base of every object a factory can build.

    Subclasses list remotely callable methods in ``exposed`` and
    monitorable fields in ``monitored``; ``read_field`` is the only way a
    status poller samples an object.
    """

    scope = "local"
    exposed: tuple[str, ...] = ()
    monitored: tuple[str, ...] = ()
    #: Dispatch calls to this object one at a time (the default). Objects
    #: that manage their own locking (Directors, which must accept updates
    #: from many publishers while a long call runs) turn this off.
    serialize_dispatch = True

    def __init__(self, name: str, ctx: "ProcessContext", params: dict):
        self.name = name
        self.ctx = ctx
        self.params = params

    def method_table(self) -> dict[str, Callable]:
        return {m: getattr(self, m) for m in self.exposed}

    def read_field(self, field_name: str) -> Any:
        if field_name not in self.monitored:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                               f"{self.name!r} has no monitorable field {field_name!r}")
        return getattr(self, field_name)

    def started(self) -> None:
        """Hook run once the process dispatcher is up."""

    def shutdown(self) -> None:
        """Hook run when the hosting process stops."""


class Factory:
    """Maps type tags to constructors for one scope."""

    def __init__(self, scope: str, name: str = ""):
        if scope not in ("local", "distributed"):
            raise bad_args(f"bad factory scope {scope!r}")
        self.scope = scope
        self.name = name or f"{scope}-factory"
        self._constructors: dict[str, Callable[..., Configurable]] = {}

    def register_type(self, type_tag: str, constructor: Callable[..., Configurable]) -> None:
        if type_tag in self._constructors:
            raise bad_args(f"type tag {type_tag!r} already registered in {self.name}")
        self._constructors[type_tag] = constructor

    def knows(self, type_tag: str) -> bool:
        return type_tag in self._constructors

    @property
    def type_tags(self) -> frozenset[str]:
        return frozenset(self._constructors)

    def construct(self, spec: ObjectSpec, ctx: "ProcessContext") -> Configurable:
        ctor = self._constructors.get(spec.type_tag)
        if ctor is None:
            raise bad_args(f"no constructor for type tag {spec.type_tag!r} in {self.name}")
        obj = ctor(spec.name, ctx, spec.params)
        if obj.scope != self.scope:
            raise bad_args(f"{spec.type_tag!r} built a {obj.scope} object from the {self.scope} factory")
        return obj


@dataclass
class ProcessTemplate:
    spec: ProcessSpec
    controller_factory: Factory
    device_factory: Factory
    variant: str = ""

    def __post_init__(self):
        if self.controller_factory.scope != "local":
            raise bad_args("controller factory must have local scope")
        if self.device_factory.scope != "distributed":
            raise bad_args("device factory must have distributed scope")


@dataclass
class ProcessContext:
    """Everything a configurable may touch at construction time."""

    process_name: str
    host: "ProcessHost"
    conduit: Conduit
    registry: Optional[RegistryClient] = None
    log: Optional[LogClient] = None
    events: Optional[EventsClient] = None
    reservations: Optional[ReservationsClient] = None
    extras: dict = field(default_factory=dict)

    def local_object(self, name: str) -> Configurable:
        obj = self.host.get_object(name)
        if obj is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT,
                               f"no object {name!r} in process {self.process_name!r}")
        return obj

    def self_ref(self, object_name: str) -> ObjectRef:
        host, port = self.host.advertised_endpoint
        return ObjectRef(host, port, self.process_name, object_name)

    def info(self, text: str) -> None:
        if self.log is not None:
            self.log.log("info", text)
        log.info("%s: %s", self.process_name, text)

    def warning(self, text: str) -> None:
        if self.log is not None:
            self.log.log("warning", text)
        log.warning("%s: %s", self.process_name, text)


class _Work:
    __slots__ = ("object_name", "fn", "arrival")

    def __init__(self, object_name: Optional[str], fn: Callable[[], None], arrival: int):
        self.object_name = object_name  # None when the call is not serialized
        self.fn = fn
        self.arrival = arrival


_STOP = object()


class DispatchQueue:
    """Bounded FIFO scheduler with per-object serialization.

    Arrivals for an idle object go straight onto the ready queue; arrivals
    for a busy object wait in that object's own FIFO and re-enter the
    ready queue when the running call finishes. Workers take ready items
    strictly in queue order (the dequeue is serialized so observed start
    order equals arrival order for non-contending objects).
    """

    def __init__(self, worker_count: int):
        if worker_count < 1:
            raise bad_args("worker_count must be >= 1")
        self.worker_count = worker_count
        self._ready: queue.SimpleQueue = queue.SimpleQueue()
        self._lock = threading.Lock()
        self._dequeue_lock = threading.Lock()
        self._busy: set[str] = set()
        self._waiting: dict[str, deque[_Work]] = {}
        self._arrivals = 0
        self._workers: list[threading.Thread] = []
        self._started = False
        # instrumentation for the pool-bound and FIFO properties
        self.active = 0
        self.max_active = 0
        self.start_order: deque[int] = deque(maxlen=10000)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for i in range(self.worker_count):
            t = threading.Thread(target=self._worker_loop, daemon=True, name=f"worker-{i}")
            t.start()
            self._workers.append(t)

    def stop(self) -> None:
        for _ in self._workers:
            self._ready.put(_STOP)

    def submit(self, object_name: str, fn: Callable[[], None], serialize: bool = True) -> None:
        with self._lock:
            self._arrivals += 1
            work = _Work(object_name if serialize else None, fn, self._arrivals)
            if serialize:
                if object_name in self._busy:
                    self._waiting.setdefault(object_name, deque()).append(work)
                    return
                self._busy.add(object_name)
        self._ready.put(work)

    def _worker_loop(self) -> None:
        while True:
            with self._dequeue_lock:
                work = self._ready.get()
                if work is _STOP:
                    return
                with self._lock:
                    self.active += 1
                    self.max_active = max(self.max_active, self.active)
                    self.start_order.append(work.arrival)
            try:
                work.fn()
            except Exception:  # handler wrappers reply their own errors
                log.error("unhandled dispatch error:\n%s", traceback.format_exc())
            finally:
                self._finish(work.object_name)

    def _finish(self, object_name: Optional[str]) -> None:
        with self._lock:
            self.active -= 1
            if object_name is None:
                return
            waiting = self._waiting.get(object_name)
            if waiting:
                nxt = waiting.popleft()
                if not waiting:
                    del self._waiting[object_name]
                self._ready.put(nxt)
            else:
                self._busy.discard(object_name)


@dataclass
class FaultFlags:
    """Per-process fault-injection switches, toggled via ``__inject``."""

    reply_delay_ms: int = 0
    drop_connections: bool = False


class ProcessHost:
    """A running process: listener, dispatcher, and its object population."""

    def __init__(self, process_name: str, host: str = "127.0.0.1", port: int = 0,
                 worker_count: int = 4, advertised_host: Optional[str] = None):
        self.process_name = process_name
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self._bound = self._listener.getsockname()
        self._advertised_host = advertised_host or self._bound[0]
        self.queue = DispatchQueue(worker_count)
        self.faults = FaultFlags()
        self.objects: dict[str, Configurable] = {}
        self._objects_lock = threading.Lock()
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._running = False
        self._accept_thread: Optional[threading.Thread] = None
        self.on_shutdown_request: Optional[Callable[[], None]] = None
        self._stopped = threading.Event()
        self.manager: Optional["LocalManager"] = None
        self.ctx: Optional["ProcessContext"] = None

    # -- wiring ----------------------------------------------------------

    @property
    def advertised_endpoint(self) -> tuple[str, int]:
        return (self._advertised_host, self._bound[1])

    def ref_for(self, object_name: str) -> ObjectRef:
        host, port = self.advertised_endpoint
        return ObjectRef(host, port, self.process_name, object_name)

    def add_object(self, obj: Configurable) -> None:
        with self._objects_lock:
            if obj.name in self.objects:
                raise bad_args(f"object {obj.name!r} already hosted")
            self.objects[obj.name] = obj

    def get_object(self, name: str) -> Optional[Configurable]:
        with self._objects_lock:
            return self.objects.get(name)

    def start(self) -> None:
        if self._running:
            return
        self._running = True
        self.queue.start()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, daemon=True, name=f"accept-{self.process_name}")
        self._accept_thread.start()
        for obj in list(self.objects.values()):
            obj.started()

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            _quiet_close(conn)
        self.queue.stop()
        for obj in list(self.objects.values()):
            try:
                obj.shutdown()
            except Exception:
                log.warning("shutdown hook failed for %s", obj.name, exc_info=True)

    # -- transport -------------------------------------------------------

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._conns_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_connection, args=(conn,), daemon=True,
                             name=f"serve-{self.process_name}").start()

    def _serve_connection(self, conn: socket.socket) -> None:
        send_lock = threading.Lock()

        def reply(env: dict) -> None:
            delay = self.faults.reply_delay_ms
            if delay and env.get("_inject") is not True:
                time.sleep(delay / 1000.0)
            env.pop("_inject", None)
            try:
                with send_lock:
                    write_frame(conn, encode_envelope(env))
            except OSError:
                pass

        try:
            while self._running:
                payload = read_frame(conn)
                if payload is None:
                    break
                try:
                    env = decode_envelope(payload)
                except Exception:
                    log.warning("%s: dropping undecodable frame", self.process_name)
                    continue
                if self.faults.drop_connections and env.get("method") != "__inject":
                    break  # dropped: behave like a broken connection (still clearable)
                self._route(env, reply)
        except (ConnectionError, OSError):
            pass
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            _quiet_close(conn)

    # -- dispatch --------------------------------------------------------

    def _route(self, env: dict, reply: Callable[[dict], None]) -> None:
        if env.get("kind") != "call":
            return
        call_id = env.get("id")
        method = env.get("method")
        if method == "__inject":
            result, post_effects = self._handle_inject(env.get("args") or {})
            reply({"id": call_id, "kind": "reply", "status": "ok", "value": result, "_inject": True})
            post_effects()  # drop/crash only after the ack is on the wire
            return
        if method == "__ping":
            # Answered by the dispatcher for any object name; never queued.
            threading.Thread(
                target=reply, daemon=True,
                args=({"id": call_id, "kind": "reply", "status": "ok", "value": None},),
            ).start()
            return
        if method == "__shutdown":
            reply({"id": call_id, "kind": "reply", "status": "ok", "value": None})
            threading.Thread(target=self._shutdown_requested, daemon=True).start()
            return
        object_name = env.get("object")
        if not isinstance(object_name, str):
            reply(_error_reply(call_id, bad_args("call missing object name")))
            return
        obj = self.get_object(object_name)
        serialize = obj.serialize_dispatch if obj is not None else True
        self.queue.submit(object_name, lambda: reply(self.execute(env)), serialize)

    def _shutdown_requested(self) -> None:
        if self.on_shutdown_request is not None:
            self.on_shutdown_request()
        else:
            self.stop()

    def _handle_inject(self, args: dict) -> tuple[dict, Callable[[], None]]:
        if args.get("clear"):
            self.faults = FaultFlags()
        if "reply_delay_ms" in args:
            self.faults.reply_delay_ms = int(args["reply_delay_ms"])
        drop_now = False
        if "drop_connections" in args:
            self.faults.drop_connections = bool(args["drop_connections"])
            drop_now = self.faults.drop_connections
        crash = bool(args.get("crash"))
        result = {"reply_delay_ms": self.faults.reply_delay_ms,
                  "drop_connections": self.faults.drop_connections}

        def post_effects() -> None:
            if drop_now:
                with self._conns_lock:
                    conns = list(self._conns)
                for conn in conns:
                    _quiet_close(conn)
            if crash:
                log.error("%s: crash injected", self.process_name)
                os._exit(1)

        return result, post_effects

    def execute(self, env: dict) -> dict:
        """Run one call envelope against the object table; returns the reply."""
        call_id = env.get("id")
        try:
            value = self._call_handler(env)
            return {"id": call_id, "kind": "reply", "status": "ok", "value": value}
        except ControlError as exc:
            return _error_reply(call_id, exc)
        except Exception as exc:
            log.error("%s: handler error in %s.%s:\n%s", self.process_name,
                      env.get("object"), env.get("method"), traceback.format_exc())
            return _error_reply(call_id, ControlError(ErrorCode.APP_ERROR, str(exc)))

    def _call_handler(self, env: dict) -> Any:
        obj = self.get_object(env.get("object"))
        if obj is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no object {env.get('object')!r}")
        method = env.get("method")
        table = obj.method_table()
        handler = table.get(method)
        if handler is None:
            raise ControlError(ErrorCode.NO_SUCH_METHOD, f"{obj.name!r} has no method {method!r}")
        args = env.get("args")
        if args is None:
            args = {}
        if not isinstance(args, dict):
            raise bad_args("args must be a JSON object of named arguments")
        try:
            return handler(**args)
        except TypeError as exc:
            # Argument-binding failure; handler bodies raising TypeError
            # for other reasons are indistinguishable and also client bugs.
            raise bad_args(str(exc))

    def dispatch(self, env: dict, timeout: float = 30.0) -> dict:
        """Submit one envelope through the pool and wait for its reply."""
        done = threading.Event()
        slot: dict = {}

        def reply(r: dict) -> None:
            slot.update(r)
            done.set()

        self._route(env, reply)
        if not done.wait(timeout):
            raise ControlError(ErrorCode.TIMEOUT, "dispatch did not complete")
        return slot


def _error_reply(call_id: Any, exc: ControlError) -> dict:
    return {"id": call_id, "kind": "reply", "status": "error", "error": exc.to_wire()}


def _quiet_close(conn: socket.socket) -> None:
    try:
        conn.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        conn.close()
    except OSError:
        pass


class LocalManager:
    """Proxy for the central system manager: state reports and heartbeats."""

    def __init__(self, conduit: Conduit, control_host: str, control_port: int, process: str):
        self._conduit = conduit
        self._ref = ObjectRef(control_host, control_port, "control", "__sysman")
        self._policy = ConnectionPolicy(wait_for_presence=True, max_attempts=8,
                                        retry_backoff_ms=250, call_timeout_ms=5000)
        self.process = process
        self._beat_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    def report(self, state: str) -> None:
        self._conduit.invoke(self._ref, "report",
                             {"process": self.process, "state": state},
                             self._policy, refreshable=False)

    def report_quietly(self, state: str) -> None:
        try:
            self.report(state)
        except ControlError:
            pass

    def start_heartbeat(self, period_ms: int) -> None:
        if self._beat_thread is not None:
            return

        def beat() -> None:
            while not self._stop.wait(period_ms / 1000.0):
                self.report_quietly("ready")

        self._beat_thread = threading.Thread(target=beat, daemon=True,
                                             name=f"heartbeat-{self.process}")
        self._beat_thread.start()

    def stop_heartbeat(self) -> None:
        self._stop.set()


BOOT_POLICY = ConnectionPolicy(wait_for_presence=True, max_attempts=40,
                               retry_backoff_ms=250, call_timeout_ms=5000)


def recovery_logger(log_client: LogClient) -> Callable:
    """Forward recovery cycles (attempt > 1) to the central message log.

    First attempts and the call stage itself are routine and stay out of
    the log; a thread-local guard keeps the log client's own connection
    attempts from recursing.
    """
    local = threading.local()

    def note(record) -> None:
        if record.stage == "call" or record.attempt <= 1:
            return
        if getattr(local, "busy", False):
            return
        local.busy = True
        try:
            log_client.log("debug",
                           f"recovery attempt {record.attempt} ({record.stage}) "
                           f"target={record.target} {record.detail}".strip())
        finally:
            local.busy = False

    return note


def boot(template: ProcessTemplate, control_host: str, control_port: int,
         heartbeat_ms: int = 500, defer_ready: bool = False,
         on_attempt: Optional[Callable] = None) -> ProcessHost:
    """Bring a process from template to serving, in the canonical order.

    1. connect framework clients (log, events/alerts, reservations)
    2. report ``starting`` through the local manager proxy
    3. fetch the object manifest from the configuration server
    4. construct local configurables, then distributed ones
    5. register distributed names
    6. start the dispatcher (worker pool + listener)
    7. report ``ready`` and begin heartbeating

    The boot path is generic: nothing in here branches on the process
    identity beyond what its template and manifest say.
    """
    spec = template.spec
    host = ProcessHost(spec.name, spec.host, spec.port, spec.worker_count)
    conduit = Conduit(on_attempt=on_attempt)

    # (1) framework clients
    registry = RegistryClient(conduit, control_host, control_port, policy=BOOT_POLICY)
    conduit.resolver = registry.resolver
    log_client = LogClient(conduit, control_host, control_port, spec.name)
    events = EventsClient(conduit, control_host, control_port, spec.name)
    reservations = ReservationsClient(conduit, control_host, control_port)
    manager = LocalManager(conduit, control_host, control_port, spec.name)
    if on_attempt is None:
        conduit.on_attempt = recovery_logger(log_client)

    # (2) announce
    manager.report("starting")
    log_client.log("info", "process starting")

    ctx = ProcessContext(spec.name, host, conduit, registry, log_client, events, reservations)
    host.on_shutdown_request = lambda: _graceful_stop(host, manager, log_client)

    try:
        # (3) manifest
        manifest = registry.manifest_for(spec.name)

        # (4) construction: controllers first so devices can bind them
        for ospec in manifest:
            if ospec.scope == "local":
                host.add_object(template.controller_factory.construct(ospec, ctx))
        distributed: list[Configurable] = []
        for ospec in manifest:
            if ospec.scope == "distributed":
                obj = template.device_factory.construct(ospec, ctx)
                host.add_object(obj)
                distributed.append(obj)

        # (5) export
        for obj in distributed:
            registry.register(obj.name, host.ref_for(obj.name))

        # (6) serve
        host.start()
    except Exception as exc:
        log_client.log("error", f"boot failed: {exc}")
        manager.report_quietly("failed")
        host.stop()
        raise

    # (7) ready
    if not defer_ready:
        manager.report("ready")
        manager.start_heartbeat(heartbeat_ms)
    host.manager = manager
    host.ctx = ctx
    log_client.log("info", "process ready")
    return host


def _graceful_stop(host: ProcessHost, manager: LocalManager, log_client: LogClient) -> None:
    log_client.log("info", "shutdown requested")
    manager.stop_heartbeat()
    manager.report_quietly("stopped")
    host.stop()
