"""Configuration framework: the facility database and the name service.

The facility is described by one JSON document. Loading validates every
structural invariant up front and reports the first violation as BAD_ARGS,
so a process never boots against a partially valid configuration.

The name table maps global object names to refs. It lives in the central
control process and is served as the distributed object ``__registry``;
clients use :class:`RegistryClient`.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .conduit import (
    Conduit,
    ConnectionPolicy,
    ObjectRef,
    format_ref,
    is_name_token,
    parse_ref,
)
from .errors import ControlError, ErrorCode, bad_args

CATEGORIES = ("fep", "supervisor", "gateway")
DEFAULT_WORKER_COUNT = 4
DEFAULT_HEARTBEAT_MS = 500


@dataclass
class ObjectSpec:
    name: str
    scope: str  # local | distributed
    type_tag: str
    params: dict = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {"name": self.name, "scope": self.scope, "type": self.type_tag, "params": self.params}

    @classmethod
    def from_wire(cls, raw: dict) -> "ObjectSpec":
        return cls(raw["name"], raw["scope"], raw["type"], raw.get("params", {}))


@dataclass
class ProcessSpec:
    name: str
    category: str
    host: str
    port: int
    worker_count: int = DEFAULT_WORKER_COUNT
    objects: list[ObjectSpec] = field(default_factory=list)

    @property
    def endpoint(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass
class FacilityConfig:
    facility_name: str
    processes: list[ProcessSpec]
    control_host: str = "127.0.0.1"
    control_port: int = 7100
    heartbeat_ms: int = DEFAULT_HEARTBEAT_MS
    source_path: Optional[str] = None

    def process(self, name: str) -> ProcessSpec:
        for spec in self.processes:
            if spec.name == name:
                return spec
        raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no process named {name!r}")

    def control_ref(self, object_name: str) -> ObjectRef:
        return ObjectRef(self.control_host, self.control_port, "control", object_name)


def load_config(path: str | Path) -> FacilityConfig:
    """Load and validate a facility configuration file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise bad_args(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise bad_args(f"config is not valid JSON: {exc}")
    return parse_config(raw, source_path=str(path))


def parse_config(raw: dict, source_path: Optional[str] = None) -> FacilityConfig:
    if not isinstance(raw, dict):
        raise bad_args("config root must be a JSON object")
    name = raw.get("facility", "facility")
    control = raw.get("control", {})
    processes_raw = raw.get("processes")
    if not isinstance(processes_raw, list):
        raise bad_args("config must contain a 'processes' list")

    processes: list[ProcessSpec] = []
    seen_names: set[str] = set()
    seen_endpoints: set[tuple[str, int]] = set()
    for praw in processes_raw:
        spec = _parse_process(praw)
        if spec.name in seen_names:
            raise bad_args(f"duplicate process name: {spec.name!r}")
        seen_names.add(spec.name)
        if spec.endpoint in seen_endpoints:
            raise bad_args(f"duplicate endpoint {spec.endpoint} (process {spec.name!r})")
        seen_endpoints.add(spec.endpoint)
        _check_bindings(spec)
        processes.append(spec)

    config = FacilityConfig(
        facility_name=name,
        processes=processes,
        control_host=control.get("host", "127.0.0.1"),
        control_port=int(control.get("port", 7100)),
        heartbeat_ms=int(raw.get("heartbeat_ms", DEFAULT_HEARTBEAT_MS)),
        source_path=source_path,
    )
    if config.heartbeat_ms <= 0:
        raise bad_args("heartbeat_ms must be > 0")
    return config


def _parse_process(raw: dict) -> ProcessSpec:
    if not isinstance(raw, dict):
        raise bad_args("process entry must be an object")
    name = raw.get("name")
    if not is_name_token(name):
        raise bad_args(f"bad process name: {name!r}")
    category = raw.get("category")
    if category not in CATEGORIES:
        raise bad_args(f"process {name!r}: category must be one of {CATEGORIES}, got {category!r}")
    host = raw.get("host", "127.0.0.1")
    try:
        port = int(raw["port"])
    except (KeyError, TypeError, ValueError):
        raise bad_args(f"process {name!r}: missing or bad port")
    if not (1 <= port <= 65535):
        raise bad_args(f"process {name!r}: port out of range")
    worker_count = int(raw.get("worker_count", DEFAULT_WORKER_COUNT))
    if worker_count < 1:
        raise bad_args(f"process {name!r}: worker_count must be >= 1")

    objects: list[ObjectSpec] = []
    seen: set[str] = set()
    for oraw in raw.get("objects", []):
        ospec = _parse_object(name, oraw)
        if ospec.name in seen:
            raise bad_args(f"process {name!r}: duplicate object name {ospec.name!r}")
        seen.add(ospec.name)
        objects.append(ospec)
    return ProcessSpec(name, category, host, port, worker_count, objects)


def _parse_object(process: str, raw: dict) -> ObjectSpec:
    if not isinstance(raw, dict):
        raise bad_args(f"process {process!r}: object entry must be an object")
    name = raw.get("name")
    if not is_name_token(name):
        raise bad_args(f"process {process!r}: bad object name {name!r}")
    scope = raw.get("scope")
    if scope not in ("local", "distributed"):
        raise bad_args(f"object {name!r}: scope must be local or distributed, got {scope!r}")
    type_tag = raw.get("type")
    if not is_name_token(type_tag):
        raise bad_args(f"object {name!r}: bad type tag {type_tag!r}")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise bad_args(f"object {name!r}: params must be an object")
    return ObjectSpec(name, scope, type_tag, params)


def _check_bindings(spec: ProcessSpec) -> None:
    # Controller bindings are the reserved "controllers" params key; each
    # entry must name a local object declared in the same process.
    local_names = {o.name for o in spec.objects if o.scope == "local"}
    for obj in spec.objects:
        bindings = obj.params.get("controllers")
        if bindings is None:
            continue
        if not isinstance(bindings, list) or not all(isinstance(b, str) for b in bindings):
            raise bad_args(f"object {obj.name!r}: 'controllers' must be a list of names")
        for bound in bindings:
            if bound not in local_names:
                raise bad_args(
                    f"object {obj.name!r} binds controller {bound!r}, "
                    f"which is not a local object of process {spec.name!r}"
                )


@dataclass
class NameEntry:
    object: str
    ref: ObjectRef
    registered_at: float


class NameTable:
    """The name service proper: one live entry per global object name.

    Re-registration replaces the prior entry. ``wait_for`` parks callers
    on a condition and wakes them on a matching register.
    """

    def __init__(self):
        self._entries: dict[str, NameEntry] = {}
        self._cond = threading.Condition()

    def register(self, object_name: str, ref: ObjectRef) -> None:
        if not is_name_token(object_name):
            raise bad_args(f"bad object name: {object_name!r}")
        with self._cond:
            self._entries[object_name] = NameEntry(object_name, ref, time.time())
            self._cond.notify_all()

    def resolve(self, object_name: str) -> ObjectRef:
        with self._cond:
            entry = self._entries.get(object_name)
        if entry is None:
            raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"name not registered: {object_name!r}")
        return entry.ref

    def wait_for(self, object_name: str, timeout_ms: int) -> ObjectRef:
        deadline = time.monotonic() + timeout_ms / 1000.0
        with self._cond:
            while object_name not in self._entries:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ControlError(
                        ErrorCode.TIMEOUT, f"{object_name!r} not registered within {timeout_ms} ms")
                self._cond.wait(remaining)
            return self._entries[object_name].ref

    def unregister(self, object_name: str) -> None:
        with self._cond:
            self._entries.pop(object_name, None)

    def remove_process(self, process: str) -> list[str]:
        """Drop every entry whose ref points into *process*; returns the names."""
        with self._cond:
            doomed = [n for n, e in self._entries.items() if e.ref.process == process]
            for n in doomed:
                del self._entries[n]
        return doomed

    def names(self) -> list[str]:
        with self._cond:
            return sorted(self._entries)

    def entries(self) -> list[NameEntry]:
        with self._cond:
            return list(self._entries.values())


class RegistryService:
    """Method table for the ``__registry`` distributed object."""

    def __init__(self, table: NameTable, config: FacilityConfig):
        self.table = table
        self.config = config

    def register(self, object: str, ref: str) -> bool:
        self.table.register(object, parse_ref(ref))
        return True

    def resolve(self, object: str) -> str:
        return format_ref(self.table.resolve(object))

    def wait_for(self, object: str, timeout_ms: int) -> str:
        return format_ref(self.table.wait_for(object, int(timeout_ms)))

    def manifest_for(self, process: str) -> list[dict]:
        return [o.to_wire() for o in self.config.process(process).objects]

    def list_names(self) -> list[str]:
        return self.table.names()


class RegistryClient:
    """Typed client for ``__registry`` over an existing conduit."""

    def __init__(self, conduit: Conduit, control_host: str, control_port: int,
                 policy: Optional[ConnectionPolicy] = None):
        self._conduit = conduit
        self._ref = ObjectRef(control_host, control_port, "control", "__registry")
        self._policy = policy or ConnectionPolicy(max_attempts=3, retry_backoff_ms=200,
                                                  call_timeout_ms=5000)

    def register(self, object_name: str, ref: ObjectRef) -> None:
        self._conduit.invoke(self._ref, "register",
                             {"object": object_name, "ref": format_ref(ref)},
                             self._policy, refreshable=False)

    def resolve(self, object_name: str) -> ObjectRef:
        return parse_ref(self._conduit.invoke(
            self._ref, "resolve", {"object": object_name}, self._policy, refreshable=False))

    def wait_for(self, object_name: str, timeout_ms: int) -> ObjectRef:
        # The server parks the call, so the wire timeout must outlast it.
        policy = ConnectionPolicy(
            max_attempts=self._policy.max_attempts,
            retry_backoff_ms=self._policy.retry_backoff_ms,
            call_timeout_ms=timeout_ms + 2000,
        )
        return parse_ref(self._conduit.invoke(
            self._ref, "wait_for", {"object": object_name, "timeout_ms": timeout_ms},
            policy, refreshable=False))

    def manifest_for(self, process: str) -> list[ObjectSpec]:
        raw = self._conduit.invoke(self._ref, "manifest_for", {"process": process},
                                   self._policy, refreshable=False)
        return [ObjectSpec.from_wire(o) for o in raw]

    def list_names(self) -> list[str]:
        return self._conduit.invoke(self._ref, "list_names", {}, self._policy, refreshable=False)

    def resolver(self, name: str, wait_ms: Optional[int]) -> ObjectRef:
        """Adapter matching the conduit Resolver signature."""
        if wait_ms:
            return self.wait_for(name, wait_ms)
        return self.resolve(name)
