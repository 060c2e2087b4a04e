"""Shared test fixtures: free ports, in-process facilities, capture sinks."""

from __future__ import annotations

import json
import os
import socket
import threading
import time
from pathlib import Path

from beambench.conduit import Conduit, ConnectionPolicy, ObjectRef
from beambench.kernel import Configurable, ProcessHost, boot
from beambench.registry import RegistryClient, load_config
from beambench.sysman import ControlHub, start_hub
from beambench.facility import select_template

REPO_ROOT = Path(__file__).resolve().parents[1]
DEMO_CONFIG = REPO_ROOT / "config" / "demo_facility.json"

# Ports handed to configs live below Linux's ephemeral range (32768+), so an
# outgoing connection can never steal a reserved port as its source port
# between probe time and bind time.
_next_port = [21000 + (os.getpid() % 50) * 200]


def free_port() -> int:
    while True:
        port = _next_port[0]
        _next_port[0] += 1
        if _next_port[0] >= 32000:
            _next_port[0] = 21000
        with socket.socket() as s:
            try:
                s.bind(("127.0.0.1", port))
            except OSError:
                continue
            return port


def demo_config_dict(**overrides) -> dict:
    """The demo facility shape, re-ported so parallel tests never collide."""
    raw = json.loads(DEMO_CONFIG.read_text())
    raw["control"]["port"] = free_port()
    for proc in raw["processes"]:
        proc["port"] = free_port()
    for proc in raw["processes"]:
        for obj in proc.get("objects", []):
            if obj["type"] == "gateway":
                obj["params"]["http_port"] = free_port()
    deep_update(raw, overrides)
    return raw


def deep_update(base: dict, overrides: dict) -> dict:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_update(base[key], value)
        else:
            base[key] = value
    return base


def write_config(tmp_path: Path, raw: dict, name: str = "facility.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(raw, indent=2))
    return path


class FakeHandle:
    """Duck-typed subprocess handle for thread-hosted 'processes'."""

    def __init__(self, name: str):
        self.name = name
        self.pid = -1
        self._exit: int | None = None

    def poll(self):
        return self._exit

    def mark_exited(self, code: int = 1) -> None:
        self._exit = code

    def terminate(self) -> None:
        self._exit = 0


class InProcFacility:
    """A whole facility in one OS process: hub plus thread-hosted members.

    Spawning is wired into the system manager, so launch/watch behave as in
    production, but each member rides a thread around the same boot path
    the CLI uses.
    """

    def __init__(self, tmp_path: Path, raw_config: dict | None = None):
        raw = raw_config or demo_config_dict()
        self.config_path = write_config(tmp_path, raw)
        self.config = load_config(self.config_path)
        self.hosts: dict[str, ProcessHost] = {}
        self.handles: dict[str, FakeHandle] = {}
        self.boot_errors: dict[str, Exception] = {}
        self.hub: ControlHub = start_hub(self.config, spawn=self._spawn)
        self.conduit = Conduit()
        registry = RegistryClient(self.conduit, self.config.control_host,
                                  self.config.control_port)
        self.conduit.resolver = registry.resolver
        self.registry = registry

    def _spawn(self, name: str) -> FakeHandle:
        handle = FakeHandle(name)
        self.handles[name] = handle

        def run() -> None:
            try:
                template = select_template(self.config, name)
                host = boot(template, self.config.control_host, self.config.control_port,
                            heartbeat_ms=self.config.heartbeat_ms)
                self.hosts[name] = host
            except Exception as exc:  # boot failures are part of what tests watch
                self.boot_errors[name] = exc
                handle.mark_exited(1)

        threading.Thread(target=run, daemon=True, name=f"proc-{name}").start()
        return handle

    def launch(self, timeout: float = 30.0) -> None:
        self.hub.manager.launch(ready_timeout=timeout)
        # ready is reported from inside boot(); wait for the spawn threads
        # to finish publishing their host handles
        deadline = time.monotonic() + 5
        expected = {name for name, state in self.hub.manager.states().items()
                    if state == "ready"}
        while not expected <= set(self.hosts) and time.monotonic() < deadline:
            time.sleep(0.01)

    def kill(self, name: str) -> None:
        """Simulate abrupt termination of one member."""
        host = self.hosts.get(name)
        if host is not None:
            if host.manager is not None:
                host.manager.stop_heartbeat()
            host.stop()
        if name in self.handles:
            self.handles[name].mark_exited(1)

    def invoke(self, target, method, args=None, **policy_kwargs):
        policy = ConnectionPolicy(**policy_kwargs) if policy_kwargs else ConnectionPolicy(
            call_timeout_ms=5000)
        return self.conduit.invoke(target, method, args or {}, policy)

    def stop(self) -> None:
        for host in self.hosts.values():
            if host.ctx is not None:
                hub = host.ctx.extras.get("monitor_hub")
                if hub is not None:
                    hub.end_all()
                clock = host.ctx.extras.get("sim_clock")
                if clock is not None:
                    clock.stop()
        for host in self.hosts.values():
            if host.manager is not None:
                host.manager.stop_heartbeat()
            host.stop()
        self.conduit.close()
        self.hub.stop()


class CaptureDirector(Configurable):
    """Records every update it receives, in arrival order."""

    scope = "distributed"
    exposed = ("update",)
    serialize_dispatch = False

    def __init__(self, name: str = "capture", ctx=None, params=None):
        super().__init__(name, ctx, params or {})
        self.received: list[tuple[str, str, dict]] = []
        self.cond = threading.Condition()

    def update(self, publisher: str, mapper: str, record: dict) -> bool:
        with self.cond:
            self.received.append((publisher, mapper, record))
            self.cond.notify_all()
        return True

    def wait_count(self, n: int, timeout: float = 5.0,
                   where=lambda item: True) -> list:
        deadline = time.monotonic() + timeout
        with self.cond:
            while True:
                got = [r for r in self.received if where(r)]
                if len(got) >= n:
                    return got
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return got
                self.cond.wait(remaining)


def capture_host(name: str = "capture_proc") -> tuple[ProcessHost, CaptureDirector, ObjectRef]:
    """A tiny process hosting one capture director; returns its ref."""
    host = ProcessHost(name, "127.0.0.1", 0, worker_count=4)
    director = CaptureDirector()
    host.add_object(director)
    host.start()
    return host, director, host.ref_for("capture")
