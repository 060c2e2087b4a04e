"""Gateway: bridges browser sessions onto the facility wire protocol.

The gateway process is the one registered Director for all consoles;
browser sessions are fan-out leaves that never appear in the name
service. One upstream subscription per (publisher, mapper) or (device,
field) is shared by every interested session: mapper records are cached
so late subscribers still get a snapshot, and monitor reports are
re-filtered per session with its own precision using the same pure
deadband step the FEP pollers use.

It also owns everything a console must not hard-code: panel descriptors
(what to show and which commands a type tag offers) and the central style
tokens.

WebSocket messages are JSON objects tagged ``kind``:
client->gateway  subscribe | unsubscribe | invoke
gateway->client  result | error | update | alert | event
"""

from __future__ import annotations

import asyncio
import logging
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref
from .errors import ControlError, ErrorCode
from .kernel import ProcessContext, ProcessHost
from .registry import FacilityConfig
from .statusmon import MonitorSpec, MonitorState, poll_step
from .supervisory import Director, Record

log = logging.getLogger(__name__)

INVOKE_POLICY = ConnectionPolicy(ping_before_invoke=True, refresh_on_failure=True,
                                 max_attempts=3, retry_backoff_ms=100, call_timeout_ms=5000)
OUTBOX_BOUND = 1024

STYLE_TOKENS = {
    "colors": {
        "background": "#10141a",
        "surface": "#1a212b",
        "panel": "#222b37",
        "border": "#31404f",
        "text": "#e6edf3",
        "muted": "#8b98a5",
        "accent": "#4cc2ff",
        "ok": "#3fb950",
        "active": "#d29922",
    },
    "severity_colors": {
        "debug": "#8b98a5",
        "info": "#4cc2ff",
        "warning": "#d29922",
        "error": "#f85149",
        "critical": "#ff6a69",
    },
    "state_colors": {
        "pending": "#8b98a5",
        "starting": "#d29922",
        "ready": "#3fb950",
        "failed": "#f85149",
        "stopped": "#8b98a5",
    },
    "fonts": {
        "ui": "system-ui, 'Segoe UI', sans-serif",
        "mono": "'JetBrains Mono', 'Fira Mono', monospace",
    },
    "spacing": [2, 4, 8, 12, 16, 24, 32],
}

PANEL_DESCRIPTORS: dict[str, dict] = {
    "actuator": {
        "type_tag": "actuator",
        "panel_kind": "actuator",
        "fields": [
            {"name": "position_0", "kind": "readout", "mode": "monitor", "optional": False},
            {"name": "position_1", "kind": "readout", "mode": "monitor", "optional": True},
            {"name": "position_2", "kind": "readout", "mode": "monitor", "optional": True},
            {"name": "position_3", "kind": "readout", "mode": "monitor", "optional": True},
            {"name": "moving", "kind": "flag", "mode": "monitor", "optional": False},
        ],
        "commands": [
            {"method": "move_to", "args": {"targets": "number[]"}, "requires_reservation": True},
        ],
    },
    "shutter": {
        "type_tag": "shutter",
        "panel_kind": "shutter",
        "fields": [
            {"name": "state", "kind": "badge", "mode": "monitor", "optional": False},
        ],
        "commands": [
            {"method": "open", "args": {}, "requires_reservation": True},
            {"method": "close", "args": {}, "requires_reservation": True},
        ],
    },
    "sensor": {
        "type_tag": "sensor",
        "panel_kind": "sensor",
        "fields": [
            {"name": "value", "kind": "chart", "mode": "monitor", "optional": False},
        ],
        "commands": [],
    },
    "alignment_lcu": {
        "type_tag": "alignment_lcu",
        "panel_kind": "alignment",
        "fields": [
            {"name": "summary", "kind": "record", "mode": "mapper", "optional": False},
            {"name": "positions", "kind": "record", "mode": "mapper", "optional": False},
        ],
        "commands": [
            {"method": "align", "args": {"threshold": "number", "max_iters": "number"},
             "requires_reservation": False},
            {"method": "reset", "args": {}, "requires_reservation": False},
        ],
    },
    "gateway": {
        "type_tag": "gateway",
        "panel_kind": "gateway",
        "fields": [],
        "commands": [],
    },
}


class GatewayDirector(Director):
    """The gateway's registered Director; forwards every update to the core."""

    def __init__(self, name: str, ctx: Optional[ProcessContext], params: dict):
        super().__init__(name, ctx, params)
        self.sink = None  # set by GatewayCore

    def handle_update(self, publisher: str, mapper: str, record: Record) -> None:
        sink = self.sink
        if sink is not None:
            sink(publisher, mapper, record)


@dataclass
class _MapperUpstream:
    target: str
    mapper: str
    upstream_id: str = ""
    cache: Optional[dict] = None
    listeners: dict = field(default_factory=dict)  # sub_id -> session_id


@dataclass
class _MonitorListener:
    session_id: str
    state: MonitorState
    seq: int = 0


@dataclass
class _MonitorUpstream:
    device: str
    field_name: str
    monitor_id: str = ""
    latency_ms: int = 100
    listeners: dict = field(default_factory=dict)  # sub_id -> _MonitorListener


class _Session:
    def __init__(self, ws: WebSocket, operator: str):
        self.id = uuid.uuid4().hex
        self.ws = ws
        self.operator = operator
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=OUTBOX_BOUND)
        self.subscriptions: dict[str, tuple[str, tuple]] = {}
        self.tokens: dict[str, str] = {}
        self.closed = False


class GatewayCore:
    """Session and subscription state; all mutation happens on the event loop."""

    def __init__(self, config: FacilityConfig, ctx: ProcessContext, director: GatewayDirector):
        self.config = config
        self.ctx = ctx
        self.director = director
        self.loop: Optional[asyncio.AbstractEventLoop] = None
        self.sessions: dict[str, _Session] = {}
        self.mapper_upstreams: dict[tuple[str, str], _MapperUpstream] = {}
        self.monitor_upstreams: dict[tuple[str, str], _MonitorUpstream] = {}
        self._op_lock = asyncio.Lock()
        self._object_index = {
            o.name: {"process": p.name, "type_tag": o.type_tag}
            for p in config.processes for o in p.objects if o.scope == "distributed"
        }
        director.sink = self._on_update_from_wire

    # -- lifecycle ---------------------------------------------------------

    async def startup(self) -> None:
        self.loop = asyncio.get_running_loop()
        await asyncio.to_thread(self._subscribe_events)

    def _subscribe_events(self) -> None:
        if self.ctx.events is not None:
            try:
                self.ctx.events.subscribe(self.ctx.self_ref(self.director.name))
            except ControlError as exc:
                log.warning("gateway could not subscribe to events: %s", exc)

    # -- session handling ----------------------------------------------------

    async def run_session(self, ws: WebSocket, operator: str) -> None:
        await ws.accept()
        session = _Session(ws, operator)
        self.sessions[session.id] = session
        sender = asyncio.create_task(self._send_loop(session))
        try:
            while True:
                message = await ws.receive_json()
                await self._handle(session, message)
        except WebSocketDisconnect:
            pass
        except Exception as exc:  # malformed frame or socket error
            log.debug("session %s ended: %s", session.id, exc)
        finally:
            sender.cancel()
            await self._close_session(session)

    async def _send_loop(self, session: _Session) -> None:
        while True:
            message = await session.queue.get()
            await session.ws.send_json(message)

    async def _close_session(self, session: _Session) -> None:
        if session.closed:
            return
        session.closed = True
        self.sessions.pop(session.id, None)
        async with self._op_lock:
            for sub_id in list(session.subscriptions):
                await self._drop_subscription(session, sub_id)

    def _push(self, session: _Session, message: dict) -> None:
        # runs on the event loop
        if session.closed:
            return
        try:
            session.queue.put_nowait(message)
        except asyncio.QueueFull:
            log.warning("session %s outbox overflow; disconnecting", session.id)
            session.closed = True
            self.sessions.pop(session.id, None)
            asyncio.ensure_future(self._kick(session))

    async def _kick(self, session: _Session) -> None:
        try:
            await session.ws.close(code=1013)
        except Exception:
            pass
        async with self._op_lock:
            for sub_id in list(session.subscriptions):
                await self._drop_subscription(session, sub_id)

    # -- client messages -------------------------------------------------------

    async def _handle(self, session: _Session, message: dict) -> None:
        kind = message.get("kind")
        seq = message.get("seq")
        try:
            if kind == "subscribe":
                value = await self._subscribe(session, message)
            elif kind == "unsubscribe":
                value = await self._unsubscribe(session, message)
            elif kind == "invoke":
                value = await self._invoke(session, message)
            else:
                raise ControlError(ErrorCode.BAD_ARGS, f"unknown message kind {kind!r}")
            self._push(session, {"kind": "result", "seq": seq, "value": value})
        except ControlError as exc:
            self._push(session, {"kind": "error", "seq": seq,
                                 "code": exc.code.value, "message": exc.message})

    async def _subscribe(self, session: _Session, message: dict) -> dict:
        target = message.get("target")
        mode = message.get("mode")
        name = message.get("name")
        params = message.get("params") or {}
        if not isinstance(target, str) or not isinstance(name, str):
            raise ControlError(ErrorCode.BAD_ARGS, "subscribe needs target and name")
        sub_id = uuid.uuid4().hex
        async with self._op_lock:
            if mode == "mapper":
                await self._subscribe_mapper(session, sub_id, target, name)
            elif mode == "monitor":
                await self._subscribe_monitor(session, sub_id, target, name, params)
            else:
                raise ControlError(ErrorCode.BAD_ARGS, f"unknown subscribe mode {mode!r}")
        return {"subscription_id": sub_id}

    async def _subscribe_mapper(self, session: _Session, sub_id: str,
                                target: str, mapper: str) -> None:
        key = (target, mapper)
        upstream = self.mapper_upstreams.get(key)
        if upstream is None:
            # register the route BEFORE attaching: the upstream snapshot can
            # arrive before the attach reply does
            upstream = _MapperUpstream(target, mapper)
            self.mapper_upstreams[key] = upstream
            my_ref = format_ref(self.ctx.self_ref(self.director.name))
            self.director.reset_dedupe(target, mapper)
            try:
                upstream.upstream_id = await asyncio.to_thread(
                    self.ctx.conduit.invoke, target, "attach_mapper",
                    {"mapper": mapper, "subscriber": my_ref}, INVOKE_POLICY)
            except ControlError:
                if self.mapper_upstreams.get(key) is upstream:
                    del self.mapper_upstreams[key]
                raise
            if self.mapper_upstreams.get(key) is not upstream:
                # every listener left while the attach was in flight
                await self._remote_detach(upstream)
                raise ControlError(ErrorCode.NO_SUCH_OBJECT, "subscription cancelled")
        upstream.listeners[sub_id] = session.id
        session.subscriptions[sub_id] = ("mapper", key)
        if upstream.cache is not None:
            # late subscriber: synthesize the snapshot push, scheduled after
            # the subscribe result so the client knows the id it is for
            self.loop.call_soon(self._push, session, {
                "kind": "update", "subscription_id": sub_id,
                "publisher": target, "mapper": mapper, "record": upstream.cache})

    async def _subscribe_monitor(self, session: _Session, sub_id: str,
                                 target: str, field_name: str, params: dict) -> None:
        precision = float(params.get("precision", 0.0))
        latency_ms = int(params.get("latency_ms", 100))
        key = (target, field_name)
        upstream = self.monitor_upstreams.get(key)
        fresh = upstream is None
        if fresh:
            upstream = _MonitorUpstream(target, field_name, latency_ms=latency_ms)
            self.monitor_upstreams[key] = upstream
        # the session's own filter state is registered before the upstream
        # begins, so the initial report is never lost to a routing race
        spec = MonitorSpec(target, field_name, precision, latency_ms,
                           self.ctx.self_ref(self.director.name))
        upstream.listeners[sub_id] = _MonitorListener(session.id, MonitorState(spec))
        session.subscriptions[sub_id] = ("monitor", key)
        try:
            if fresh or latency_ms < upstream.latency_ms:
                # first subscriber, or a faster observer arrived: (re)request
                # the upstream monitor; device-side re-request replaces
                await self._begin_upstream_monitor(upstream, latency_ms)
        except ControlError:
            upstream.listeners.pop(sub_id, None)
            session.subscriptions.pop(sub_id, None)
            if fresh and self.monitor_upstreams.get(key) is upstream:
                del self.monitor_upstreams[key]
            raise

    async def _begin_upstream_monitor(self, upstream: _MonitorUpstream, latency_ms: int) -> None:
        my_ref = format_ref(self.ctx.self_ref(self.director.name))
        self.director.reset_dedupe(upstream.device, f"status:{upstream.field_name}")
        # precision 0 upstream: every change arrives; sessions re-filter.
        upstream.monitor_id = await asyncio.to_thread(
            self.ctx.conduit.invoke, upstream.device, "begin_monitoring",
            {"field": upstream.field_name, "precision": 0.0,
             "latency_ms": latency_ms, "subscriber": my_ref}, INVOKE_POLICY)
        upstream.latency_ms = latency_ms

    async def _unsubscribe(self, session: _Session, message: dict) -> dict:
        sub_id = message.get("subscription_id")
        async with self._op_lock:
            if sub_id not in session.subscriptions:
                raise ControlError(ErrorCode.NO_SUCH_OBJECT, f"no subscription {sub_id!r}")
            await self._drop_subscription(session, sub_id)
        return {"unsubscribed": sub_id}

    async def _remote_detach(self, upstream: _MapperUpstream) -> None:
        if not upstream.upstream_id:
            return
        try:
            await asyncio.to_thread(
                self.ctx.conduit.invoke, upstream.target, "detach",
                {"subscription_id": upstream.upstream_id}, INVOKE_POLICY)
        except ControlError as exc:
            log.debug("upstream detach failed: %s", exc)

    async def _drop_subscription(self, session: _Session, sub_id: str) -> None:
        mode, key = session.subscriptions.pop(sub_id, (None, None))
        if mode == "mapper":
            upstream = self.mapper_upstreams.get(key)
            if upstream is None:
                return
            upstream.listeners.pop(sub_id, None)
            if not upstream.listeners:
                self.mapper_upstreams.pop(key, None)
                await self._remote_detach(upstream)
        elif mode == "monitor":
            upstream = self.monitor_upstreams.get(key)
            if upstream is None:
                return
            upstream.listeners.pop(sub_id, None)
            if not upstream.listeners:
                self.monitor_upstreams.pop(key, None)
                if not upstream.monitor_id:
                    return
                try:
                    await asyncio.to_thread(
                        self.ctx.conduit.invoke, upstream.device, "end_monitoring",
                        {"monitor_id": upstream.monitor_id}, INVOKE_POLICY)
                except ControlError as exc:
                    log.debug("upstream end_monitoring failed: %s", exc)

    async def _invoke(self, session: _Session, message: dict) -> Any:
        target = message.get("target")
        method = message.get("method")
        args = dict(message.get("args") or {})
        if not isinstance(target, str) or not isinstance(method, str):
            raise ControlError(ErrorCode.BAD_ARGS, "invoke needs target and method")
        if target == "__reservations":
            return await self._reservation_op(session, method, args)
        if self._requires_reservation(target, method) and "token" not in args:
            token = session.tokens.get(target)
            if token is not None:
                args["token"] = token
        return await asyncio.to_thread(
            self.ctx.conduit.invoke, target, method, args, INVOKE_POLICY)

    def _requires_reservation(self, target: str, method: str) -> bool:
        info = self._object_index.get(target)
        if info is None:
            return False
        descriptor = PANEL_DESCRIPTORS.get(info["type_tag"])
        if descriptor is None:
            return False
        return any(c["method"] == method and c.get("requires_reservation")
                   for c in descriptor["commands"])

    async def _reservation_op(self, session: _Session, method: str, args: dict) -> Any:
        reservations = self.ctx.reservations
        if reservations is None:
            raise ControlError(ErrorCode.APP_ERROR, "reservations unavailable")
        device = args.get("device")
        if method == "reserve":
            res = await asyncio.to_thread(reservations.reserve, device, session.operator)
            session.tokens[device] = res["token"]
            return {"device": device, "holder": res["holder"], "acquired_at": res["acquired_at"]}
        if method == "release":
            token = session.tokens.pop(device, None)
            if token is None:
                raise ControlError(ErrorCode.BAD_ARGS, f"no reservation held for {device!r}")
            await asyncio.to_thread(reservations.release, token)
            return {"device": device, "released": True}
        if method == "holder_of":
            return await asyncio.to_thread(reservations.holder_of, device)
        raise ControlError(ErrorCode.NO_SUCH_METHOD, f"no reservation op {method!r}")

    # -- updates from the wire ---------------------------------------------------

    def _on_update_from_wire(self, publisher: str, mapper: str, record: Record) -> None:
        loop = self.loop
        if loop is None:
            return
        loop.call_soon_threadsafe(self._route_update, publisher, mapper, record)

    def _route_update(self, publisher: str, mapper: str, record: Record) -> None:
        if publisher == "__events":
            self._route_event(mapper, record)
            return
        if mapper.startswith("status:"):
            self._route_report(publisher, mapper.split(":", 1)[1], record)
            return
        upstream = self.mapper_upstreams.get((publisher, mapper))
        if upstream is None:
            return
        wire = record.to_wire()
        upstream.cache = wire
        for sub_id, session_id in list(upstream.listeners.items()):
            session = self.sessions.get(session_id)
            if session is not None:
                self._push(session, {"kind": "update", "subscription_id": sub_id,
                                     "publisher": publisher, "mapper": mapper, "record": wire})

    def _route_event(self, mapper: str, record: Record) -> None:
        payload = record.as_dict()
        kind = "alert" if mapper == "alerts" else "event"
        for session in list(self.sessions.values()):
            self._push(session, {"kind": kind, kind: payload})

    def _route_report(self, device: str, field_name: str, record: Record) -> None:
        upstream = self.monitor_upstreams.get((device, field_name))
        if upstream is None:
            return
        data = record.as_dict()
        sample = data.get("value")
        timestamp = data.get("timestamp")
        for sub_id, listener in list(upstream.listeners.items()):
            session = self.sessions.get(listener.session_id)
            if session is None:
                continue
            listener.state, report = poll_step(listener.state, sample, timestamp)
            if report is None:
                continue
            listener.seq += 1
            self._push(session, {
                "kind": "update", "subscription_id": sub_id,
                "publisher": device, "mapper": f"status:{field_name}",
                "record": {"seq": listener.seq, "entries": report.to_entries()},
            })

    # -- facility overview ----------------------------------------------------------

    def broadview(self) -> dict:
        states: dict[str, str] = {}
        alerts: list[dict] = []
        if self.ctx.conduit is not None:
            try:
                states = self.ctx.conduit.invoke(
                    self.config.control_ref("__sysman"), "query_states", {},
                    ConnectionPolicy(call_timeout_ms=3000), refreshable=False)
            except ControlError as exc:
                log.warning("broadview: sysman unavailable: %s", exc)
        if self.ctx.events is not None:
            try:
                alerts = self.ctx.events.list_alerts("raised")
            except ControlError:
                pass
        alert_counts: dict[str, int] = {}
        for alert in alerts:
            source = alert.get("event", {}).get("payload") or {}
            process = source.get("process") if isinstance(source, dict) else None
            if process:
                alert_counts[process] = alert_counts.get(process, 0) + 1
        processes = []
        for spec in self.config.processes:
            processes.append({
                "name": spec.name,
                "category": spec.category,
                "state": states.get(spec.name, "unknown"),
                "alert_count": alert_counts.get(spec.name, 0),
                "objects": [
                    {"name": o.name, "type_tag": o.type_tag}
                    for o in spec.objects if o.scope == "distributed"
                ],
            })
        return {"facility": self.config.facility_name, "processes": processes,
                "raised_alerts": len(alerts)}


_FALLBACK_PAGE = """<!doctype html>
<html><head><title>beambench gateway</title></head>
<body style="font-family: system-ui; background:#10141a; color:#e6edf3">
<h1>beambench gateway</h1>
<p>No console build found. Build the frontend (<code>npm run build</code> in
<code>frontend/</code>) and restart, or use the JSON/WebSocket API directly:</p>
<ul>
<li><code>GET /api/broadview</code></li>
<li><code>GET /api/styles</code></li>
<li><code>GET /api/panels/&lt;type_tag&gt;</code></li>
<li><code>WS /ws?operator=&lt;id&gt;</code></li>
</ul></body></html>"""


def build_app(core: GatewayCore, static_dir: Optional[Path] = None) -> FastAPI:
    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        await core.startup()
        yield

    app = FastAPI(title="beambench gateway", lifespan=lifespan)

    @app.get("/api/broadview")
    async def broadview() -> JSONResponse:
        return JSONResponse(await asyncio.to_thread(core.broadview))

    @app.get("/api/styles")
    async def styles() -> JSONResponse:
        return JSONResponse(STYLE_TOKENS)

    @app.get("/api/panels/{type_tag}")
    async def panel(type_tag: str) -> JSONResponse:
        descriptor = PANEL_DESCRIPTORS.get(type_tag)
        if descriptor is None:
            return JSONResponse(
                {"code": ErrorCode.NO_SUCH_OBJECT.value,
                 "message": f"no panel descriptor for {type_tag!r}"},
                status_code=404)
        return JSONResponse(descriptor)

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket, operator: str = "anonymous") -> None:
        await core.run_session(ws, operator)

    if static_dir is not None and static_dir.is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="console")
    else:
        @app.get("/")
        async def index() -> HTMLResponse:
            return HTMLResponse(_FALLBACK_PAGE)

    return app


def find_console_dist() -> Optional[Path]:
    """Locate a built console relative to the repo or an env override."""
    import os

    override = os.environ.get("BEAMBENCH_CONSOLE_DIST")
    if override:
        path = Path(override)
        return path if path.is_dir() else None
    here = Path(__file__).resolve()
    for base in (here.parents[2], here.parents[3] if len(here.parents) > 3 else None):
        if base is None:
            continue
        candidate = base / "frontend" / "dist"
        if candidate.is_dir():
            return candidate
    return None
