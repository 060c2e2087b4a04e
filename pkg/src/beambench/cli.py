"""Command-line entry points: one binary, one subcommand per process role.

Exit codes: 0 on success, 1 on error; errors are printed to stderr as one
JSON object ``{"code": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from typing import Any, Optional

from .conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref, parse_ref
from .errors import ControlError, ErrorCode
from .kernel import Configurable, ProcessHost, boot
from .registry import FacilityConfig, RegistryClient, load_config
from . import facility as facility_pkg
from .facility import inject as inject_fault
from .facility import select_template
from .sysman import plan, start_hub

log = logging.getLogger(__name__)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ControlError as exc:
        print(json.dumps(exc.to_wire()), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beambench",
                                     description="Desk-scale facility control system")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sysman", help="run the control hub and launch the facility")
    p.add_argument("--config", required=True)
    p.add_argument("--restart", action="store_true",
                   help="relaunch failed processes instead of notify-only")
    p.add_argument("--watch-period-ms", type=int, default=None,
                   help="heartbeat period (default: config heartbeat_ms)")
    p.add_argument("--missed-limit", type=int, default=3)
    p.add_argument("--lease", type=int, default=None, metavar="MS",
                   help="reservation lease in ms (default: no expiry)")
    p.add_argument("--log-file", default=None, help="append log records as JSON lines")
    p.add_argument("--no-launch", action="store_true", help="serve the hub only")
    p.set_defaults(func=cmd_sysman)

    for role in ("fep", "supervisor"):
        p = sub.add_parser(role, help=f"run one {role} process")
        p.add_argument("--name", required=True)
        p.add_argument("--config", required=True)
        p.set_defaults(func=cmd_process)

    p = sub.add_parser("gateway", help="run a gateway process")
    p.add_argument("--name", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--http", type=int, default=None, help="HTTP port override")
    p.set_defaults(func=cmd_gateway)

    p = sub.add_parser("ctl", help="ad-hoc invoke: ctl <ref|name> <method> [json-args]")
    p.add_argument("target")
    p.add_argument("method")
    p.add_argument("args", nargs="?", default="{}")
    p.add_argument("--config", default=None, help="needed to resolve bare names")
    p.add_argument("--timeout", type=int, default=5000)
    p.add_argument("--ping", action="store_true", help="ping before invoking")
    p.add_argument("--refresh", action="store_true", help="refresh the ref on failure")
    p.add_argument("--attempts", type=int, default=1)
    p.set_defaults(func=cmd_ctl)

    p = sub.add_parser("watch", help="print a field's status reports as JSON lines")
    p.add_argument("device")
    p.add_argument("field")
    p.add_argument("--precision", type=float, default=0.0)
    p.add_argument("--latency", type=int, default=100, metavar="MS")
    p.add_argument("--config", required=True)
    p.add_argument("--duration", type=float, default=0.0,
                   help="stop after this many seconds (default: run until ^C)")
    p.set_defaults(func=cmd_watch)

    p = sub.add_parser("inject", help="inject a fault: inject <process> <fault-json>")
    p.add_argument("process")
    p.add_argument("fault")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_inject)

    return parser


def _wait_forever(stop: threading.Event) -> None:
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.2):
            pass
    except KeyboardInterrupt:
        pass


def cmd_sysman(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hub = start_hub(config, restart=args.restart, log_file=args.log_file, lease_ms=args.lease)
    period = args.watch_period_ms or config.heartbeat_ms
    stop = threading.Event()
    try:
        if not args.no_launch:
            hub.manager.launch(plan(config))
            log.info("facility %s ready", config.facility_name)
        hub.manager.watch(period, args.missed_limit)
        _wait_forever(stop)
    finally:
        log.info("shutting facility down")
        hub.manager.shutdown(hub.conduit)
        hub.stop()
    return 0


def cmd_process(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    template = select_template(config, args.name)
    host = boot(template, config.control_host, config.control_port,
                heartbeat_ms=config.heartbeat_ms)
    stop = threading.Event()
    host.on_shutdown_request = _chain_shutdown(host, stop)
    _wait_forever(stop)
    _graceful(host)
    return 0


def _chain_shutdown(host: ProcessHost, stop: threading.Event):
    def handler() -> None:
        _graceful(host)
        stop.set()
    return handler


def _graceful(host: ProcessHost) -> None:
    if host.manager is not None:
        host.manager.stop_heartbeat()
        host.manager.report_quietly("stopped")
    host.stop()


def cmd_gateway(args: argparse.Namespace) -> int:
    import uvicorn

    from .gateway import GatewayCore, GatewayDirector, build_app, find_console_dist

    config = load_config(args.config)
    spec = config.process(args.name)
    template = select_template(config, args.name)
    host = boot(template, config.control_host, config.control_port,
                heartbeat_ms=config.heartbeat_ms, defer_ready=True)

    director = next((o for o in host.objects.values() if isinstance(o, GatewayDirector)), None)
    if director is None:
        raise ControlError(ErrorCode.BAD_ARGS,
                           f"process {args.name!r} hosts no gateway object")
    http_port = args.http
    if http_port is None:
        http_port = int(director.params.get("http_port", 8200))

    core = GatewayCore(config, host.ctx, director)
    app = build_app(core, static_dir=find_console_dist())
    server = uvicorn.Server(uvicorn.Config(app, host=spec.host, port=http_port,
                                           log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True, name="gateway-http")
    thread.start()
    deadline = time.monotonic() + 15
    while not server.started:
        if time.monotonic() > deadline or not thread.is_alive():
            raise ControlError(ErrorCode.APP_ERROR, "gateway HTTP server failed to start")
        time.sleep(0.05)

    # gateway-ready means: the WebSocket listener is open
    host.manager.report("ready")
    host.manager.start_heartbeat(config.heartbeat_ms)
    log.info("gateway %s serving http://%s:%d", args.name, spec.host, http_port)

    stop = threading.Event()
    host.on_shutdown_request = _chain_shutdown(host, stop)
    _wait_forever(stop)
    server.should_exit = True
    _graceful(host)
    return 0


def _client_conduit(config: Optional[FacilityConfig]) -> Conduit:
    conduit = Conduit()
    if config is not None:
        registry = RegistryClient(conduit, config.control_host, config.control_port)
        conduit.resolver = registry.resolver
    return conduit


def cmd_ctl(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else None
    target: Any = args.target
    if target.startswith("ref://"):
        target = parse_ref(target)
    elif config is None:
        raise ControlError(ErrorCode.BAD_ARGS, "--config is required to resolve bare names")
    try:
        call_args = json.loads(args.args)
    except json.JSONDecodeError as exc:
        raise ControlError(ErrorCode.BAD_ARGS, f"args is not valid JSON: {exc}")
    policy = ConnectionPolicy(
        ping_before_invoke=args.ping, refresh_on_failure=args.refresh,
        wait_for_presence=args.refresh, max_attempts=max(1, args.attempts),
        call_timeout_ms=args.timeout)
    conduit = _client_conduit(config)
    value = conduit.invoke(target, args.method, call_args, policy)
    print(json.dumps(value, indent=2))
    return 0


class _PrintingDirector(Configurable):
    """Minimal update sink for the watch command."""

    scope = "distributed"
    exposed = ("update",)
    serialize_dispatch = False

    def update(self, publisher: str, mapper: str, record: dict) -> bool:
        entries = dict(record.get("entries", []))
        print(json.dumps({"publisher": publisher, **entries}), flush=True)
        return True


def cmd_watch(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    conduit = _client_conduit(config)
    listener = ProcessHost(f"watch-{int(time.time())}", "127.0.0.1", 0, worker_count=2)
    sink = _PrintingDirector("watch_sink", None, {})
    listener.add_object(sink)
    listener.start()
    monitor_id = conduit.invoke(args.device, "begin_monitoring", {
        "field": args.field, "precision": args.precision,
        "latency_ms": args.latency, "subscriber": format_ref(listener.ref_for("watch_sink")),
    }, ConnectionPolicy(call_timeout_ms=5000, max_attempts=3, retry_backoff_ms=200))
    try:
        if args.duration > 0:
            time.sleep(args.duration)
        else:
            _wait_forever(threading.Event())
    finally:
        try:
            conduit.invoke(args.device, "end_monitoring", {"monitor_id": monitor_id},
                           ConnectionPolicy(call_timeout_ms=3000))
        except ControlError:
            pass
        listener.stop()
    return 0


def cmd_inject(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    try:
        fault = json.loads(args.fault)
    except json.JSONDecodeError as exc:
        raise ControlError(ErrorCode.BAD_ARGS, f"fault is not valid JSON: {exc}")
    conduit = Conduit()
    result = inject_fault(config, conduit, args.process, fault)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
