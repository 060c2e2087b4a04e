"""Framed point-to-point messaging and the recovering connection abstraction.

Wire format: every message is a frame of 4-byte big-endian length followed
by that many bytes of UTF-8 JSON. A call carries ``{id, kind:"call",
object, method, args}``; a reply carries ``{id, kind:"reply", status}``
plus ``value`` (ok) or ``error: {code, message}``. Absent fields are
omitted. Frame ids are per-connection, start at 1, and restart on
reconnect.

Clients configure recovery per call through :class:`ConnectionPolicy`:
waiting for a service to appear before the first connect, pinging before
each invocation, and refreshing a stale reference through the name service
when a previously good connection dies. A timeout in the middle of an
invocation is never retried, because the call may already have executed.
"""

from __future__ import annotations

import json
import logging
import re
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .errors import ControlError, ErrorCode, bad_args

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME = 2**32 - 1

_TOKEN_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
_REF_RE = re.compile(
    r"^ref://(?P<host>[A-Za-z0-9_.-]+):(?P<port>\d+)"
    r"/(?P<process>[A-Za-z0-9_.-]+)/(?P<object>[A-Za-z0-9_.-]+)$"
)


def is_name_token(text: str) -> bool:
    return isinstance(text, str) and bool(_TOKEN_RE.match(text))


@dataclass(frozen=True)
class ObjectRef:
    """Location-transparent handle to a named distributed object."""

    host: str
    port: int
    process: str
    object: str

    def __post_init__(self):
        if not (1 <= self.port <= 65535):
            raise bad_args(f"port out of range: {self.port}")
        for part in (self.process, self.object):
            if not is_name_token(part):
                raise bad_args(f"bad name token: {part!r}")
        if not is_name_token(self.host):
            raise bad_args(f"bad host: {self.host!r}")

    def __str__(self) -> str:
        return format_ref(self)


def parse_ref(text: str) -> ObjectRef:
    """Parse the canonical ``ref://<host>:<port>/<process>/<object>`` form."""
    if not isinstance(text, str):
        raise bad_args(f"ref must be a string, got {type(text).__name__}")
    m = _REF_RE.match(text)
    if not m:
        raise bad_args(f"malformed ref: {text!r}")
    port = int(m.group("port"))
    if not (1 <= port <= 65535):
        raise bad_args(f"port out of range in ref: {text!r}")
    return ObjectRef(m.group("host"), port, m.group("process"), m.group("object"))


def format_ref(ref: ObjectRef) -> str:
    return f"ref://{ref.host}:{ref.port}/{ref.process}/{ref.object}"


def encode_frame(payload: bytes) -> bytes:
    """Prefix *payload* with its 4-byte big-endian length."""
    if len(payload) > MAX_FRAME:
        raise bad_args("payload too large to frame")
    return FRAME_HEADER.pack(len(payload)) + payload


def decode_frame(data: bytes) -> bytes:
    """Inverse of :func:`encode_frame` for a single complete frame."""
    if len(data) < FRAME_HEADER.size:
        raise bad_args("truncated frame header")
    (length,) = FRAME_HEADER.unpack_from(data)
    body = data[FRAME_HEADER.size:]
    if len(body) != length:
        raise bad_args("frame length mismatch")
    return body


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one complete frame from *sock*; None on clean EOF.

    A connection that dies mid-frame raises ConnectionError: a truncated
    frame never yields a payload.
    """
    header = _recv_exact(sock, FRAME_HEADER.size)
    if header is None:
        return None
    (length,) = FRAME_HEADER.unpack(header)
    body = _recv_exact(sock, length)
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return body


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ConnectionError("connection closed mid-frame")
            return None
        buf += chunk
    return buf


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(encode_frame(payload))


def encode_envelope(env: dict) -> bytes:
    return json.dumps(env, separators=(",", ":")).encode("utf-8")


def decode_envelope(payload: bytes) -> dict:
    obj = json.loads(payload.decode("utf-8"))
    if not isinstance(obj, dict):
        raise bad_args("envelope must be a JSON object")
    return obj


@dataclass
class ConnectionPolicy:
    """Per-call recovery configuration.

    ``max_attempts`` bounds resolution+connect cycles; ``retry_backoff_ms``
    is slept between cycles; ``call_timeout_ms`` bounds each wait for a
    reply (including pings).
    """

    wait_for_presence: bool = False
    ping_before_invoke: bool = False
    refresh_on_failure: bool = False
    max_attempts: int = 1
    retry_backoff_ms: int = 100
    call_timeout_ms: int = 5000

    def __post_init__(self):
        if self.max_attempts < 1:
            raise bad_args("max_attempts must be >= 1")
        if self.call_timeout_ms <= 0:
            raise bad_args("call_timeout must be > 0")
        if self.retry_backoff_ms < 0:
            raise bad_args("retry_backoff must be >= 0")


#: Reasonable default for ad-hoc clients: one shot, 5 s timeout.
DEFAULT_POLICY = ConnectionPolicy()


class _SendFailed(Exception):
    """Connection was dead before the call bytes went out; safe to retry."""


class _Pending:
    __slots__ = ("event", "value", "error")

    def __init__(self):
        self.event = threading.Event()
        self.value = None
        self.error: Optional[ControlError] = None


class Connection:
    """One TCP connection multiplexing concurrent calls by envelope id.

    Safe to share across threads: a writer lock serializes sends and a
    reader thread matches each reply to the caller waiting on its id.
    """

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self.host = host
        self.port = port
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._next_id = 1
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"conduit-reader-{host}:{port}")
        self._reader.start()

    @property
    def alive(self) -> bool:
        return not self._closed

    def close(self) -> None:
        with self._state_lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._fail_pending(ControlError(ErrorCode.COMM_FAILURE, "connection closed"))

    def _fail_pending(self, err: ControlError) -> None:
        with self._state_lock:
            pending, self._pending = self._pending, {}
        for p in pending.values():
            p.error = err
            p.event.set()

    def _read_loop(self) -> None:
        try:
            while True:
                payload = read_frame(self._sock)
                if payload is None:
                    break
                try:
                    env = decode_envelope(payload)
                except (ControlError, ValueError):
                    log.warning("dropping undecodable reply frame from %s:%s", self.host, self.port)
                    continue
                self._deliver(env)
        except (OSError, ConnectionError):
            pass
        finally:
            with self._state_lock:
                self._closed = True
            self._fail_pending(ControlError(ErrorCode.COMM_FAILURE, "connection lost"))

    def _deliver(self, env: dict) -> None:
        if env.get("kind") != "reply":
            log.warning("ignoring non-reply frame on client connection")
            return
        with self._state_lock:
            pending = self._pending.pop(env.get("id"), None)
        if pending is None:
            return
        if env.get("status") == "ok":
            pending.value = env.get("value")
        else:
            pending.error = ControlError.from_wire(env.get("error") or {})
        pending.event.set()

    def call(self, object_name: str, method: str, args: Any, timeout_ms: int) -> Any:
        """Issue one call and wait for its reply.

        Raises ``_SendFailed`` if the connection died before the request
        was written (retryable); TIMEOUT when no reply arrives in time;
        COMM_FAILURE when the connection is lost while waiting; or the
        server-relayed error verbatim.
        """
        pending = _Pending()
        with self._state_lock:
            if self._closed:
                raise _SendFailed()
            call_id = self._next_id
            self._next_id += 1
            self._pending[call_id] = pending
        env = {"id": call_id, "kind": "call", "object": object_name, "method": method, "args": args}
        try:
            with self._send_lock:
                write_frame(self._sock, encode_envelope(env))
        except OSError:
            with self._state_lock:
                self._pending.pop(call_id, None)
            raise _SendFailed()
        if not pending.event.wait(timeout_ms / 1000.0):
            with self._state_lock:
                self._pending.pop(call_id, None)
            raise ControlError(ErrorCode.TIMEOUT, f"no reply to {object_name}.{method} within {timeout_ms} ms")
        if pending.error is not None:
            raise pending.error
        return pending.value


Resolver = Callable[[str, Optional[int]], ObjectRef]


@dataclass
class AttemptRecord:
    target: str
    attempt: int
    stage: str  # resolve | connect | ping | call
    detail: str = ""


class Conduit:
    """Client facade: pooled connections plus policy-driven recovery.

    ``resolver(name, wait_ms)`` supplies fresh refs from the name service;
    it is required only when a policy enables wait_for_presence or
    refresh_on_failure. Attempt records go to ``on_attempt`` (and the
    module logger) so recovery behavior is observable.
    """

    def __init__(self, resolver: Optional[Resolver] = None,
                 on_attempt: Optional[Callable[[AttemptRecord], None]] = None):
        self.resolver = resolver
        self.on_attempt = on_attempt
        self._pool: dict[tuple[str, int], Connection] = {}
        self._pool_lock = threading.Lock()
        self.invoke_count = 0
        self._stats_lock = threading.Lock()

    # -- connection pool -------------------------------------------------

    def connection_to(self, host: str, port: int, timeout_ms: int = 5000) -> Connection:
        key = (host, port)
        with self._pool_lock:
            conn = self._pool.get(key)
            if conn is not None and conn.alive:
                return conn
        conn = Connection(host, port, connect_timeout=timeout_ms / 1000.0)
        with self._pool_lock:
            old = self._pool.get(key)
            if old is not None and old.alive:
                conn.close()
                return old
            self._pool[key] = conn
        return conn

    def drop_connection(self, host: str, port: int) -> None:
        with self._pool_lock:
            conn = self._pool.pop((host, port), None)
        if conn is not None:
            conn.close()

    def close(self) -> None:
        with self._pool_lock:
            conns, self._pool = list(self._pool.values()), {}
        for conn in conns:
            conn.close()

    # -- invocation ------------------------------------------------------

    def _note(self, record: AttemptRecord) -> None:
        log.debug("conduit attempt %s#%d %s %s", record.target, record.attempt, record.stage, record.detail)
        if self.on_attempt is not None:
            self.on_attempt(record)

    def _resolve(self, name: str, policy: ConnectionPolicy, wait: bool,
                 budget_ms: int) -> ObjectRef:
        if self.resolver is None:
            raise ControlError(ErrorCode.CONNECT_FAILED, f"no resolver available for {name!r}")
        wait_ms = min(policy.retry_backoff_ms + policy.call_timeout_ms, budget_ms) if wait else None
        return self.resolver(name, wait_ms)

    @staticmethod
    def budget_ms(policy: ConnectionPolicy) -> int:
        """Upper bound on one whole invocation, recovery included."""
        return (policy.call_timeout_ms
                + policy.max_attempts * (policy.retry_backoff_ms + policy.call_timeout_ms))

    @staticmethod
    def _recovery_budget_ms(policy: ConnectionPolicy) -> int:
        # Recovery stages (resolve/connect/ping/backoff) share this much;
        # the terminal call keeps its own full call_timeout window, since a
        # timed-out call ends the invocation rather than retrying. Together
        # they stay within budget_ms.
        return policy.max_attempts * (policy.retry_backoff_ms + policy.call_timeout_ms)

    def invoke(self, target: ObjectRef | str, method: str, args: Any = None,
               policy: ConnectionPolicy = DEFAULT_POLICY, refreshable: bool = True) -> Any:
        """Invoke *method* on *target* under *policy*, returning the reply value.

        *target* may be an ObjectRef or a bare object name to resolve via
        the name service. ``refreshable=False`` pins recovery to the given
        endpoint (used for the name service itself, whose address is
        static and must not be re-resolved through itself).

        Never blocks longer than
        ``call_timeout + max_attempts * (retry_backoff + call_timeout)``:
        every wait inside the loop is capped by the remaining budget.
        """
        with self._stats_lock:
            self.invoke_count += 1
        name = target if isinstance(target, str) else target.object
        ref = None if isinstance(target, str) else target
        can_refresh = refreshable and self.resolver is not None
        deadline = time.monotonic() + self._recovery_budget_ms(policy) / 1000.0

        def remaining_ms(floor: int = 1) -> int:
            left = int((deadline - time.monotonic()) * 1000)
            return max(floor, left)

        def out_of_budget() -> bool:
            return time.monotonic() >= deadline

        never_connected = True
        attempt = 0
        while True:
            attempt += 1
            try:
                if ref is None:
                    self._note(AttemptRecord(name, attempt, "resolve"))
                    try:
                        ref = self._resolve(name, policy, wait=policy.wait_for_presence,
                                            budget_ms=remaining_ms())
                    except ControlError as exc:
                        if exc.code in (ErrorCode.TIMEOUT, ErrorCode.CONNECT_FAILED,
                                        ErrorCode.COMM_FAILURE):
                            raise _Recoverable(ErrorCode.CONNECT_FAILED,
                                               f"resolve {name!r} failed: {exc}")
                        raise
                conn = self._try_connect(
                    ref, min(policy.call_timeout_ms, remaining_ms()), attempt)
                never_connected = False
                if policy.ping_before_invoke and method != "__ping":
                    self._note(AttemptRecord(name, attempt, "ping", str(ref)))
                    try:
                        conn.call(ref.object, "__ping", None,
                                  min(policy.call_timeout_ms, remaining_ms()))
                    except (_SendFailed, ControlError) as exc:
                        if isinstance(exc, ControlError) and exc.code not in (
                                ErrorCode.TIMEOUT, ErrorCode.COMM_FAILURE):
                            raise
                        self.drop_connection(ref.host, ref.port)
                        raise _Recoverable(ErrorCode.COMM_FAILURE, f"ping failed: {exc}")
                self._note(AttemptRecord(name, attempt, "call", method))
                try:
                    return conn.call(ref.object, method, args, policy.call_timeout_ms)
                except _SendFailed:
                    self.drop_connection(ref.host, ref.port)
                    raise _Recoverable(ErrorCode.COMM_FAILURE, "connection lost before send")
            except _Recoverable as exc:
                exhausted = (attempt >= policy.max_attempts or out_of_budget()
                             or not self._may_recover(policy, never_connected))
                if exhausted:
                    code = ErrorCode.CONNECT_FAILED if never_connected else exc.code
                    raise ControlError(code, exc.message) from None
                if policy.retry_backoff_ms:
                    time.sleep(min(policy.retry_backoff_ms, remaining_ms(0)) / 1000.0)
                if self._refreshes(policy) and can_refresh:
                    ref = None

    @staticmethod
    def _may_recover(policy: ConnectionPolicy, never_connected: bool) -> bool:
        if never_connected:
            return policy.wait_for_presence
        return policy.refresh_on_failure

    @staticmethod
    def _refreshes(policy: ConnectionPolicy) -> bool:
        return policy.wait_for_presence or policy.refresh_on_failure

    def _try_connect(self, ref: ObjectRef, timeout_ms: int, attempt: int) -> Connection:
        self._note(AttemptRecord(ref.object, attempt, "connect", f"{ref.host}:{ref.port}"))
        try:
            return self.connection_to(ref.host, ref.port, timeout_ms)
        except OSError as exc:
            raise _Recoverable(ErrorCode.CONNECT_FAILED, f"connect to {ref.host}:{ref.port} failed: {exc}")

    def ping(self, target: ObjectRef | str, timeout_ms: int = 2000) -> bool:
        """True iff a ``__ping`` call completes ok within *timeout_ms*."""
        policy = ConnectionPolicy(call_timeout_ms=timeout_ms)
        try:
            self.invoke(target, "__ping", None, policy)
            return True
        except ControlError:
            return False


class _Recoverable(Exception):
    def __init__(self, code: ErrorCode, message: str):
        self.code = code
        self.message = message
        super().__init__(message)
