"""Worker-server daemon and client pool: a framed request/response protocol
for invoking registry-named worker chains on other hosts.

Wire format, bit-exact: a 4-byte big-endian unsigned length, then the
message body encoded by a codec.  HELLO and HELLO_ACK always travel in
the structured-text codec (the mandatory baseline); the HELLO names the
codec used by every later frame on the connection.  Out-of-process local
lanes speak exactly this protocol over a loopback socket -- one
protocol, two deployments.
"""

from __future__ import annotations

import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from . import envelope as env_mod
from . import log
from .codec import TEXT_V1, Codec, CodecError, codec_ids, get_codec
from .envelope import REMOTE_ERROR, Envelope
from .errors import (
    MalformedBody,
    Oversize,
    PortInUse,
    Truncated,
    Unreachable,
    VersionMismatch,
)
from .worker import WorkerChain, WorkerRegistry, apply_chain, default_registry

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024  # bodies above this are a protocol error

HELLO = "HELLO"
HELLO_ACK = "HELLO_ACK"
CALL = "CALL"
RESULT = "RESULT"
PING = "PING"
PONG = "PONG"
SHUTDOWN = "SHUTDOWN"

_HEADER = struct.Struct(">I")

_REQUIRED_FIELDS = {
    HELLO: ("protocol_version", "client_name", "codec"),
    HELLO_ACK: ("protocol_version", "worker_names", "slots"),
    CALL: ("call_id", "piper", "chain", "inbox"),
    RESULT: ("call_id", "envelope"),
    PING: (),
    PONG: (),
    SHUTDOWN: (),
}


def _validate_message(doc: Any) -> dict:
    if not isinstance(doc, dict):
        raise MalformedBody(f"message body must be an object, got {type(doc).__name__}")
    mtype = doc.get("type")
    if mtype not in _REQUIRED_FIELDS:
        raise MalformedBody(f"unknown message type {mtype!r}")
    for field in _REQUIRED_FIELDS[mtype]:
        if field not in doc:
            raise MalformedBody(f"{mtype} message missing field {field!r}")
    return doc


def encode_frame(message: dict, codec: Codec | str = TEXT_V1) -> bytes:
    codec = get_codec(codec) if isinstance(codec, str) else codec
    body = codec.encode(_validate_message(message))
    if len(body) > MAX_FRAME_BYTES:
        raise Oversize(f"frame body of {len(body)} bytes exceeds {MAX_FRAME_BYTES}")
    return _HEADER.pack(len(body)) + body


def decode_frame(data: bytes, codec: Codec | str = TEXT_V1) -> dict:
    codec = get_codec(codec) if isinstance(codec, str) else codec
    if len(data) < _HEADER.size:
        raise Truncated(f"frame shorter than its {_HEADER.size}-byte header")
    (length,) = _HEADER.unpack(data[:_HEADER.size])
    if length > MAX_FRAME_BYTES:
        raise Oversize(f"declared body of {length} bytes exceeds {MAX_FRAME_BYTES}")
    body = data[_HEADER.size:]
    if len(body) != length:
        raise Truncated(f"declared {length} body bytes, got {len(body)}")
    try:
        doc = codec.decode(body)
    except CodecError as exc:
        raise MalformedBody(str(exc)) from exc
    return _validate_message(doc)


def _hard_close(sock: socket.socket) -> None:
    """shutdown() then close(): close() alone never wakes a peer thread
    blocked in recv() on the same socket, because the blocked syscall keeps
    the open file description alive and no FIN goes out."""
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            if remaining == n and not chunks:
                return b""  # clean close at a frame boundary
            raise Truncated(f"connection closed {remaining} bytes into a frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, codec: Codec) -> dict | None:
    """Read one frame off a socket; None on clean close."""
    header = _recv_exact(sock, _HEADER.size)
    if not header:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise Oversize(f"declared body of {length} bytes exceeds {MAX_FRAME_BYTES}")
    body = _recv_exact(sock, length) if length else b""
    if length and not body:
        raise Truncated("connection closed before frame body")
    try:
        doc = codec.decode(body)
    except CodecError as exc:
        raise MalformedBody(str(exc)) from exc
    return _validate_message(doc)


def write_frame(sock: socket.socket, message: dict, codec: Codec) -> None:
    sock.sendall(encode_frame(message, codec))


# --- server --------------------------------------------------------------------

class WorkerServer:
    """Serves registry-named chains; up to `slots` evaluations run concurrently."""

    def __init__(self, registry: WorkerRegistry | None = None, port: int = 0,
                 slots: int = 1, host: str = "127.0.0.1"):
        if slots < 1:
            raise ValueError("slots must be >= 1")
        self.registry = (registry or default_registry()).snapshot()
        self.slots = slots
        try:
            self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listener.bind((host, port))
            self._listener.listen(16)
        except OSError as exc:
            raise PortInUse(f"cannot bind {host}:{port}: {exc}") from exc
        self.host, self.port = self._listener.getsockname()[:2]
        self._pool = ThreadPoolExecutor(max_workers=slots,
                                        thread_name_prefix="flowpipe-slot")
        self._shutdown = threading.Event()
        self._accept_thread: threading.Thread | None = None
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()

    def start(self) -> None:
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="flowpipe-accept", daemon=True)
        self._accept_thread.start()
        log.info("server", f"worker server listening on {self.host}:{self.port} "
                           f"({self.slots} slots)")

    def run_forever(self) -> None:
        """Serve until a SHUTDOWN message arrives."""
        if self._accept_thread is None:
            self.start()
        self._shutdown.wait()
        self.stop()

    def stop(self) -> None:
        self._shutdown.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            _hard_close(conn)
        self._pool.shutdown(wait=False)

    def _accept_loop(self) -> None:
        while not self._shutdown.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            with self._conns_lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_connection, args=(conn, addr),
                             name="flowpipe-conn", daemon=True).start()

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        text = get_codec(TEXT_V1)
        codec = text
        write_lock = threading.Lock()
        try:
            hello = read_frame(conn, text)
            if hello is None or hello["type"] != HELLO:
                return
            ack = {
                "type": HELLO_ACK,
                "protocol_version": PROTOCOL_VERSION,
                "worker_names": self.registry.names(),
                "slots": self.slots,
            }
            wanted = hello.get("codec", TEXT_V1)
            if wanted not in codec_ids():
                ack["error"] = f"unsupported codec {wanted!r}"
            with write_lock:
                write_frame(conn, ack, text)
            if hello["protocol_version"] != PROTOCOL_VERSION or "error" in ack:
                return
            codec = get_codec(wanted)

            while not self._shutdown.is_set():
                msg = read_frame(conn, codec)
                if msg is None:
                    return
                if msg["type"] == PING:
                    with write_lock:
                        write_frame(conn, {"type": PONG}, codec)
                elif msg["type"] == SHUTDOWN:
                    log.info("server", f"shutdown requested by {addr}")
                    self._shutdown.set()
                    return
                elif msg["type"] == CALL:
                    self._pool.submit(self._evaluate, conn, codec, write_lock, msg)
                # RESULT/HELLO from a client are ignored
        except (Truncated, MalformedBody, Oversize, CodecError, OSError) as exc:
            log.debug("server", f"connection {addr} dropped: {exc}")
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            _hard_close(conn)

    def _evaluate(self, conn, codec, write_lock, msg) -> None:
        call_id = msg["call_id"]
        piper = str(msg.get("piper", "remote"))
        try:
            chain = WorkerChain.from_wire(msg["chain"])
            inbox = [env_mod.from_wire(doc) for doc in msg["inbox"]]
        except (KeyError, TypeError, ValueError) as exc:
            result = env_mod.new_fault(piper, -1, REMOTE_ERROR,
                                       f"malformed CALL: {exc}", item_index=-1)
        else:
            missing = [name for name in chain.names() if name not in self.registry]
            if missing:
                result = env_mod.new_fault(
                    piper, -1, REMOTE_ERROR,
                    f"unknown workers on this server: {', '.join(missing)}",
                    item_index=inbox[0].item_index if inbox else -1)
            else:
                result = apply_chain(chain, inbox, piper=piper, registry=self.registry)
        reply = {"type": RESULT, "call_id": call_id, "envelope": env_mod.to_wire(result)}
        try:
            with write_lock:
                write_frame(conn, reply, codec)
        except (OSError, CodecError) as exc:
            log.debug("server", f"could not deliver result for call {call_id}: {exc}")


def serve(registry: WorkerRegistry | None = None, port: int = 0, slots: int = 1,
          host: str = "127.0.0.1", announce=None) -> None:
    """Run a worker server until SHUTDOWN.  Raises PortInUse at startup."""
    server = WorkerServer(registry, port=port, slots=slots, host=host)
    if announce is not None:
        announce(server)
    server.run_forever()


# --- client ---------------------------------------------------------------------

class _PendingCall:
    __slots__ = ("event", "envelope")

    def __init__(self):
        self.event = threading.Event()
        self.envelope: Envelope | None = None


class RemoteSlotPool:
    """A connection to one worker server, bounded by its advertised slots.

    call() is safe from many scheduler lanes at once; RESULT frames are
    matched to callers by call_id, so completions may arrive in any order.
    """

    def __init__(self, sock: socket.socket, host: str, port: int, slots: int,
                 worker_names: list[str], codec: Codec):
        self.host = host
        self.port = port
        self.slots = slots
        self.worker_names = worker_names
        self._codec = codec
        self._sock = sock
        self._write_lock = threading.Lock()
        self._pending: dict[int, _PendingCall] = {}
        self._pending_lock = threading.Lock()
        self._next_id = 0
        self._slots_sem = threading.BoundedSemaphore(slots)
        self._dead: str | None = None
        self._reader = threading.Thread(target=self._read_loop,
                                        name="flowpipe-pool-reader", daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                msg = read_frame(self._sock, self._codec)
                if msg is None:
                    self._fail_all("server closed the connection")
                    return
                if msg["type"] == RESULT:
                    with self._pending_lock:
                        waiter = self._pending.pop(msg["call_id"], None)
                    if waiter is not None:
                        try:
                            waiter.envelope = env_mod.from_wire(msg["envelope"])
                        except ValueError as exc:
                            waiter.envelope = None
                            log.debug("pool", f"bad RESULT envelope: {exc}")
                        waiter.event.set()
                # PONGs wake nobody: ping() is fire-and-forget liveness
        except (Truncated, MalformedBody, Oversize, CodecError, OSError) as exc:
            self._fail_all(str(exc))

    def _fail_all(self, reason: str) -> None:
        self._dead = reason
        with self._pending_lock:
            pending = list(self._pending.values())
            self._pending.clear()
        for waiter in pending:
            waiter.event.set()

    def call(self, chain: WorkerChain, inbox: list[Envelope],
             piper: str = "remote") -> Envelope:
        """Invoke a chain on the server; transport failure becomes a fault."""
        item_index = inbox[0].item_index if inbox else -1
        sub_index = inbox[0].sub_index if inbox else None
        with self._slots_sem:
            if self._dead is not None:
                return env_mod.new_fault(piper, -1, REMOTE_ERROR,
                                         f"connection lost: {self._dead}",
                                         item_index, sub_index)
            waiter = _PendingCall()
            with self._pending_lock:
                call_id = self._next_id
                self._next_id += 1
                self._pending[call_id] = waiter
            msg = {
                "type": CALL,
                "call_id": call_id,
                "piper": piper,
                "chain": chain.to_wire(),
                "inbox": [env_mod.to_wire(env) for env in inbox],
            }
            try:
                with self._write_lock:
                    write_frame(self._sock, msg, self._codec)
            except (OSError, CodecError) as exc:
                with self._pending_lock:
                    self._pending.pop(call_id, None)
                return env_mod.new_fault(piper, -1, REMOTE_ERROR,
                                         f"send failed: {exc}", item_index, sub_index)
            waiter.event.wait()
            if waiter.envelope is None:
                return env_mod.new_fault(piper, -1, REMOTE_ERROR,
                                         f"connection lost: {self._dead or 'bad result'}",
                                         item_index, sub_index)
            return waiter.envelope

    def shutdown_server(self) -> None:
        try:
            with self._write_lock:
                write_frame(self._sock, {"type": SHUTDOWN}, self._codec)
        except (OSError, CodecError):
            pass

    def close(self) -> None:
        _hard_close(self._sock)


def connect(host: str, port: int, client_name: str = "flowpipe",
            codec: str = TEXT_V1, timeout_s: float = 10.0) -> RemoteSlotPool:
    """Handshake with a worker server; caches its advertised worker names."""
    text = get_codec(TEXT_V1)
    try:
        sock = socket.create_connection((host, port), timeout=timeout_s)
    except OSError as exc:
        raise Unreachable(f"cannot reach {host}:{port}: {exc}") from exc
    try:
        write_frame(sock, {
            "type": HELLO,
            "protocol_version": PROTOCOL_VERSION,
            "client_name": client_name,
            "codec": codec,
        }, text)
        ack = read_frame(sock, text)
    except (OSError, Truncated, MalformedBody, Oversize) as exc:
        sock.close()
        raise Unreachable(f"handshake with {host}:{port} failed: {exc}") from exc
    if ack is None or ack["type"] != HELLO_ACK:
        sock.close()
        raise Unreachable(f"no HELLO_ACK from {host}:{port}")
    if ack["protocol_version"] != PROTOCOL_VERSION:
        sock.close()
        raise VersionMismatch(
            f"server speaks protocol {ack['protocol_version']}, "
            f"client speaks {PROTOCOL_VERSION}")
    if "error" in ack:
        sock.close()
        raise Unreachable(f"server rejected handshake: {ack['error']}")
    sock.settimeout(None)
    return RemoteSlotPool(sock, host, port, int(ack["slots"]),
                          list(ack["worker_names"]), get_codec(codec))
