"""Direct producer->consumer payload channels that bypass the manager.

dump_item() stages a payload out-of-band (network socket, named pipe, or
file) and returns a small Locator that travels in-band through the
pipeline; load_item() redeems it exactly once from any process that can
reach the staged resource.  Staged payloads expire after a window so a
consumer that faults before redeeming cannot leak resources forever.

The shm and database method identifiers are reserved but unimplemented;
attempting them raises UnsupportedMethod.
"""

from __future__ import annotations

import os
import secrets
import socket
import struct
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .codec import get_codec
from .errors import (
    AlreadyRedeemed,
    Expired,
    StagingFailed,
    TransportError,
    UnsupportedMethod,
)

METHODS = ("socket", "pipe", "file")
RESERVED_METHODS = ("shm", "database")

DEFAULT_EXPIRY_S = 300.0
_LEN = struct.Struct(">Q")


@dataclass(frozen=True)
class Locator:
    """Out-of-band payload address, small enough to travel in-band (<= 1 KiB)."""

    method: str
    address: str
    codec: str
    token: str
    payload_bytes: Optional[int] = None
    one_shot: bool = True


def locator_to_wire(loc: Locator) -> dict:
    return {
        "__locator__": {
            "method": loc.method,
            "address": loc.address,
            "codec": loc.codec,
            "token": loc.token,
            "payload_bytes": loc.payload_bytes,
            "one_shot": loc.one_shot,
        }
    }


def locator_from_wire(doc) -> Locator:
    if isinstance(doc, Locator):
        return doc
    try:
        body = doc["__locator__"]
        return Locator(
            method=str(body["method"]),
            address=str(body["address"]),
            codec=str(body["codec"]),
            token=str(body["token"]),
            payload_bytes=body.get("payload_bytes"),
            one_shot=bool(body.get("one_shot", True)),
        )
    except (KeyError, TypeError) as exc:
        raise TransportError(f"not a locator document: {doc!r}") from exc


class _Staged:
    """Producer-side record of one staged payload."""

    def __init__(self, locator: Locator, created_at: float, release):
        self.locator = locator
        self.created_at = created_at
        self.state = "staged"  # staged | redeemed | expired
        self._release = release

    def release(self):
        try:
            self._release()
        except OSError:
            pass


class StagingState:
    """Per-process bookkeeping for staged payloads and redemption claims."""

    def __init__(self, root: str | os.PathLike | None = None,
                 interface: str = "127.0.0.1",
                 expiry_s: float = DEFAULT_EXPIRY_S):
        self.root = Path(root) if root else Path(tempfile.gettempdir()) / "flowpipe-stage"
        self.interface = interface
        self.expiry_s = expiry_s
        self._lock = threading.Lock()
        self._entries: dict[str, _Staged] = {}

    def _ensure_root(self) -> Path:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StagingFailed(f"staging root {self.root} not writable: {exc}") from exc
        return self.root

    def add(self, locator: Locator, release) -> None:
        with self._lock:
            self._entries[locator.token] = _Staged(locator, time.time(), release)

    def claim(self, token: str) -> str | None:
        """Claim a token for redemption; returns None when this process has
        no record (cross-process load), else the previous state."""
        with self._lock:
            entry = self._entries.get(token)
            if entry is None:
                return None
            previous = entry.state
            if previous == "staged":
                entry.state = "redeemed"
            return previous

    def active_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries.values() if e.state == "staged")


_default_staging = StagingState()


def default_staging() -> StagingState:
    return _default_staging


def configure(root=None, interface=None, expiry_s=None) -> None:
    """Adjust the process-wide staging defaults."""
    if root is not None:
        _default_staging.root = Path(root)
    if interface is not None:
        _default_staging.interface = interface
    if expiry_s is not None:
        _default_staging.expiry_s = expiry_s


# --- staging (producer side) -------------------------------------------------

def dump_item(item: Any, method: str = "file", codec: str = "text-v1",
              staging: StagingState | None = None) -> Locator:
    """Stage a payload and return the Locator that redeems it.

    socket reaches between networked hosts; pipe works between processes
    on one UNIX-like host; file requires storage visible to all parties.
    """
    staging = staging or _default_staging
    if method in RESERVED_METHODS:
        raise UnsupportedMethod(f"method {method!r} is reserved but not implemented")
    if method not in METHODS:
        raise UnsupportedMethod(f"unknown transport method {method!r}")
    if method == "pipe" and not hasattr(os, "mkfifo"):
        raise UnsupportedMethod("pipe staging requires a FIFO-capable platform")

    data = get_codec(codec).encode(item)
    token = secrets.token_hex(16)

    if method == "file":
        path = staging._ensure_root() / f"{token}.blob"
        try:
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.rename(tmp, path)
        except OSError as exc:
            raise StagingFailed(f"cannot stage file payload: {exc}") from exc
        locator = Locator("file", str(path), codec, token, payload_bytes=len(data))
        staging.add(locator, release=lambda: os.unlink(path))
        return locator

    if method == "pipe":
        path = staging._ensure_root() / f"{token}.fifo"
        try:
            os.mkfifo(path)
        except OSError as exc:
            raise StagingFailed(f"cannot create FIFO: {exc}") from exc
        stop = threading.Event()

        def feed():
            try:
                # open() blocks until the consumer opens the read end
                with open(path, "wb") as fifo:
                    fifo.write(_LEN.pack(len(data)))
                    fifo.write(data)
            except OSError:
                pass
            finally:
                try:
                    os.unlink(path)
                except OSError:
                    pass

        threading.Thread(target=feed, name=f"flowpipe-pipe-{token[:8]}", daemon=True).start()
        locator = Locator("pipe", str(path), codec, token, payload_bytes=len(data))

        def release():
            stop.set()
            try:
                os.unlink(path)
            except OSError:
                pass
            # unblock the feeder's open() if nobody ever connected
            try:
                fd = os.open(str(path) + "", os.O_RDONLY | os.O_NONBLOCK)
                os.close(fd)
            except OSError:
                pass

        staging.add(locator, release=release)
        return locator

    # method == "socket": listen, single accept, send, close.
    try:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((staging.interface, 0))
        listener.listen(1)
    except OSError as exc:
        raise StagingFailed(f"cannot open staging socket: {exc}") from exc
    host, port = listener.getsockname()[:2]
    listener.settimeout(staging.expiry_s)

    def serve_once():
        try:
            conn, _ = listener.accept()
        except OSError:
            return
        finally:
            try:
                listener.close()
            except OSError:
                pass
        try:
            with conn:
                conn.sendall(_LEN.pack(len(data)))
                conn.sendall(data)
        except OSError:
            pass

    threading.Thread(target=serve_once, name=f"flowpipe-sock-{token[:8]}", daemon=True).start()
    locator = Locator("socket", f"{host}:{port}", codec, token, payload_bytes=len(data))
    staging.add(locator, release=listener.close)
    return locator


# --- redemption (consumer side) ------------------------------------------------

def load_item(locator: Locator | dict, staging: StagingState | None = None,
              timeout_s: float = 30.0) -> Any:
    """Redeem a Locator exactly once and release the staged resource."""
    staging = staging or _default_staging
    loc = locator_from_wire(locator) if not isinstance(locator, Locator) else locator
    if loc.method in RESERVED_METHODS:
        raise UnsupportedMethod(f"method {loc.method!r} is reserved but not implemented")
    if loc.method not in METHODS:
        raise UnsupportedMethod(f"unknown transport method {loc.method!r}")

    previous = staging.claim(loc.token)
    if previous == "redeemed":
        raise AlreadyRedeemed(f"locator {loc.token} was already redeemed")
    if previous == "expired":
        raise Expired(f"locator {loc.token} expired before redemption")

    # The claim (when this process staged the item) is not reverted on
    # transport failure: a one-shot resource that failed mid-transfer is
    # burned either way.
    try:
        data = _fetch(loc, timeout_s)
    except (AlreadyRedeemed, Expired, TransportError):
        raise
    except OSError as exc:
        raise TransportError(f"{loc.method} transfer failed: {exc}") from exc

    if loc.payload_bytes is not None and len(data) != loc.payload_bytes:
        raise TransportError(
            f"expected {loc.payload_bytes} bytes, received {len(data)}")
    return get_codec(loc.codec).decode(data)


def _read_framed(read, what: str) -> bytes:
    header = _read_exact(read, _LEN.size, what)
    (length,) = _LEN.unpack(header)
    return _read_exact(read, length, what)


def _read_exact(read, n: int, what: str) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = read(min(remaining, 1 << 20))
        if not chunk:
            raise TransportError(f"{what}: stream ended {remaining} bytes early")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def _fetch(loc: Locator, timeout_s: float) -> bytes:
    if loc.method == "file":
        path = Path(loc.address)
        claim = path.with_name(path.name + f".claim-{os.getpid()}-{secrets.token_hex(4)}")
        try:
            os.rename(path, claim)  # atomic: exactly one claimant wins
        except FileNotFoundError:
            raise AlreadyRedeemed(f"staged file {path} is gone (redeemed or expired)") from None
        try:
            return claim.read_bytes()
        finally:
            try:
                os.unlink(claim)
            except OSError:
                pass

    if loc.method == "pipe":
        try:
            fifo = open(loc.address, "rb")
        except FileNotFoundError:
            raise AlreadyRedeemed(f"FIFO {loc.address} is gone (redeemed or expired)") from None
        with fifo:
            return _read_framed(fifo.read, "pipe")

    # socket
    host, _, port = loc.address.rpartition(":")
    try:
        conn = socket.create_connection((host, int(port)), timeout=timeout_s)
    except (ConnectionRefusedError, socket.timeout, OSError) as exc:
        raise TransportError(f"cannot reach staged socket {loc.address}: {exc}") from exc
    with conn:
        conn.settimeout(timeout_s)
        return _read_framed(conn.recv, "socket")


# --- expiry -------------------------------------------------------------------

def reap_expired(staging: StagingState | None = None, now: float | None = None) -> int:
    """Release staged payloads older than the expiry window; returns the count."""
    staging = staging or _default_staging
    now = time.time() if now is None else now
    released = 0
    with staging._lock:
        for entry in staging._entries.values():
            if entry.state == "staged" and now - entry.created_at > staging.expiry_s:
                entry.state = "expired"
                entry.release()
                released += 1
    return released
