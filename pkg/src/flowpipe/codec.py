"""Payload codecs: one structured-text codec and one length-prefixed binary codec.

Supported payload domain: None, bool, int, float, str, bytes, list, and
dict with string keys, nested arbitrarily.  Anything else (tuples, sets,
arbitrary objects) raises CodecError -- payloads that cross process
boundaries must stay within this domain.

text-v1 is JSON; bytes values are carried as {"__b64__": "..."} and a
real dict that happens to contain a reserved key is wrapped in
{"__esc__": ...} so decode(encode(x)) == x holds for every supported value.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import Any

from .errors import CodecError

TEXT_V1 = "text-v1"
BIN_V1 = "bin-v1"

_RESERVED = ("__b64__", "__esc__")


def _check_domain(value: Any, depth: int = 0) -> None:
    if depth > 64:
        raise CodecError("payload nesting deeper than 64 levels")
    if value is None or isinstance(value, (bool, int, float, str, bytes)):
        return
    if isinstance(value, list):
        for item in value:
            _check_domain(item, depth + 1)
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CodecError(f"dict keys must be str, got {type(key).__name__}")
            _check_domain(item, depth + 1)
        return
    raise CodecError(f"unsupported payload type: {type(value).__name__}")


# --- text-v1 -----------------------------------------------------------------

def _text_tag(value):
    if isinstance(value, bytes):
        return {"__b64__": base64.b64encode(value).decode("ascii")}
    if isinstance(value, list):
        return [_text_tag(v) for v in value]
    if isinstance(value, dict):
        if any(k in value for k in _RESERVED):
            return {"__esc__": {k: _text_tag(v) for k, v in value.items()}}
        return {k: _text_tag(v) for k, v in value.items()}
    return value

def _text_untag(value):
    if isinstance(value, list):
        return [_text_untag(v) for v in value]
    if isinstance(value, dict):
        if set(value) == {"__b64__"}:
            return base64.b64decode(value["__b64__"])
        if set(value) == {"__esc__"}:
            inner = value["__esc__"]
            if not isinstance(inner, dict):
                raise CodecError("__esc__ must wrap an object")
            return {k: _text_untag(v) for k, v in inner.items()}
        return {k: _text_untag(v) for k, v in value.items()}
    return value


def _text_encode(value: Any) -> bytes:
    _check_domain(value)
    return json.dumps(_text_tag(value), ensure_ascii=False).encode("utf-8")


def _text_decode(data: bytes) -> Any:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"not valid {TEXT_V1} data: {exc}") from exc
    try:
        return _text_untag(doc)
    except RecursionError as exc:
        raise CodecError("payload nesting too deep") from exc


# --- bin-v1 -------------------------------------------------------------------
# Tagged, length-prefixed: 1 tag byte, then a type-specific body.  Lengths
# and counts are 32-bit big-endian unsigned.

_U32 = struct.Struct(">I")
_F64 = struct.Struct(">d")


def _bin_write(value: Any, out: bytearray) -> None:
    if value is None:
        out.append(ord("n"))
    elif value is True:
        out.append(ord("t"))
    elif value is False:
        out.append(ord("f"))
    elif isinstance(value, int):
        digits = str(value).encode("ascii")
        out.append(ord("i"))
        out += _U32.pack(len(digits)) + digits
    elif isinstance(value, float):
        out.append(ord("d"))
        out += _F64.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(ord("s"))
        out += _U32.pack(len(raw)) + raw
    elif isinstance(value, bytes):
        out.append(ord("b"))
        out += _U32.pack(len(value)) + value
    elif isinstance(value, list):
        out.append(ord("l"))
        out += _U32.pack(len(value))
        for item in value:
            _bin_write(item, out)
    elif isinstance(value, dict):
        out.append(ord("m"))
        out += _U32.pack(len(value))
        for key, item in value.items():
            raw = key.encode("utf-8")
            out += _U32.pack(len(raw)) + raw
            _bin_write(item, out)
    else:  # pragma: no cover - guarded by _check_domain
        raise CodecError(f"unsupported payload type: {type(value).__name__}")


class _BinReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CodecError("truncated bin-v1 data")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def value(self, depth: int = 0) -> Any:
        if depth > 64:
            raise CodecError("payload nesting deeper than 64 levels")
        tag = self.take(1)
        if tag == b"n":
            return None
        if tag == b"t":
            return True
        if tag == b"f":
            return False
        if tag == b"i":
            digits = self.take(self.u32())
            try:
                return int(digits.decode("ascii"))
            except (UnicodeDecodeError, ValueError) as exc:
                raise CodecError("malformed integer") from exc
        if tag == b"d":
            return _F64.unpack(self.take(8))[0]
        if tag == b"s":
            try:
                return self.take(self.u32()).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CodecError("malformed utf-8 string") from exc
        if tag == b"b":
            return self.take(self.u32())
        if tag == b"l":
            count = self.u32()
            return [self.value(depth + 1) for _ in range(count)]
        if tag == b"m":
            count = self.u32()
            result = {}
            for _ in range(count):
                try:
                    key = self.take(self.u32()).decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise CodecError("malformed utf-8 key") from exc
                result[key] = self.value(depth + 1)
            return result
        raise CodecError(f"unknown bin-v1 tag {tag!r}")


def _bin_encode(value: Any) -> bytes:
    _check_domain(value)
    out = bytearray()
    _bin_write(value, out)
    return bytes(out)


def _bin_decode(data: bytes) -> Any:
    reader = _BinReader(data)
    value = reader.value()
    if reader.pos != len(data):
        raise CodecError(f"{len(data) - reader.pos} trailing bytes after bin-v1 value")
    return value


class Codec:
    """A reversible payload <-> bytes mapping, addressed by id."""

    def __init__(self, codec_id: str, encode, decode):
        self.id = codec_id
        self.encode = encode
        self.decode = decode

    def __repr__(self):
        return f"Codec({self.id})"


_CODECS = {
    TEXT_V1: Codec(TEXT_V1, _text_encode, _text_decode),
    BIN_V1: Codec(BIN_V1, _bin_encode, _bin_decode),
}


def get_codec(codec_id: str) -> Codec:
    try:
        return _CODECS[codec_id]
    except KeyError:
        raise CodecError(f"unknown codec {codec_id!r}") from None


def codec_ids() -> list[str]:
    return list(_CODECS)
