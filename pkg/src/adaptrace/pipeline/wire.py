"""Binary framing between collector and detector.

Every message is a 10-byte header followed by the payload::

    magic "PARI" | version u8 (=1) | type u8 | payload_len u32 BE

Integers in payloads are big-endian.  Strings are a u16 byte length followed
by UTF-8.  Feature-window payload::

    host str | pid u32 | window_start_ms u64 | window_end_ms u64 |
    n u32 | n x (feature_index u32, count u32)

Vocabulary payload: ``host str | n u32 | n x name str``.  Alert payload:
UTF-8 JSON object (also used to report a rejected connection as
``{"error": ...}``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

MAGIC = b"PARI"
VERSION = 1
MSG_VOCAB = 1
MSG_WINDOW = 2
MSG_ALERT = 3
MESSAGE_TYPES = (MSG_VOCAB, MSG_WINDOW, MSG_ALERT)

HEADER = struct.Struct(">4sBBI")
HEADER_SIZE = HEADER.size
_WINDOW_FIXED = struct.Struct(">IQQI")
_ENTRY = struct.Struct(">II")
U32_MAX = 0xFFFFFFFF


class ProtocolError(ValueError):
    pass


class BadMagicError(ProtocolError):
    pass


class BadVersionError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class UnknownTypeError(ProtocolError):
    pass


class PayloadError(ProtocolError):
    """Header is fine but the payload does not parse, or has trailing bytes."""


@dataclass(frozen=True)
class WireMessage:
    type: int
    payload: bytes
    magic: bytes = MAGIC
    version: int = VERSION


@dataclass(frozen=True)
class WindowPayload:
    host: str
    pid: int
    window_start_ms: int
    window_end_ms: int
    entries: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class VocabPayload:
    host: str
    names: tuple[str, ...]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("string longer than 65535 bytes")
    return struct.pack(">H", len(b)) + b


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    if off + 2 > len(buf):
        raise PayloadError("string length runs past payload")
    (n,) = struct.unpack_from(">H", buf, off)
    off += 2
    if off + n > len(buf):
        raise PayloadError("string runs past payload")
    try:
        return buf[off:off + n].decode("utf-8"), off + n
    except UnicodeDecodeError as exc:
        raise PayloadError(f"invalid UTF-8: {exc}") from None


# ---------------------------------------------------------------------------
# framing


def encode_message(m: WireMessage) -> bytes:
    if m.type not in MESSAGE_TYPES:
        raise UnknownTypeError(f"unknown message type {m.type}")
    if len(m.payload) > U32_MAX:
        raise ValueError("payload too large")
    return HEADER.pack(m.magic, m.version, m.type, len(m.payload)) + m.payload


def parse_header(head: bytes) -> tuple[int, int]:
    """Validate a 10-byte header; returns ``(type, payload_len)``."""
    if len(head) < HEADER_SIZE:
        k = min(len(head), 4)
        if head[:k] != MAGIC[:k]:
            raise BadMagicError(f"bad magic {head[:4]!r}")
        if len(head) > 4 and head[4] != VERSION:
            raise BadVersionError(f"unsupported version {head[4]}")
        raise TruncatedError(f"header needs {HEADER_SIZE} bytes, got {len(head)}")
    magic, version, mtype, length = HEADER.unpack_from(head)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if mtype not in MESSAGE_TYPES:
        raise UnknownTypeError(f"unknown message type {mtype}")
    return mtype, length


def read_message(buf: bytes, offset: int = 0) -> tuple[WireMessage, int]:
    """Decode the message starting at ``offset``; returns it and the next offset."""
    mtype, length = parse_header(buf[offset:offset + HEADER_SIZE])
    start = offset + HEADER_SIZE
    if start + length > len(buf):
        raise TruncatedError(f"payload needs {length} bytes, got {len(buf) - start}")
    return WireMessage(mtype, bytes(buf[start:start + length])), start + length


def decode_message(buf: bytes) -> WireMessage:
    """Decode exactly one message; trailing bytes are an error."""
    m, end = read_message(buf)
    if end != len(buf):
        raise PayloadError(f"{len(buf) - end} trailing bytes after message")
    return m


def iter_messages(buf: bytes) -> Iterator[WireMessage]:
    off = 0
    while off < len(buf):
        m, off = read_message(buf, off)
        yield m


# ---------------------------------------------------------------------------
# payloads


def encode_window(w: WindowPayload) -> bytes:
    parts = [_pack_str(w.host), _WINDOW_FIXED.pack(w.pid, w.window_start_ms, w.window_end_ms, len(w.entries))]
    parts.extend(_ENTRY.pack(i, c) for i, c in w.entries)
    return b"".join(parts)


def decode_window(payload: bytes) -> WindowPayload:
    host, off = _unpack_str(payload, 0)
    if off + _WINDOW_FIXED.size > len(payload):
        raise PayloadError("window header runs past payload")
    pid, start, end, n = _WINDOW_FIXED.unpack_from(payload, off)
    off += _WINDOW_FIXED.size
    if off + n * _ENTRY.size != len(payload):
        raise PayloadError(f"{n} entries do not fill {len(payload) - off} bytes")
    entries = tuple(_ENTRY.iter_unpack(payload[off:]))
    return WindowPayload(host, pid, start, end, entries)


def encode_vocab(v: VocabPayload) -> bytes:
    return b"".join([_pack_str(v.host), struct.pack(">I", len(v.names))] + [_pack_str(n) for n in v.names])


def decode_vocab(payload: bytes) -> VocabPayload:
    host, off = _unpack_str(payload, 0)
    if off + 4 > len(payload):
        raise PayloadError("vocabulary count runs past payload")
    (n,) = struct.unpack_from(">I", payload, off)
    off += 4
    names = []
    for _ in range(n):
        name, off = _unpack_str(payload, off)
        names.append(name)
    if off != len(payload):
        raise PayloadError("trailing bytes after vocabulary")
    return VocabPayload(host, tuple(names))


def encode_alert(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_alert(payload: bytes) -> dict:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PayloadError(f"bad alert payload: {exc}") from None
    if not isinstance(doc, dict):
        raise PayloadError("alert payload must be a JSON object")
    return doc


def window_message(host: str, pid: int, start_ms: int, end_ms: int, entries: Sequence[tuple[int, int]]) -> bytes:
    return encode_message(WireMessage(MSG_WINDOW, encode_window(WindowPayload(host, pid, start_ms, end_ms, tuple(entries)))))


def vocab_message(host: str, names: Sequence[str]) -> bytes:
    return encode_message(WireMessage(MSG_VOCAB, encode_vocab(VocabPayload(host, tuple(names)))))


def alert_message(record: dict) -> bytes:
    return encode_message(WireMessage(MSG_ALERT, encode_alert(record)))
