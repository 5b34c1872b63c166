"""AMQP protocol headers and the 0-9-1 Connection.Start frame."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .machine import HandshakeMachine
from .ports import ProtocolError, Status

HEADER_0_9_1 = b"AMQP\x00\x00\x09\x01"
HEADER_1_0 = b"AMQP\x00\x01\x00\x00"
FRAME_METHOD = 1
FRAME_END = 0xCE
CONNECTION_CLASS = 10
START_METHOD = 10

# AMQP 1.0 protocol ids
AMQP10_IDS = {0: "amqp", 2: "tls", 3: "sasl"}


@dataclass
class ProtocolHeader:
    protocol_id: int
    major: int
    minor: int
    revision: int

    @property
    def version(self) -> str:
        if (self.protocol_id, self.major) == (0, 0):
            return f"0-{self.minor}-{self.revision}"
        return f"{self.major}.{self.minor}"


def parse_protocol_header(b: bytes) -> ProtocolHeader:
    if len(b) != 8 or not b.startswith(b"AMQP"):
        raise ProtocolError("not an AMQP protocol header")
    return ProtocolHeader(*b[4:8])


@dataclass
class ConnectionStart:
    version_major: int = 0
    version_minor: int = 9
    server_properties: dict = field(default_factory=dict)
    mechanisms: str = "PLAIN AMQPLAIN"
    locales: str = "en_US"


# ---- field tables ---------------------------------------------------------

def _shortstr(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 255:
        raise ValueError("shortstr too long")
    return bytes([len(raw)]) + raw


def _longstr(raw: bytes) -> bytes:
    return struct.pack(">I", len(raw)) + raw


def encode_field_value(v) -> bytes:
    if isinstance(v, bool):
        return b"t" + bytes([int(v)])
    if isinstance(v, int):
        return b"l" + struct.pack(">q", v)
    if isinstance(v, str):
        return b"S" + _longstr(v.encode("utf-8"))
    if isinstance(v, bytes):
        return b"x" + _longstr(v)
    if isinstance(v, dict):
        return b"F" + encode_field_table(v)
    raise TypeError(f"unsupported field type {type(v).__name__}")


def encode_field_table(table: dict) -> bytes:
    body = b"".join(_shortstr(k) + encode_field_value(v) for k, v in table.items())
    return struct.pack(">I", len(body)) + body


_FIXED = {"b": ">b", "B": ">B", "s": ">h", "u": ">H", "I": ">i", "i": ">I",
          "l": ">q", "L": ">Q", "f": ">f", "d": ">d"}


def _decode_value(b: bytes, pos: int):
    if pos >= len(b):
        raise ProtocolError("truncated field value")
    kind = chr(b[pos])
    pos += 1
    if kind == "t":
        return bool(b[pos]), pos + 1
    if kind in _FIXED:
        fmt = _FIXED[kind]
        size = struct.calcsize(fmt)
        if pos + size > len(b):
            raise ProtocolError("truncated field value")
        return struct.unpack_from(fmt, b, pos)[0], pos + size
    if kind in "Sx":
        if pos + 4 > len(b):
            raise ProtocolError("truncated long string")
        (n,) = struct.unpack_from(">I", b, pos)
        raw = b[pos + 4:pos + 4 + n]
        if len(raw) != n:
            raise ProtocolError("truncated long string")
        return (raw.decode("utf-8", "replace") if kind == "S" else raw), pos + 4 + n
    if kind == "F":
        return decode_field_table(b, pos)
    if kind == "V":
        return None, pos
    raise ProtocolError(f"unsupported field type {kind!r}")


def decode_field_table(b: bytes, pos: int = 0) -> tuple[dict, int]:
    if pos + 4 > len(b):
        raise ProtocolError("truncated field table")
    (n,) = struct.unpack_from(">I", b, pos)
    end = pos + 4 + n
    if end > len(b):
        raise ProtocolError("truncated field table")
    pos += 4
    out = {}
    while pos < end:
        klen = b[pos]
        key = b[pos + 1:pos + 1 + klen].decode("utf-8", "replace")
        out[key], pos = _decode_value(b, pos + 1 + klen)
    if pos != end:
        raise ProtocolError("field table overrun")
    return out, end


# ---- frames -----------------------------------------------------------------

def encode_method_frame(channel: int, payload: bytes) -> bytes:
    return struct.pack(">BHI", FRAME_METHOD, channel, len(payload)) + payload + bytes([FRAME_END])


def encode_connection_start(start: ConnectionStart) -> bytes:
    payload = struct.pack(">HHBB", CONNECTION_CLASS, START_METHOD, start.version_major, start.version_minor)
    payload += encode_field_table(start.server_properties)
    payload += _longstr(start.mechanisms.encode()) + _longstr(start.locales.encode())
    return encode_method_frame(0, payload)


def decode_connection_start(payload: bytes) -> ConnectionStart:
    if len(payload) < 6:
        raise ProtocolError("method payload too short")
    cls, meth, major, minor = struct.unpack_from(">HHBB", payload, 0)
    if (cls, meth) != (CONNECTION_CLASS, START_METHOD):
        raise ProtocolError(f"expected Connection.Start, got {cls}.{meth}")
    props, pos = decode_field_table(payload, 6)
    strings = []
    for _ in range(2):
        if pos + 4 > len(payload):
            raise ProtocolError("truncated Connection.Start")
        (n,) = struct.unpack_from(">I", payload, pos)
        strings.append(payload[pos + 4:pos + 4 + n].decode("utf-8", "replace"))
        pos += 4 + n
    return ConnectionStart(major, minor, props, *strings)


def split_frame(b: bytes) -> Optional[tuple[int, int, bytes, int]]:
    """``(type, channel, payload, consumed)`` or None when incomplete."""
    if len(b) < 7:
        return None
    ftype, channel, size = struct.unpack_from(">BHI", b, 0)
    if ftype not in (1, 2, 3, 8):
        raise ProtocolError(f"bad frame type {ftype}")
    if len(b) < 8 + size:
        return None
    if b[7 + size] != FRAME_END:
        raise ProtocolError("missing frame-end octet")
    return ftype, channel, bytes(b[7:7 + size]), 8 + size


class AmqpHandshakeMachine(HandshakeMachine):
    """Announces 0-9-1; accepts Connection.Start or a server protocol header."""

    def __init__(self) -> None:
        super().__init__()
        self._buf = b""

    def _initial_flight(self) -> bytes:
        return HEADER_0_9_1

    def _on_data(self, data: bytes) -> bytes:
        self._buf += data
        b = self._buf
        try:
            if b[:1] == b"A":
                if not b"AMQP".startswith(b[:4]):
                    raise ProtocolError("garbage reply")
                if len(b) < 8:
                    return b""
                hdr = parse_protocol_header(b[:8])
                fields = {"server_version": hdr.version}
                if hdr.major == 1:
                    fields["protocol_id"] = AMQP10_IDS.get(hdr.protocol_id, str(hdr.protocol_id))
                self._finish(Status.SUCCESS, evidence=f"protocol header {hdr.version}", **fields)
                return b""
            frame = split_frame(b)
            if frame is None:
                return b""
            ftype, channel, payload, _ = frame
            if ftype != FRAME_METHOD or channel != 0:
                raise ProtocolError("first frame is not a channel-0 method")
            start = decode_connection_start(payload)
        except ProtocolError as exc:
            self._finish(Status.PROTOCOL_ERROR, detail=str(exc))
            return b""
        props = start.server_properties
        product = props.get("product", "")
        version = f"0-{start.version_major}-{start.version_minor}"
        if (start.version_major, start.version_minor) == (0, 9):
            version = "0-9-1"
        self._finish(
            Status.SUCCESS,
            evidence=f"Connection.Start {product} {props.get('version', '')}".strip(),
            server_version=version,
            mechanisms=start.mechanisms,
            product=str(product),
        )
        return b""

    def _on_close(self) -> None:
        if self._buf:
            self._finish(Status.PROTOCOL_ERROR, detail="connection closed mid-frame")
        else:
            self._finish(Status.CONNECTED_NO_PROTOCOL)
