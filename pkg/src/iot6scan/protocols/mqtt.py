"""MQTT 3.1.1 CONNECT/CONNACK framing."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

from .machine import HandshakeMachine
from .ports import ProtocolError, Status

PROTOCOL_NAME = b"MQTT"
PROTOCOL_LEVEL = 4  # 3.1.1
CLEAN_SESSION = 0x02
MAX_REMAINING_LENGTH = 268_435_455


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


CONNACK_RETURN_CODES = {
    0: "accepted",
    1: "unacceptable protocol version",
    2: "identifier rejected",
    3: "server unavailable",
    4: "bad user name or password",
    5: "not authorized",
}


@dataclass(frozen=True)
class FixedHeader:
    packet_type: int
    flags: int
    remaining_length: int


def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise ValueError(f"remaining length out of range: {n}")
    out = bytearray()
    while True:
        digit, n = n % 128, n // 128
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def encode_fixed_header(h: FixedHeader) -> bytes:
    if not 0 <= h.packet_type <= 15 or not 0 <= h.flags <= 15:
        raise ValueError("packet type and flags are 4-bit fields")
    return bytes([(h.packet_type << 4) | h.flags]) + encode_remaining_length(h.remaining_length)


def decode_fixed_header(b: bytes) -> Optional[tuple[FixedHeader, int]]:
    """Return ``(header, header_size)``, or None if more bytes are needed."""
    if not b:
        return None
    mult, value = 1, 0
    for i in range(1, 5):
        if i >= len(b):
            return None
        byte = b[i]
        value += (byte & 0x7F) * mult
        if not byte & 0x80:
            if i > 1 and byte == 0:
                raise ProtocolError("non-minimal remaining length encoding")
            return FixedHeader(b[0] >> 4, b[0] & 0x0F, value), i + 1
        mult *= 128
    raise ProtocolError("remaining length longer than 4 bytes")


def _utf8(s: bytes) -> bytes:
    return struct.pack(">H", len(s)) + s


def encode_connect(client_id: str = "", keepalive: int = 60, clean_session: bool = True) -> bytes:
    body = _utf8(PROTOCOL_NAME) + bytes([PROTOCOL_LEVEL, CLEAN_SESSION if clean_session else 0])
    body += struct.pack(">H", keepalive) + _utf8(client_id.encode("utf-8"))
    return encode_fixed_header(FixedHeader(PacketType.CONNECT, 0, len(body))) + body


@dataclass
class Connect:
    protocol_name: str
    level: int
    flags: int
    keepalive: int
    client_id: str


def decode_connect(b: bytes) -> Connect:
    """Parse a CONNECT packet (server side). Will/username/password are ignored."""
    parsed = decode_fixed_header(b)
    if parsed is None:
        raise ProtocolError("truncated CONNECT")
    h, pos = parsed
    if h.packet_type != PacketType.CONNECT:
        raise ProtocolError(f"expected CONNECT, got type {h.packet_type}")
    body = b[pos:pos + h.remaining_length]
    if len(body) < h.remaining_length or len(body) < 10:
        raise ProtocolError("truncated CONNECT")
    (nlen,) = struct.unpack_from(">H", body, 0)
    name = body[2:2 + nlen]
    p = 2 + nlen
    if p + 6 > len(body):
        raise ProtocolError("truncated CONNECT")
    level, flags, keepalive, idlen = struct.unpack_from(">BBHH", body, p)
    cid = body[p + 6:p + 6 + idlen]
    return Connect(name.decode("utf-8", "replace"), level, flags, keepalive, cid.decode("utf-8", "replace"))


def encode_connack(return_code: int = 0, session_present: bool = False) -> bytes:
    return bytes([PacketType.CONNACK << 4, 2, 1 if session_present else 0, return_code])


class MqttConnectMachine(HandshakeMachine):
    """Sends CONNECT and waits for CONNACK; any return code means MQTT."""

    def __init__(self, client_id: str = "", keepalive: int = 60) -> None:
        super().__init__()
        self.client_id = client_id
        self.keepalive = keepalive
        self._buf = b""

    def _initial_flight(self) -> bytes:
        return encode_connect(self.client_id, self.keepalive)

    def _on_data(self, data: bytes) -> bytes:
        self._buf += data
        try:
            parsed = decode_fixed_header(self._buf)
        except ProtocolError as exc:
            self._finish(Status.PROTOCOL_ERROR, detail=str(exc))
            return b""
        if parsed is None:
            return b""
        h, pos = parsed
        if h.packet_type != PacketType.CONNACK or h.flags != 0 or h.remaining_length != 2:
            self._finish(Status.PROTOCOL_ERROR, detail=f"first packet is not CONNACK (byte 0x{self._buf[0]:02x})")
            return b""
        if len(self._buf) < pos + 2:
            return b""
        ack_flags, rc = self._buf[pos], self._buf[pos + 1]
        if ack_flags & 0xFE:
            self._finish(Status.PROTOCOL_ERROR, detail="reserved CONNACK flags set")
            return b""
        reason = CONNACK_RETURN_CODES.get(rc, "unknown")
        self._finish(Status.SUCCESS, evidence=f"CONNACK rc={rc} ({reason})",
                     return_code=rc, session_present=bool(ack_flags & 1))
        return b""

    def _on_close(self) -> None:
        if self._buf:
            self._finish(Status.PROTOCOL_ERROR, detail="connection closed mid-packet")
        else:
            self._finish(Status.CONNECTED_NO_PROTOCOL)
