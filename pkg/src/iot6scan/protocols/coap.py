"""CoAP message codec and discovery probe (RFC 7252 framing)."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .machine import HandshakeMachine
from .ports import ProtocolError, Status

COAP_VERSION = 1
PAYLOAD_MARKER = 0xFF

OPT_URI_PATH = 11
OPT_CONTENT_FORMAT = 12

GET = 0x01
CONTENT = 0x45  # 2.05
NOT_FOUND = 0x84  # 4.04

CT_LINK_FORMAT = 40


class MessageType(enum.IntEnum):
    CON = 0
    NON = 1
    ACK = 2
    RST = 3


def code_str(code: int) -> str:
    return f"{code >> 5}.{code & 0x1F:02d}"


@dataclass
class CoapMessage:
    mtype: MessageType
    code: int
    message_id: int
    token: bytes = b""
    options: list[tuple[int, bytes]] = field(default_factory=list)
    payload: bytes = b""

    @property
    def is_empty(self) -> bool:
        return self.code == 0

    @property
    def is_request(self) -> bool:
        return 1 <= self.code <= 31

    @property
    def is_response(self) -> bool:
        return 2 <= self.code >> 5 <= 5

    @property
    def is_ack(self) -> bool:
        return self.mtype is MessageType.ACK

    @property
    def is_reset(self) -> bool:
        return self.mtype is MessageType.RST

    def option_values(self, number: int) -> list[bytes]:
        return [v for n, v in self.options if n == number]

    @property
    def uri_path(self) -> str:
        return "/".join(v.decode("utf-8", "replace") for v in self.option_values(OPT_URI_PATH))


def _ext(value: int) -> tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    if value < 65805:
        return 14, struct.pack(">H", value - 269)
    raise ValueError(f"option delta/length too large: {value}")


def encode(msg: CoapMessage) -> bytes:
    if len(msg.token) > 8:
        raise ValueError("token longer than 8 bytes")
    if not 0 <= msg.message_id <= 0xFFFF:
        raise ValueError("message id out of range")
    out = bytearray(struct.pack(">BBH", (COAP_VERSION << 6) | (int(msg.mtype) << 4) | len(msg.token), msg.code, msg.message_id))
    out += msg.token
    prev = 0
    # stable sort keeps repeated options in their given order
    for number, value in sorted(msg.options, key=lambda o: o[0]):
        dn, dext = _ext(number - prev)
        ln, lext = _ext(len(value))
        out.append((dn << 4) | ln)
        out += dext + lext + value
        prev = number
    if msg.payload:
        out.append(PAYLOAD_MARKER)
        out += msg.payload
    return bytes(out)


def _read_ext(nibble: int, b: bytes, pos: int) -> tuple[int, int]:
    if nibble < 13:
        return nibble, pos
    if nibble == 13:
        if pos + 1 > len(b):
            raise ProtocolError("truncated option extension")
        return b[pos] + 13, pos + 1
    if nibble == 14:
        if pos + 2 > len(b):
            raise ProtocolError("truncated option extension")
        return struct.unpack_from(">H", b, pos)[0] + 269, pos + 2
    raise ProtocolError("reserved option nibble 15")


def decode(b: bytes) -> CoapMessage:
    """Parse one CoAP datagram; raises :class:`ProtocolError` on bad framing."""
    if len(b) < 4:
        raise ProtocolError("CoAP header needs 4 bytes")
    first, code, mid = struct.unpack_from(">BBH", b, 0)
    if first >> 6 != COAP_VERSION:
        raise ProtocolError(f"unsupported CoAP version {first >> 6}")
    tkl = first & 0x0F
    if tkl > 8:
        raise ProtocolError(f"token length {tkl} > 8")
    if 4 + tkl > len(b):
        raise ProtocolError("truncated token")
    token = bytes(b[4:4 + tkl])
    pos = 4 + tkl
    options = []
    number = 0
    payload = b""
    while pos < len(b):
        head = b[pos]
        pos += 1
        if head == PAYLOAD_MARKER:
            payload = bytes(b[pos:])
            if not payload:
                raise ProtocolError("payload marker followed by empty payload")
            break
        delta, pos = _read_ext(head >> 4, b, pos)
        length, pos = _read_ext(head & 0x0F, b, pos)
        if pos + length > len(b):
            raise ProtocolError("truncated option value")
        number += delta
        options.append((number, bytes(b[pos:pos + length])))
        pos += length
    return CoapMessage(MessageType(first >> 4 & 0x3), code, mid, token, options, payload)


def coap_encode_probe(message_id: int, token: bytes = b"") -> bytes:
    """Confirmable ``GET /.well-known/core``."""
    if len(token) > 8:
        raise ValueError("token longer than 8 bytes")
    msg = CoapMessage(
        MessageType.CON, GET, message_id, token,
        [(OPT_URI_PATH, b".well-known"), (OPT_URI_PATH, b"core")],
    )
    return encode(msg)


def coap_decode(b: bytes) -> CoapMessage:
    return decode(b)


class CoapDiscoveryMachine(HandshakeMachine):
    """Sends the discovery GET; any matching CoAP reply counts as success."""

    datagram = True

    def __init__(self, message_id: int = 0x1D6D, token: bytes = b"\x6b\x69") -> None:
        super().__init__()
        self.message_id = message_id
        self.token = token

    def _initial_flight(self) -> bytes:
        return coap_encode_probe(self.message_id, self.token)

    def _on_data(self, data: bytes) -> bytes:
        try:
            msg = decode(data)
        except ProtocolError as exc:
            self._finish(Status.PROTOCOL_ERROR, detail=str(exc))
            return b""
        matches = msg.message_id == self.message_id if msg.mtype in (MessageType.ACK, MessageType.RST) else msg.token == self.token
        if not matches:
            return b""  # unrelated datagram, keep waiting
        if msg.is_reset:
            self._finish(Status.SUCCESS, evidence="RST", code="0.00", mtype="RST")
            return b""
        if msg.is_ack and msg.is_empty:
            return b""  # separate response will follow
        reply = b""
        if msg.mtype is MessageType.CON:
            reply = encode(CoapMessage(MessageType.ACK, 0, msg.message_id))
        text = msg.payload.decode("utf-8", "replace") if msg.payload else ""
        self._finish(Status.SUCCESS, evidence=text, code=code_str(msg.code), mtype=msg.mtype.name)
        return reply
