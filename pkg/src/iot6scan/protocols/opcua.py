"""OPC UA TCP connection protocol: HEL / ACK / ERR."""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass

from .machine import HandshakeMachine
from .ports import ProtocolError, Status

HEADER = struct.Struct("<3scI")
MIN_CHUNK = 8192
MAX_MESSAGE = 1 << 24

STATUS_CODES = {
    0x807D0000: "BadTcpServerTooBusy",
    0x807E0000: "BadTcpMessageTypeInvalid",
    0x807F0000: "BadTcpSecureChannelUnknown",
    0x80800000: "BadTcpMessageTooLarge",
    0x80810000: "BadTcpNotEnoughResources",
    0x80820000: "BadTcpInternalError",
    0x80830000: "BadTcpEndpointUrlInvalid",
    0x80BE0000: "BadProtocolVersionUnsupported",
}
BAD_TCP_ENDPOINT_URL_INVALID = 0x80830000

_URL = re.compile(r"^opc\.tcp://(\[[0-9A-Fa-f:.]+\]|[^\s:/\[\]]+):(\d{1,5})(/.*)?$")


@dataclass
class Hello:
    protocol_version: int = 0
    receive_buffer_size: int = 65535
    send_buffer_size: int = 65535
    max_message_size: int = 0
    max_chunk_count: int = 0
    endpoint_url: str = ""


@dataclass
class Acknowledge:
    protocol_version: int = 0
    receive_buffer_size: int = 65535
    send_buffer_size: int = 65535
    max_message_size: int = 0
    max_chunk_count: int = 0


@dataclass
class ErrorMessage:
    code: int
    reason: str = ""

    @property
    def name(self) -> str:
        return STATUS_CODES.get(self.code, f"0x{self.code:08X}")


def endpoint_url(address: str, port: int) -> str:
    host = f"[{address}]" if ":" in address else address
    return f"opc.tcp://{host}:{port}"


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<i", len(raw)) + raw


def _frame(kind: bytes, body: bytes) -> bytes:
    return HEADER.pack(kind, b"F", HEADER.size + len(body)) + body


def encode_hello(h: Hello) -> bytes:
    body = struct.pack("<5I", h.protocol_version, h.receive_buffer_size, h.send_buffer_size,
                       h.max_message_size, h.max_chunk_count) + _string(h.endpoint_url)
    return _frame(b"HEL", body)


def encode_ack(a: Acknowledge) -> bytes:
    return _frame(b"ACK", struct.pack("<5I", a.protocol_version, a.receive_buffer_size, a.send_buffer_size,
                                      a.max_message_size, a.max_chunk_count))


def encode_error(e: ErrorMessage) -> bytes:
    return _frame(b"ERR", struct.pack("<I", e.code) + _string(e.reason))


def split_message(b: bytes):
    """``(kind, body, consumed)`` or None when more bytes are needed."""
    if len(b) < HEADER.size:
        if b and not any(k.startswith(b[:3]) for k in (b"HEL", b"ACK", b"ERR", b"RHE", b"OPN", b"MSG", b"CLO")):
            raise ProtocolError("unknown message type")
        return None
    kind, chunk, size = HEADER.unpack_from(b, 0)
    if chunk != b"F":
        raise ProtocolError(f"unexpected chunk type {chunk!r}")
    if size < HEADER.size or size > MAX_MESSAGE:
        raise ProtocolError(f"bad message size {size}")
    if len(b) < size:
        return None
    return kind, bytes(b[HEADER.size:size]), size


def _read_string(body: bytes, pos: int) -> str:
    if pos + 4 > len(body):
        raise ProtocolError("truncated string")
    (n,) = struct.unpack_from("<i", body, pos)
    if n < 0:
        return ""
    if pos + 4 + n > len(body):
        raise ProtocolError("truncated string")
    return body[pos + 4:pos + 4 + n].decode("utf-8", "replace")


def decode_hello(body: bytes) -> Hello:
    if len(body) < 24:
        raise ProtocolError("HEL too short")
    return Hello(*struct.unpack_from("<5I", body, 0), _read_string(body, 20))


def decode_ack(body: bytes) -> Acknowledge:
    if len(body) != 20:
        raise ProtocolError("ACK body must be 20 bytes")
    return Acknowledge(*struct.unpack_from("<5I", body, 0))


def decode_error(body: bytes) -> ErrorMessage:
    if len(body) < 8:
        raise ProtocolError("ERR too short")
    (code,) = struct.unpack_from("<I", body, 0)
    return ErrorMessage(code, _read_string(body, 4))


def valid_endpoint_url(url: str) -> bool:
    m = _URL.match(url)
    return bool(m) and 0 < int(m.group(2)) < 65536


class OpcUaHelloMachine(HandshakeMachine):
    def __init__(self, endpoint_url: str) -> None:
        if not valid_endpoint_url(endpoint_url):
            raise ValueError(f"bad endpoint URL {endpoint_url!r}")
        super().__init__()
        self.endpoint_url = endpoint_url
        self._buf = b""

    def _initial_flight(self) -> bytes:
        return encode_hello(Hello(endpoint_url=self.endpoint_url))

    def _on_data(self, data: bytes) -> bytes:
        self._buf += data
        try:
            msg = split_message(self._buf)
            if msg is None:
                return b""
            kind, body, _ = msg
            if kind == b"ACK":
                ack = decode_ack(body)
                self._finish(Status.SUCCESS, evidence=f"ACK v{ack.protocol_version}",
                             protocol_version=ack.protocol_version,
                             receive_buffer_size=ack.receive_buffer_size,
                             send_buffer_size=ack.send_buffer_size)
            elif kind == b"ERR":
                err = decode_error(body)
                self._finish(Status.PROTOCOL_ERROR, evidence=err.reason, detail=err.name, error_code=err.code)
            else:
                raise ProtocolError(f"unexpected {kind!r} in reply to HEL")
        except ProtocolError as exc:
            self._finish(Status.PROTOCOL_ERROR, detail=str(exc))
        return b""

    def _on_close(self) -> None:
        if self._buf:
            self._finish(Status.PROTOCOL_ERROR, detail=f"truncated reply ({len(self._buf)} bytes)")
        else:
            self._finish(Status.CONNECTED_NO_PROTOCOL)

    def _on_timeout(self) -> None:
        if self._buf:
            self._finish(Status.PROTOCOL_ERROR, detail=f"truncated reply ({len(self._buf)} bytes)")
        else:
            self._finish(Status.TIMEOUT)
