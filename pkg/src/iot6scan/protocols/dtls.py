"""DTLS 1.2 ClientHello construction and server-flight parsing.

Only the unencrypted part of the handshake is covered: ClientHello,
HelloVerifyRequest, ServerHello, Certificate and ServerHelloDone. That is
enough to prove a DTLS endpoint exists, learn its version and capture
its certificate chain without key exchange.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .machine import HandshakeMachine
from .ports import ProtocolError, Status, TlsInfo, TlsVersion

DTLS1_2 = b"\xfe\xfd"
DTLS1_0 = b"\xfe\xff"

CT_ALERT = 21
CT_HANDSHAKE = 22

HT_CLIENT_HELLO = 1
HT_SERVER_HELLO = 2
HT_HELLO_VERIFY_REQUEST = 3
HT_CERTIFICATE = 11
HT_SERVER_KEY_EXCHANGE = 12
HT_CERTIFICATE_REQUEST = 13
HT_SERVER_HELLO_DONE = 14

RECORD_HEADER = struct.Struct(">B2sH6sH")  # type, version, epoch, seq48, length
HANDSHAKE_HEADER_LEN = 12

CIPHER_SUITES = (
    0xC02B,  # ECDHE_ECDSA_WITH_AES_128_GCM_SHA256
    0xC02F,  # ECDHE_RSA_WITH_AES_128_GCM_SHA256
    0xC0AE,  # ECDHE_ECDSA_WITH_AES_128_CCM_8
    0xC0AC,  # ECDHE_ECDSA_WITH_AES_128_CCM
    0xC023,  # ECDHE_ECDSA_WITH_AES_128_CBC_SHA256
    0xC027,  # ECDHE_RSA_WITH_AES_128_CBC_SHA256
    0xC00A,  # ECDHE_ECDSA_WITH_AES_256_CBC_SHA
    0xC014,  # ECDHE_RSA_WITH_AES_256_CBC_SHA
    0x009C,  # RSA_WITH_AES_128_GCM_SHA256
    0x002F,  # RSA_WITH_AES_128_CBC_SHA
    0x0035,  # RSA_WITH_AES_256_CBC_SHA
    0xC0A8,  # PSK_WITH_AES_128_CCM_8
)
SUPPORTED_GROUPS = (0x001D, 0x0017, 0x0018)  # x25519, secp256r1, secp384r1
SIGNATURE_ALGORITHMS = (0x0403, 0x0804, 0x0401, 0x0503, 0x0805, 0x0501, 0x0201, 0x0203)

ALERT_DESCRIPTIONS = {
    0: "close_notify", 10: "unexpected_message", 20: "bad_record_mac", 40: "handshake_failure",
    42: "bad_certificate", 47: "illegal_parameter", 48: "unknown_ca", 50: "decode_error",
    70: "protocol_version", 71: "insufficient_security", 80: "internal_error",
    86: "inappropriate_fallback", 112: "unrecognized_name", 116: "certificate_required",
}


def _u24(n: int) -> bytes:
    return n.to_bytes(3, "big")


def _ext(ext_type: int, body: bytes) -> bytes:
    return struct.pack(">HH", ext_type, len(body)) + body


def _extensions() -> bytes:
    groups = b"".join(struct.pack(">H", g) for g in SUPPORTED_GROUPS)
    sigs = b"".join(struct.pack(">H", s) for s in SIGNATURE_ALGORITHMS)
    return b"".join((
        _ext(0x000A, struct.pack(">H", len(groups)) + groups),
        _ext(0x000B, b"\x01\x00"),  # ec_point_formats: uncompressed
        _ext(0x000D, struct.pack(">H", len(sigs)) + sigs),
        _ext(0x0017, b""),  # extended_master_secret
        _ext(0xFF01, b"\x00"),  # renegotiation_info
    ))


def handshake_message(msg_type: int, body: bytes, message_seq: int) -> bytes:
    return bytes([msg_type]) + _u24(len(body)) + struct.pack(">H", message_seq) + _u24(0) + _u24(len(body)) + body


def record(content_type: int, fragment: bytes, sequence: int = 0, epoch: int = 0, version: bytes = DTLS1_2) -> bytes:
    return RECORD_HEADER.pack(content_type, version, epoch, sequence.to_bytes(6, "big"), len(fragment)) + fragment


def client_hello_body(random: bytes, cookie: bytes = b"") -> bytes:
    suites = b"".join(struct.pack(">H", s) for s in CIPHER_SUITES)
    ext = _extensions()
    return (
        DTLS1_2 + random
        + b"\x00"  # empty session id
        + bytes([len(cookie)]) + cookie
        + struct.pack(">H", len(suites)) + suites
        + b"\x01\x00"  # null compression only
        + struct.pack(">H", len(ext)) + ext
    )


def dtls_client_hello(random: bytes, cookie: Optional[bytes] = None, message_seq: Optional[int] = None) -> bytes:
    """One DTLS 1.2 record carrying a ClientHello.

    The first flight uses message and record sequence 0. Passing the cookie
    from a HelloVerifyRequest produces the retry flight, numbered 1 unless
    ``message_seq`` says otherwise.
    """
    if len(random) != 32:
        raise ValueError("ClientHello random must be exactly 32 bytes")
    if cookie is not None and len(cookie) > 255:
        raise ValueError("cookie longer than 255 bytes")
    seq = message_seq if message_seq is not None else (0 if cookie is None else 1)
    body = client_hello_body(random, cookie or b"")
    return record(CT_HANDSHAKE, handshake_message(HT_CLIENT_HELLO, body, seq), sequence=seq)


# ---- parsing ----------------------------------------------------------------

@dataclass
class Record:
    content_type: int
    version: bytes
    epoch: int
    sequence: int
    fragment: bytes


@dataclass
class HandshakeFragment:
    msg_type: int
    length: int
    message_seq: int
    offset: int
    data: bytes


def parse_records(datagram: bytes) -> list[Record]:
    out = []
    pos = 0
    while pos < len(datagram):
        if pos + RECORD_HEADER.size > len(datagram):
            raise ProtocolError("truncated DTLS record header")
        ctype, version, epoch, seq, length = RECORD_HEADER.unpack_from(datagram, pos)
        pos += RECORD_HEADER.size
        if version[0] != 0xFE:
            raise ProtocolError(f"not a DTLS record (version {version.hex()})")
        if pos + length > len(datagram):
            raise ProtocolError("truncated DTLS record")
        out.append(Record(ctype, version, epoch, int.from_bytes(seq, "big"), datagram[pos:pos + length]))
        pos += length
    return out


def parse_handshake_fragments(fragment: bytes) -> list[HandshakeFragment]:
    out = []
    pos = 0
    while pos < len(fragment):
        if pos + HANDSHAKE_HEADER_LEN > len(fragment):
            raise ProtocolError("truncated handshake header")
        msg_type = fragment[pos]
        length = int.from_bytes(fragment[pos + 1:pos + 4], "big")
        (mseq,) = struct.unpack_from(">H", fragment, pos + 4)
        off = int.from_bytes(fragment[pos + 6:pos + 9], "big")
        flen = int.from_bytes(fragment[pos + 9:pos + 12], "big")
        pos += HANDSHAKE_HEADER_LEN
        if pos + flen > len(fragment) or off + flen > length:
            raise ProtocolError("bad handshake fragment bounds")
        out.append(HandshakeFragment(msg_type, length, mseq, off, fragment[pos:pos + flen]))
        pos += flen
    return out


@dataclass
class ClientHello:
    version: bytes
    random: bytes
    session_id: bytes
    cookie: bytes
    cipher_suites: list[int]
    compression: bytes
    extensions: list[tuple[int, bytes]] = field(default_factory=list)


def parse_client_hello(body: bytes) -> ClientHello:
    """Server-side view of a ClientHello body (used by the mock responder)."""
    try:
        pos = 0
        version, random = body[0:2], body[2:34]
        pos = 34
        sid_len = body[pos]
        sid = body[pos + 1:pos + 1 + sid_len]
        pos += 1 + sid_len
        ck_len = body[pos]
        cookie = body[pos + 1:pos + 1 + ck_len]
        pos += 1 + ck_len
        (cs_len,) = struct.unpack_from(">H", body, pos)
        suites = [struct.unpack_from(">H", body, pos + 2 + i)[0] for i in range(0, cs_len, 2)]
        pos += 2 + cs_len
        cm_len = body[pos]
        comp = body[pos + 1:pos + 1 + cm_len]
        pos += 1 + cm_len
        exts = []
        if pos < len(body):
            (ext_total,) = struct.unpack_from(">H", body, pos)
            pos += 2
            end = pos + ext_total
            while pos < end:
                etype, elen = struct.unpack_from(">HH", body, pos)
                exts.append((etype, body[pos + 4:pos + 4 + elen]))
                pos += 4 + elen
    except (IndexError, struct.error) as exc:
        raise ProtocolError(f"malformed ClientHello: {exc}") from None
    if len(random) != 32:
        raise ProtocolError("malformed ClientHello: short random")
    return ClientHello(version, random, sid, cookie, suites, comp, exts)


def parse_hello_verify_request(body: bytes) -> tuple[bytes, bytes]:
    if len(body) < 3 or len(body) < 3 + body[2]:
        raise ProtocolError("truncated HelloVerifyRequest")
    return body[0:2], body[3:3 + body[2]]


def parse_server_hello(body: bytes) -> tuple[bytes, int]:
    """Return ``(version, cipher_suite)``."""
    if len(body) < 35:
        raise ProtocolError("truncated ServerHello")
    sid_len = body[34]
    pos = 35 + sid_len
    if pos + 3 > len(body):
        raise ProtocolError("truncated ServerHello")
    (suite,) = struct.unpack_from(">H", body, pos)
    return body[0:2], suite


def parse_certificate_list(body: bytes) -> list[bytes]:
    if len(body) < 3:
        raise ProtocolError("truncated Certificate")
    total = int.from_bytes(body[0:3], "big")
    if total + 3 > len(body):
        raise ProtocolError("truncated Certificate list")
    certs, pos = [], 3
    while pos < 3 + total:
        n = int.from_bytes(body[pos:pos + 3], "big")
        if pos + 3 + n > 3 + total:
            raise ProtocolError("certificate overruns list")
        certs.append(bytes(body[pos + 3:pos + 3 + n]))
        pos += 3 + n
    return certs


class _Reassembler:
    """Collects handshake fragments per message_seq until complete."""

    def __init__(self) -> None:
        self._parts: dict[int, tuple[int, int, bytearray, set]] = {}

    def add(self, frag: HandshakeFragment) -> Optional[tuple[int, bytes]]:
        msg_type, length, buf, got = self._parts.setdefault(
            frag.message_seq, (frag.msg_type, frag.length, bytearray(frag.length), set())
        )
        if msg_type != frag.msg_type or length != frag.length:
            raise ProtocolError("inconsistent handshake fragments")
        buf[frag.offset:frag.offset + len(frag.data)] = frag.data
        got.update(range(frag.offset, frag.offset + len(frag.data)))
        if len(got) == length:
            del self._parts[frag.message_seq]
            return msg_type, bytes(buf)
        return None


class DtlsHelloMachine(HandshakeMachine):
    """Runs the DTLS 1.2 hello exchange up to ServerHelloDone.

    A HelloVerifyRequest is answered once with the cookie echoed. Success
    means a DTLS 1.2 ServerHello arrived; the certificate chain, if the
    server sent one, is captured in :attr:`tls`.
    """

    datagram = True

    def __init__(self, random: bytes) -> None:
        super().__init__()
        self.random = random
        self.tls = TlsInfo()
        self._reasm = _Reassembler()
        self._cookie_sent = False
        self._server_hello = False
        self._next_seq = 0
        self._done_messages: set[int] = set()

    def _initial_flight(self) -> bytes:
        return dtls_client_hello(self.random)

    def _on_data(self, data: bytes) -> bytes:
        try:
            records = parse_records(data)
        except ProtocolError as exc:
            self._fail_protocol(str(exc))
            return b""
        out = b""
        for rec in records:
            if rec.content_type == CT_ALERT:
                desc = ALERT_DESCRIPTIONS.get(rec.fragment[1], str(rec.fragment[1])) if len(rec.fragment) >= 2 else "?"
                self._fail_tls(f"alert:{desc}")
                return b""
            if rec.content_type != CT_HANDSHAKE or rec.epoch != 0:
                continue
            try:
                for frag in parse_handshake_fragments(rec.fragment):
                    if frag.message_seq in self._done_messages:
                        continue  # retransmission
                    whole = self._reasm.add(frag)
                    if whole is None:
                        continue
                    self._done_messages.add(frag.message_seq)
                    out += self._on_message(*whole, version=rec.version)
                    if self.done:
                        return out
            except ProtocolError as exc:
                self._fail_protocol(str(exc))
                return b""
        return out

    def _on_message(self, msg_type: int, body: bytes, version: bytes) -> bytes:
        if msg_type == HT_HELLO_VERIFY_REQUEST:
            if self._cookie_sent:
                raise ProtocolError("second HelloVerifyRequest")
            _, cookie = parse_hello_verify_request(body)
            self._cookie_sent = True
            self._done_messages.clear()
            return dtls_client_hello(self.random, cookie)
        if msg_type == HT_SERVER_HELLO:
            ver, suite = parse_server_hello(body)
            if ver != DTLS1_2:
                self._fail_tls(f"unsupported server version {ver.hex()}")
                return b""
            self._server_hello = True
            self.tls.max_version = TlsVersion.DTLS1_2
            self._suite = suite
        elif msg_type == HT_CERTIFICATE and self._server_hello:
            self.tls.certificate_chain = parse_certificate_list(body)
        elif msg_type == HT_CERTIFICATE_REQUEST:
            self.tls.cert_requested = True
        elif msg_type == HT_SERVER_HELLO_DONE and self._server_hello:
            self._finish(Status.SUCCESS, evidence=f"DTLS1.2 suite 0x{self._suite:04x}",
                         cipher_suite=f"0x{self._suite:04x}", cookie_exchange=self._cookie_sent)
        return b""

    def _fail_tls(self, reason: str) -> None:
        self.tls.failure = reason
        self._finish(Status.TLS_FAILED, detail=reason)

    def _fail_protocol(self, reason: str) -> None:
        self._finish(Status.PROTOCOL_ERROR, detail=reason)

    def _on_close(self) -> None:
        self._settle("closed")

    def _on_timeout(self) -> None:
        self._settle("timeout")

    def _settle(self, why: str) -> None:
        if self._server_hello:
            # ServerHello seen but the flight never completed
            self._finish(Status.SUCCESS, evidence="DTLS1.2 (incomplete flight)",
                         cipher_suite=f"0x{self._suite:04x}", cookie_exchange=self._cookie_sent)
        elif why == "timeout":
            self._finish(Status.TIMEOUT)
        else:
            self._finish(Status.CONNECTED_NO_PROTOCOL)

    @property
    def result(self):
        out = super().result
        if out is not None:
            out.tls = self.tls
        return out
