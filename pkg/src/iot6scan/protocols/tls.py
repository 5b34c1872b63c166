"""Sans-IO TLS client session and a wrapper that runs any machine over it.

The session is an OpenSSL engine fed through memory BIOs: wire bytes go in,
wire bytes come out, so the scanner owns all socket handling. Certificate
verification is disabled on purpose: the handshake must complete for
expired or self-signed certificates, which are judged later in certlab.
"""
from __future__ import annotations

from typing import Optional

from OpenSSL import SSL, crypto

from .machine import HandshakeMachine
from .ports import HandshakeOutcome, Status, TlsInfo, TlsVersion

PEER_REQUIRED_AUTH = "peer-required-auth"
PROTOCOL_VERSION = "protocol-version"
HANDSHAKE_FAILURE = "handshake-failure"
ALERT = "alert"
EOF = "eof"
RESET = "reset"
TIMEOUT = "timeout"
OTHER = "other"

_OPENSSL_VERSION = {
    TlsVersion.TLS1_0: SSL.TLS1_VERSION,
    TlsVersion.TLS1_1: SSL.TLS1_1_VERSION,
    TlsVersion.TLS1_2: SSL.TLS1_2_VERSION,
    TlsVersion.TLS1_3: SSL.TLS1_3_VERSION,
}
_VERSION_NAMES = {
    "TLSv1": TlsVersion.TLS1_0,
    "TLSv1.1": TlsVersion.TLS1_1,
    "TLSv1.2": TlsVersion.TLS1_2,
    "TLSv1.3": TlsVersion.TLS1_3,
}
_VERSION_HINTS = ("unsupported protocol", "protocol version", "no protocols available",
                  "wrong version number", "version too low", "tlsv1 alert protocol version",
                  "unsupported_protocol")


def classify_tls_error(message: str, cert_requested: bool) -> str:
    m = message.lower()
    if "certificate required" in m:
        return PEER_REQUIRED_AUTH
    if cert_requested and ("handshake failure" in m or "bad certificate" in m or "eof" in m
                           or "reset" in m or "alert" in m):
        return PEER_REQUIRED_AUTH
    if any(h in m for h in _VERSION_HINTS):
        return PROTOCOL_VERSION
    if "handshake failure" in m:
        return HANDSHAKE_FAILURE
    if "alert" in m:
        return ALERT
    if "eof" in m:
        return EOF
    if "reset" in m:
        return RESET
    return OTHER


class TlsClientSession:
    def __init__(
        self,
        offered_max: TlsVersion = TlsVersion.TLS1_3,
        offered_min: TlsVersion = TlsVersion.TLS1_0,
        sni: Optional[str] = None,
    ) -> None:
        if offered_max not in _OPENSSL_VERSION or offered_min not in _OPENSSL_VERSION:
            raise ValueError("TLS session supports TLS 1.0-1.3 only")
        ctx = SSL.Context(SSL.TLS_CLIENT_METHOD)
        ctx.set_min_proto_version(_OPENSSL_VERSION[offered_min])
        ctx.set_max_proto_version(_OPENSSL_VERSION[offered_max])
        # legacy versions are only reachable at security level 0
        ctx.set_cipher_list(b"ALL:@SECLEVEL=0")
        ctx.set_verify(SSL.VERIFY_NONE)
        ctx.set_info_callback(self._info)
        self._conn = SSL.Connection(ctx, None)
        self._conn.set_connect_state()
        if sni:
            self._conn.set_tlsext_host_name(sni.encode("idna"))
        self.info = TlsInfo(sni_sent=sni)
        self.established = False
        self.failed: Optional[str] = None
        self.error_text = ""

    def _info(self, conn, where, ret) -> None:
        state = conn.get_state_string()
        if b"certificate request" in state:
            self.info.cert_requested = True

    def _drain(self) -> bytes:
        out = bytearray()
        while True:
            try:
                chunk = self._conn.bio_read(65536)
            except SSL.WantReadError:
                break
            if not chunk:
                break
            out += chunk
        return bytes(out)

    def _fail(self, exc: Exception) -> None:
        self.error_text = str(exc) or type(exc).__name__
        self.failed = classify_tls_error(self.error_text, self.info.cert_requested)
        self.info.failure = self.failed

    def _capture(self) -> None:
        self.info.max_version = _VERSION_NAMES.get(self._conn.get_protocol_version_name())
        chain = self._conn.get_peer_cert_chain() or []
        if chain:
            self.info.certificate_chain = [crypto.dump_certificate(crypto.FILETYPE_ASN1, c) for c in chain]
        else:
            leaf = self._conn.get_peer_certificate()
            if leaf is not None:
                self.info.certificate_chain = [crypto.dump_certificate(crypto.FILETYPE_ASN1, leaf)]

    def _step(self) -> None:
        if self.established or self.failed:
            return
        try:
            self._conn.do_handshake()
        except SSL.WantReadError:
            return
        except (SSL.Error, SSL.SysCallError, SSL.ZeroReturnError) as exc:
            self._fail(exc)
            return
        self.established = True
        self._capture()

    def initiate(self) -> bytes:
        self._step()
        return self._drain()

    def receive(self, data: bytes) -> tuple[bytes, bytes]:
        """Feed wire bytes; return ``(wire bytes to send, decrypted plaintext)``."""
        if self.failed:
            return b"", b""
        self._conn.bio_write(data)
        self._step()
        plain = bytearray()
        if self.established:
            while True:
                try:
                    chunk = self._conn.recv(65536)
                except SSL.WantReadError:
                    break
                except SSL.ZeroReturnError:
                    break
                except (SSL.Error, SSL.SysCallError) as exc:
                    self._fail(exc)
                    break
                if not chunk:
                    break
                plain += chunk
        return self._drain(), bytes(plain)

    def send(self, plaintext: bytes) -> bytes:
        if not plaintext or not self.established or self.failed:
            return b""
        self._conn.sendall(plaintext)
        return self._drain()

    def eof(self) -> None:
        if not self.established and not self.failed:
            self._fail(ConnectionError("unexpected eof during handshake"))


class SecuredMachine(HandshakeMachine):
    """Runs ``inner`` on top of a TLS session.

    Failures before the inner protocol gets its answer become TlsFailed with
    the reason class in ``detail``; once the inner machine has finished its
    outcome is kept and annotated with the session's TlsInfo.
    """

    def __init__(self, inner: HandshakeMachine, session: TlsClientSession) -> None:
        super().__init__()
        self.inner = inner
        self.session = session
        self.read_window = inner.read_window

    def _initial_flight(self) -> bytes:
        out = self.session.initiate()
        if self.session.failed:
            self._tls_failed()
        return out

    def _on_data(self, data: bytes) -> bytes:
        was_up = self.session.established
        wire, plain = self.session.receive(data)
        if not was_up and self.session.established:
            wire += self.session.send(self.inner.start())
        if plain:
            wire += self.session.send(self.inner.receive_data(plain))
        if self.session.failed and not self.inner.done:
            self._tls_failed()
        elif self.inner.done:
            self._adopt()
        return wire

    def _tls_failed(self) -> None:
        self._finish(Status.TLS_FAILED, detail=self.session.failed,
                     tls_error=self.session.error_text)

    def _adopt(self) -> None:
        inner = self.inner.result
        assert inner is not None
        self.outcome = HandshakeOutcome(inner.status, inner.banner_or_features, None, "", inner.detail, dict(inner.fields))

    def _on_close(self) -> None:
        if not self.session.established:
            self.session.eof()
            self._tls_failed()
        elif self.session.info.cert_requested and not self.inner.done:
            # TLS 1.3 servers reject the missing client certificate after
            # the client already considers the handshake finished.
            self.session.failed = self.session.info.failure = PEER_REQUIRED_AUTH
            self._tls_failed()
        else:
            self.inner.connection_closed()
            self._adopt()

    def _on_timeout(self) -> None:
        if not self.session.established:
            self.session.failed = self.session.info.failure = TIMEOUT
            self._tls_failed()
        else:
            self.inner.timed_out()
            self._adopt()

    @property
    def result(self):
        out = super().result
        if out is not None:
            out.tls = self.session.info
        return out
