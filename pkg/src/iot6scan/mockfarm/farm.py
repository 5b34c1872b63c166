"""Loopback responders for every scanned protocol-port.

The farm runs its own event loop in a background thread so that blocking
test code and CLI scans can talk to it. Responders reuse the codecs from
:mod:`iot6scan.protocols` in server role.
"""
from __future__ import annotations

import asyncio
import datetime as dt
import enum
import hashlib
import hmac
import ipaddress
import logging
import socket
import ssl
import struct
import tempfile
import threading
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from OpenSSL import SSL
from cryptography import x509

from ..protocols import Protocol, ProtocolPort, TlsVersion, Transport, by_name
from ..protocols import amqp, coap, mqtt, opcua, telnet, xmpp
from ..protocols.ports import ProtocolError
from .certs import DEFAULT_EVAL_TIME, CertProfile, IssuedCert, farm_root, make_cert

log = logging.getLogger(__name__)

READ_TIMEOUT = 10.0


class BehaviorKind(str, enum.Enum):
    NORMAL = "normal"
    PIN_TLS_VERSION = "pin_tls_version"
    REQUIRE_CLIENT_CERT = "require_client_cert"
    SERVE_CERT = "serve_cert"
    SILENT_ACCEPT = "silent_accept"
    RESET_ON_CONNECT = "reset_on_connect"
    ALIAS_ALL = "alias_all"


@dataclass(frozen=True)
class Behavior:
    kind: BehaviorKind = BehaviorKind.NORMAL
    tls_version: Optional[TlsVersion] = None
    cert_profile: CertProfile = CertProfile.VALID
    prefix: Optional[str] = None
    amqp_version: str = "0-9-1"

    @classmethod
    def normal(cls) -> "Behavior":
        return cls()

    @classmethod
    def pin_tls_version(cls, v) -> "Behavior":
        return cls(BehaviorKind.PIN_TLS_VERSION, tls_version=TlsVersion(v))

    @classmethod
    def require_client_cert(cls) -> "Behavior":
        return cls(BehaviorKind.REQUIRE_CLIENT_CERT)

    @classmethod
    def serve_cert(cls, profile) -> "Behavior":
        return cls(BehaviorKind.SERVE_CERT, cert_profile=CertProfile(profile))

    @classmethod
    def silent_accept(cls) -> "Behavior":
        return cls(BehaviorKind.SILENT_ACCEPT)

    @classmethod
    def reset_on_connect(cls) -> "Behavior":
        return cls(BehaviorKind.RESET_ON_CONNECT)

    @classmethod
    def alias_all(cls, prefix: str) -> "Behavior":
        return cls(BehaviorKind.ALIAS_ALL, prefix=str(ipaddress.IPv6Network(prefix, strict=False)))


@dataclass
class Listener:
    pp: ProtocolPort
    behavior: Behavior = field(default_factory=Behavior)
    address: str = "::1"
    port: int = 0  # 0 = ephemeral; the bound port is reported by the farm


@dataclass
class FarmConfig:
    listeners: list[Listener]
    seed: int = 0
    eval_time: dt.datetime = DEFAULT_EVAL_TIME
    allow_non_loopback: bool = False

    def validate(self) -> None:
        seen = set()
        for lst in self.listeners:
            if lst.behavior.kind is BehaviorKind.ALIAS_ALL:
                continue
            addr = ipaddress.IPv6Address(lst.address)
            if not addr.is_loopback and not self.allow_non_loopback:
                raise ValueError(f"refusing to bind non-loopback address {lst.address}")
            if lst.port:
                key = (str(addr), lst.pp.transport, lst.port)
                if key in seen:
                    raise ValueError(f"duplicate listener {lst.address} {lst.pp.transport.value}/{lst.port}")
                seen.add(key)
            else:
                key = (str(addr), lst.pp.key)
                if key in seen:
                    raise ValueError(f"duplicate listener {lst.address} {lst.pp.key}")
                seen.add(key)
            if lst.pp.transport is Transport.UDP or not lst.pp.secured:
                if lst.behavior.kind in (BehaviorKind.PIN_TLS_VERSION, BehaviorKind.REQUIRE_CLIENT_CERT) \
                        and not lst.pp.secured:
                    raise ValueError(f"{lst.behavior.kind.value} needs a secured listener, got {lst.pp}")


def all_protocols(behavior: Optional[Behavior] = None, address: str = "::1", seed: int = 0) -> FarmConfig:
    from ..protocols import CANONICAL

    return FarmConfig([Listener(pp, behavior or Behavior(), address) for pp in CANONICAL], seed=seed)


class FarmBindError(OSError):
    def __init__(self, listener: Listener, exc: Exception) -> None:
        super().__init__(f"cannot bind {listener.pp} on [{listener.address}]:{listener.port}: {exc}")
        self.listener = listener


# ---- streams ----------------------------------------------------------------

class _Stream:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.reader = reader
        self.writer = writer

    async def read(self, timeout: float = READ_TIMEOUT) -> bytes:
        try:
            return await asyncio.wait_for(self.reader.read(65536), timeout)
        except (asyncio.TimeoutError, ConnectionError):
            return b""

    async def write(self, data: bytes) -> None:
        if data:
            self.writer.write(data)
            await self.writer.drain()

    def close(self) -> None:
        self.writer.close()


class _TlsStream(_Stream):
    """Server-side TLS over stdlib SSLObject + memory BIOs."""

    def __init__(self, reader, writer, ctx: ssl.SSLContext) -> None:
        super().__init__(reader, writer)
        self._in = ssl.MemoryBIO()
        self._out = ssl.MemoryBIO()
        self._obj = ctx.wrap_bio(self._in, self._out, server_side=True)

    async def _flush(self) -> None:
        data = self._out.read()
        if data:
            self.writer.write(data)
            await self.writer.drain()

    async def _pump(self, timeout: float) -> bool:
        await self._flush()
        data = await super().read(timeout)
        if not data:
            return False
        self._in.write(data)
        return True

    async def handshake(self) -> bool:
        while True:
            try:
                self._obj.do_handshake()
                await self._flush()
                return True
            except ssl.SSLWantReadError:
                if not await self._pump(READ_TIMEOUT):
                    return False
            except (ssl.SSLError, OSError) as exc:
                log.debug("farm TLS handshake failed: %s", exc)
                try:
                    await self._flush()  # deliver the alert
                except OSError:
                    pass
                return False

    async def read(self, timeout: float = READ_TIMEOUT) -> bytes:
        while True:
            try:
                return self._obj.read(65536)
            except ssl.SSLWantReadError:
                if not await self._pump(timeout):
                    return b""
            except (ssl.SSLError, OSError):
                try:
                    await self._flush()
                except OSError:
                    pass
                return b""

    async def write(self, data: bytes) -> None:
        if data:
            self._obj.write(data)
            await self._flush()


# ---- protocol responders ----------------------------------------------------

async def _read_until(stream: _Stream, done, limit: int = 1 << 16) -> bytes:
    buf = b""
    while not done(buf) and len(buf) < limit:
        chunk = await stream.read()
        if not chunk:
            break
        buf += chunk
    return buf


def _mqtt_complete(buf: bytes) -> bool:
    try:
        parsed = mqtt.decode_fixed_header(buf)
    except ProtocolError:
        return True
    return parsed is not None and len(buf) >= parsed[1] + parsed[0].remaining_length


async def serve_mqtt(stream: _Stream, farm: "Farm", lst: Listener) -> None:
    buf = await _read_until(stream, _mqtt_complete)
    try:
        mqtt.decode_connect(buf)
    except ProtocolError:
        return
    await stream.write(mqtt.encode_connack(0))
    await stream.read(2.0)


async def serve_amqp(stream: _Stream, farm: "Farm", lst: Listener) -> None:
    hdr = await _read_until(stream, lambda b: len(b) >= 8)
    if hdr[:8] != amqp.HEADER_0_9_1 or lst.behavior.amqp_version == "1.0":
        await stream.write(amqp.HEADER_1_0 if lst.behavior.amqp_version == "1.0" else amqp.HEADER_0_9_1)
        return
    start = amqp.ConnectionStart(
        server_properties={
            "product": "MockMQ",
            "version": "3.12.0",
            "platform": "Python",
            "capabilities": {"publisher_confirms": True, "basic.nack": True},
        },
    )
    await stream.write(amqp.encode_connection_start(start))
    await stream.read(2.0)


async def serve_xmpp(stream: _Stream, farm: "Farm", lst: Listener) -> None:
    buf = await _read_until(stream, lambda b: b"<stream:stream" in b and b">" in b.split(b"<stream:stream", 1)[1])
    if b"<stream:stream" not in buf:
        return
    sid = hashlib.sha256(f"{farm.config.seed}|{lst.pp.key}".encode()).hexdigest()[:16]
    reply = xmpp.stream_header(from_jid="mockfarm.test", stream_id=sid)
    reply += xmpp.features("SCRAM-SHA-1", "PLAIN", starttls=not lst.pp.secured)
    await stream.write(reply)
    await stream.read(2.0)


async def serve_opcua(stream: _Stream, farm: "Farm", lst: Listener) -> None:
    def complete(b: bytes) -> bool:
        try:
            return opcua.split_message(b) is not None
        except ProtocolError:
            return True

    buf = await _read_until(stream, complete)
    try:
        msg = opcua.split_message(buf)
        if msg is None or msg[0] != b"HEL":
            raise ProtocolError("expected HEL")
        hello = opcua.decode_hello(msg[1])
    except ProtocolError:
        await stream.write(opcua.encode_error(opcua.ErrorMessage(0x807E0000, "expected HEL")))
        return
    if not opcua.valid_endpoint_url(hello.endpoint_url):
        await stream.write(opcua.encode_error(opcua.ErrorMessage(opcua.BAD_TCP_ENDPOINT_URL_INVALID,
                                                                 "endpoint url invalid")))
        return
    await stream.write(opcua.encode_ack(opcua.Acknowledge(0, 65535, 65535, 0, 0)))
    await stream.read(2.0)


async def serve_telnet(stream: _Stream, farm: "Farm", lst: Listener) -> None:
    await stream.write(telnet.encode([telnet.Negotiate(telnet.DO, telnet.ECHO),
                                      telnet.Data(b"\r\nmockfarm login: ")]))
    # hold the line open until the client hangs up
    while await stream.read(READ_TIMEOUT):
        pass


TCP_RESPONDERS = {
    Protocol.MQTT: serve_mqtt,
    Protocol.AMQP: serve_amqp,
    Protocol.XMPP: serve_xmpp,
    Protocol.OPCUA: serve_opcua,
    Protocol.TELNET: serve_telnet,
}

COAP_RESOURCES = b'</sensors/temp>;rt="temperature-c";if="sensor",</sensors/light>;rt="light-lux"'


def coap_response(request: bytes) -> Optional[bytes]:
    try:
        msg = coap.decode(request)
    except ProtocolError:
        return None
    if msg.mtype is coap.MessageType.CON and msg.is_empty:
        return coap.encode(coap.CoapMessage(coap.MessageType.RST, 0, msg.message_id))  # CoAP ping
    if not msg.is_request:
        return None
    rtype = coap.MessageType.ACK if msg.mtype is coap.MessageType.CON else coap.MessageType.NON
    if msg.code == coap.GET and msg.uri_path == ".well-known/core":
        return coap.encode(coap.CoapMessage(rtype, coap.CONTENT, msg.message_id, msg.token,
                                            [(coap.OPT_CONTENT_FORMAT, bytes([coap.CT_LINK_FORMAT]))],
                                            COAP_RESOURCES))
    return coap.encode(coap.CoapMessage(rtype, coap.NOT_FOUND, msg.message_id, msg.token))


class _CoapProtocol(asyncio.DatagramProtocol):
    def __init__(self, farm: "Farm", lst: Listener) -> None:
        self.farm, self.lst = farm, lst

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.farm._hit(self.lst)
        if self.lst.behavior.kind is BehaviorKind.SILENT_ACCEPT:
            return
        reply = coap_response(data)
        if reply:
            self.transport.sendto(reply, addr)


class _DtlsProtocol(asyncio.DatagramProtocol):
    """DTLS 1.2 server via OpenSSL memory BIOs, one connection per peer."""

    def __init__(self, farm: "Farm", lst: Listener, issued: IssuedCert) -> None:
        self.farm, self.lst = farm, lst
        self._secret = hashlib.sha256(f"cookie|{farm.config.seed}".encode()).digest()
        ctx = SSL.Context(SSL.DTLS_SERVER_METHOD)
        ctx.set_cipher_list(b"ALL:@SECLEVEL=0")
        ctx.use_certificate(x509.load_der_x509_certificate(issued.leaf))
        ctx.use_privatekey(issued.key)
        for der in issued.chain:
            ctx.add_extra_chain_cert(x509.load_der_x509_certificate(der))
        ctx.set_options(SSL.OP_COOKIE_EXCHANGE | SSL.OP_NO_TICKET)
        ctx.set_cookie_generate_callback(self._cookie)
        ctx.set_cookie_verify_callback(lambda conn, cookie: hmac.compare_digest(cookie, self._cookie(conn)))
        self._ctx = ctx
        self._peers: dict = {}

    def _cookie(self, conn) -> bytes:
        peer = conn.get_app_data()
        return hmac.new(self._secret, repr(peer).encode(), hashlib.sha256).digest()[:16]

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.farm._hit(self.lst)
        if self.lst.behavior.kind is BehaviorKind.SILENT_ACCEPT:
            return
        state = self._peers.get(addr)
        if state is None:
            conn = SSL.Connection(self._ctx, None)
            conn.set_app_data(addr)
            conn.set_accept_state()
            state = self._peers[addr] = [conn, False]
        conn = state[0]
        conn.bio_write(data)
        try:
            if not state[1]:
                conn.DTLSv1_listen()
                state[1] = True
            conn.do_handshake()
        except SSL.WantReadError:
            pass
        except SSL.Error as exc:
            log.debug("farm DTLS error from %s: %s", addr, exc)
            del self._peers[addr]
        while True:
            try:
                out = conn.bio_read(65536)
            except SSL.WantReadError:
                break
            if not out:
                break
            self.transport.sendto(out, addr)


# ---- the farm -----------------------------------------------------------------

_SSL_VERSIONS = {
    TlsVersion.TLS1_0: ssl.TLSVersion.TLSv1,
    TlsVersion.TLS1_1: ssl.TLSVersion.TLSv1_1,
    TlsVersion.TLS1_2: ssl.TLSVersion.TLSv1_2,
    TlsVersion.TLS1_3: ssl.TLSVersion.TLSv1_3,
}


class Farm:
    def __init__(self, config: FarmConfig) -> None:
        config.validate()
        self.config = config
        self.endpoints: dict[tuple[str, str], int] = {}
        self.certificates: dict[tuple[str, str], IssuedCert] = {}
        self._hits: Counter = Counter()
        self._lock = threading.Lock()
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._ready = threading.Event()
        self._error: Optional[BaseException] = None
        self._servers: list = []
        self._tasks: set = set()
        self._tmp = tempfile.TemporaryDirectory(prefix="iot6farm-")

    # -- lifecycle ----------------------------------------------------------
    def start(self) -> "Farm":
        self._thread = threading.Thread(target=self._run, name="mockfarm", daemon=True)
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            self._thread.join()
            raise self._error
        return self

    def _run(self) -> None:
        loop = self._loop = asyncio.new_event_loop()
        loop.set_exception_handler(lambda lp, ctx: log.debug("farm: %s", ctx.get("message")))
        try:
            loop.run_until_complete(self._setup())
        except BaseException as exc:  # reported to the starting thread
            self._error = exc
            loop.run_until_complete(self._teardown())
            loop.close()
            self._ready.set()
            return
        self._ready.set()
        try:
            loop.run_forever()
        finally:
            loop.run_until_complete(self._teardown())
            loop.close()

    async def _teardown(self) -> None:
        for srv in self._servers:
            srv.close()
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)

    def stop(self) -> None:
        if self._loop is not None and self._thread is not None and self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)
        self._tmp.cleanup()

    def __enter__(self) -> "Farm":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- counters -------------------------------------------------------------
    def _hit(self, lst: Listener) -> None:
        with self._lock:
            self._hits[(lst.address, lst.pp.key)] += 1

    @property
    def hits(self) -> Counter:
        with self._lock:
            return Counter(self._hits)

    def reset_hits(self) -> None:
        with self._lock:
            self._hits.clear()

    def port_map(self, address: str = "::1") -> dict[str, int]:
        return {key: port for (addr, key), port in self.endpoints.items() if addr == address}

    def alias_prober(self):
        """Answers for every address inside an AliasAll prefix (counted as a hit)."""
        nets = [(lst, ipaddress.IPv6Network(lst.behavior.prefix)) for lst in self.config.listeners
                if lst.behavior.kind is BehaviorKind.ALIAS_ALL]

        def probe(addr) -> bool:
            a = ipaddress.IPv6Address(addr)
            for lst, net in nets:
                if a in net:
                    self._hit(lst)
                    return True
            return False

        return probe

    # -- setup ----------------------------------------------------------------
    def _issued(self, lst: Listener) -> IssuedCert:
        profile = lst.behavior.cert_profile
        issued = make_cert(profile, self.config.seed, self.config.eval_time, host=f"{lst.pp.key}.mockfarm.test")
        self.certificates[(lst.address, lst.pp.key)] = issued
        return issued

    def _ssl_context(self, lst: Listener) -> ssl.SSLContext:
        issued = self._issued(lst)
        base = Path(self._tmp.name) / f"{lst.pp.key}-{abs(hash(lst.address))}"
        (base.with_suffix(".crt")).write_bytes(issued.chain_pem())
        (base.with_suffix(".key")).write_bytes(issued.key_pem)
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.set_ciphers("ALL:@SECLEVEL=0")
        ctx.options |= ssl.OP_NO_TICKET
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            ctx.minimum_version = ssl.TLSVersion.TLSv1
            ctx.maximum_version = ssl.TLSVersion.TLSv1_3
            if lst.behavior.kind is BehaviorKind.PIN_TLS_VERSION:
                v = _SSL_VERSIONS[lst.behavior.tls_version]
                ctx.minimum_version = ctx.maximum_version = v
        ctx.load_cert_chain(base.with_suffix(".crt"), base.with_suffix(".key"))
        if lst.behavior.kind is BehaviorKind.REQUIRE_CLIENT_CERT:
            ctx.verify_mode = ssl.CERT_REQUIRED
            ctx.load_verify_locations(cadata=farm_root(self.config.seed).pem.decode())
        return ctx

    async def _setup(self) -> None:
        loop = asyncio.get_running_loop()
        for lst in self.config.listeners:
            if lst.behavior.kind is BehaviorKind.ALIAS_ALL:
                continue
            try:
                if lst.pp.transport is Transport.TCP:
                    ctx = self._ssl_context(lst) if lst.pp.secured else None
                    srv = await asyncio.start_server(
                        self._tcp_handler(lst, ctx), host=lst.address, port=lst.port,
                        family=socket.AF_INET6, reuse_address=True,
                    )
                    port = srv.sockets[0].getsockname()[1]
                else:
                    if lst.pp.secured:
                        proto = _DtlsProtocol(self, lst, self._issued(lst))
                    else:
                        proto = _CoapProtocol(self, lst)
                    transport, _ = await loop.create_datagram_endpoint(
                        lambda p=proto: p, local_addr=(lst.address, lst.port), family=socket.AF_INET6,
                    )
                    srv = transport
                    port = transport.get_extra_info("sockname")[1]
            except OSError as exc:
                raise FarmBindError(lst, exc) from exc
            self._servers.append(srv)
            self.endpoints[(lst.address, lst.pp.key)] = port
            log.info("farm: %s on [%s]:%d (%s)", lst.pp, lst.address, port, lst.behavior.kind.value)

    def _tcp_handler(self, lst: Listener, ctx: Optional[ssl.SSLContext]):
        responder = TCP_RESPONDERS[lst.pp.protocol]

        async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            task = asyncio.current_task()
            self._tasks.add(task)
            self._hit(lst)
            try:
                kind = lst.behavior.kind
                if kind is BehaviorKind.RESET_ON_CONNECT:
                    sock = writer.get_extra_info("socket")
                    sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                    writer.transport.abort()
                    return
                stream: _Stream
                if ctx is not None:
                    stream = _TlsStream(reader, writer, ctx)
                    if not await stream.handshake():
                        return
                else:
                    stream = _Stream(reader, writer)
                if kind is BehaviorKind.SILENT_ACCEPT:
                    await stream.read(1.0)
                    return
                await responder(stream, self, lst)
            except (ConnectionError, asyncio.IncompleteReadError):
                pass
            except asyncio.CancelledError:
                pass
            finally:
                self._tasks.discard(task)
                try:
                    writer.close()
                except Exception:
                    pass

        return handle


def start_farm(c: FarmConfig) -> Farm:
    """Bind every listener and return the running farm (call ``stop()`` when done)."""
    return Farm(c).start()


def load_farm_config(path) -> FarmConfig:
    """Read a farm TOML file.

    ::

        seed = 7
        eval_time = "2024-06-01T00:00:00Z"

        [[listener]]
        protocol = "mqtts"          # key as in `iot6scan portscan --ports`
        address = "::1"
        port = 0                    # 0 = pick a free port
        behavior = "pin_tls_version"
        tls_version = "TLS1_2"
        cert_profile = "valid"
        prefix = "2001:db8::/64"    # alias_all only
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    listeners = []
    for item in raw.get("listener", []):
        kind = BehaviorKind(item.get("behavior", "normal"))
        behavior = Behavior(
            kind,
            tls_version=TlsVersion(item["tls_version"]) if item.get("tls_version") else None,
            cert_profile=CertProfile(item.get("cert_profile", "valid")),
            prefix=item.get("prefix"),
            amqp_version=item.get("amqp_version", "0-9-1"),
        )
        pp = by_name(item["protocol"]) if kind is not BehaviorKind.ALIAS_ALL or "protocol" in item else by_name("telnet")
        listeners.append(Listener(pp, behavior, item.get("address", "::1"), int(item.get("port", 0))))
    eval_time = raw.get("eval_time", DEFAULT_EVAL_TIME)
    if isinstance(eval_time, str):
        eval_time = dt.datetime.fromisoformat(eval_time.replace("Z", "+00:00"))
    if isinstance(eval_time, dt.datetime) and eval_time.tzinfo is None:
        eval_time = eval_time.replace(tzinfo=dt.timezone.utc)
    return FarmConfig(listeners, int(raw.get("seed", 0)), eval_time, bool(raw.get("allow_non_loopback", False)))
