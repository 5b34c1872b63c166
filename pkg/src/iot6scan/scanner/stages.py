"""The two measurement stages: open-port scan and application-layer scan."""
from __future__ import annotations

import asyncio
import datetime as dt
import enum
import ipaddress
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from ..protocols import (
    HandshakeOutcome,
    MachineOptions,
    ProtocolPort,
    Status,
    TlsInfo,
    TlsVersion,
    Transport,
    machine_for,
    probe_payload,
)
from ..protocols.machine import HandshakeMachine
from ..protocols.tls import PEER_REQUIRED_AUTH, PROTOCOL_VERSION, TIMEOUT, TlsClientSession
from ..trie import PrefixTrie
from .net import Backpressure, BlockedTarget, Channel, SocketLayer
from .ratelimit import TokenBucket

log = logging.getLogger(__name__)

DEFAULT_RATE = 1000.0
DEFAULT_PROBE_TIMEOUT = 5.0
DEFAULT_CONNECT_TIMEOUT = 5.0
DEFAULT_HANDSHAKE_TIMEOUT = 10.0


class Evidence(str, enum.Enum):
    SYN_ACK_OR_CONNECT = "SynAckOrConnect"
    UDP_REPLY = "UdpReply"
    NONE = "None"


@dataclass(frozen=True)
class ScanTarget:
    address: ipaddress.IPv6Address
    pp: ProtocolPort

    @property
    def key(self) -> str:
        return f"{self.address}\t{self.pp.key}"


@dataclass
class ProbeResult:
    target: ScanTarget
    open: bool
    rtt: float
    observed_at: dt.datetime
    evidence: Evidence = Evidence.NONE

    def __post_init__(self) -> None:
        if self.open != (self.evidence is not Evidence.NONE):
            raise ValueError("open must agree with evidence")


def utcnow() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def make_targets(addresses: Iterable, pps: Sequence[ProtocolPort]) -> list[ScanTarget]:
    return [ScanTarget(ipaddress.IPv6Address(a), pp) for a in addresses for pp in pps]


def _blocked_predicate(blocklist) -> Optional[Callable[[str], bool]]:
    if blocklist is None:
        return None
    trie = blocklist if isinstance(blocklist, PrefixTrie) else blocklist.trie()
    return lambda host: trie.covers(host)


def _dial_port(t: ScanTarget, port_map: Optional[dict]) -> int:
    if port_map:
        return port_map.get(t.pp.key, t.pp.port)
    return t.pp.port


def _install_guard(layer: SocketLayer, blocked: Optional[Callable[[str], bool]]) -> None:
    if blocked is None:
        return
    prev = layer.guard
    layer.guard = blocked if prev is None else (lambda h: prev(h) or blocked(h))


async def _probe_one(layer: SocketLayer, t: ScanTarget, port: int, timeout: float, seed: int) -> ProbeResult:
    host = str(t.address)
    loop = asyncio.get_running_loop()
    started = loop.time()
    evidence = Evidence.NONE
    try:
        if t.pp.transport is Transport.TCP:
            try:
                if await layer.tcp_connect(host, port, timeout):
                    evidence = Evidence.SYN_ACK_OR_CONNECT
            except (asyncio.TimeoutError, TimeoutError):
                pass
        else:
            try:
                reply = await layer.udp_probe(host, port, probe_payload(t.pp, host, seed), timeout)
            except ConnectionRefusedError:
                reply = None
            if reply:
                evidence = Evidence.UDP_REPLY
    except (Backpressure, BlockedTarget):
        raise
    except OSError as exc:
        log.debug("probe %s port %d: %s", host, port, exc)
    rtt = loop.time() - started
    return ProbeResult(t, evidence is not Evidence.NONE, rtt, utcnow(), evidence)


async def port_scan(
    targets: Sequence[ScanTarget],
    rate: float = DEFAULT_RATE,
    timeout: float = DEFAULT_PROBE_TIMEOUT,
    seed: int = 0,
    *,
    layer: Optional[SocketLayer] = None,
    concurrency: int = 256,
    burst: int = 1,
    blocklist=None,
    port_map: Optional[dict] = None,
    skip: Optional[set] = None,
    on_result: Optional[Callable[[ProbeResult], None]] = None,
) -> list[ProbeResult]:
    """Send exactly one probe per target, in seeded random order.

    TCP ports get a connect attempt; UDP ports get one CoAP or DTLS
    datagram. Targets covered by ``blocklist`` and those in ``skip``
    (resume keys) are not probed at all. Socket exhaustion slows the scan
    down instead of dropping targets.
    """
    if rate <= 0:
        raise ValueError("rate must be > 0")
    layer = layer if layer is not None else SocketLayer()
    blocked = _blocked_predicate(blocklist)
    _install_guard(layer, blocked)

    todo = [t for t in targets if not (skip and t.key in skip)]
    if blocked is not None:
        kept = [t for t in todo if not blocked(str(t.address))]
        if len(kept) != len(todo):
            log.info("port scan: %d blocklisted target(s) excluded", len(todo) - len(kept))
        todo = kept
    random.Random(seed).shuffle(todo)

    bucket = TokenBucket(rate, burst)
    queue: asyncio.Queue = asyncio.Queue()
    for t in todo:
        queue.put_nowait(t)
    results: list[ProbeResult] = []

    async def worker() -> None:
        while True:
            try:
                t = queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            while True:
                await bucket.acquire()
                try:
                    res = await _probe_one(layer, t, _dial_port(t, port_map), timeout, seed)
                    break
                except Backpressure:
                    await asyncio.sleep(0.05)
            results.append(res)
            if on_result is not None:
                on_result(res)

    await asyncio.gather(*(worker() for _ in range(max(1, min(concurrency, len(todo))))))
    log.info("port scan: %d probes, %d open", len(results), sum(r.open for r in results))
    return results


@dataclass
class AppScanConfig:
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT
    handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT
    machine: MachineOptions = field(default_factory=MachineOptions)
    port_map: dict = field(default_factory=dict)
    rate: Optional[float] = None


async def drive(machine: HandshakeMachine, ch: Channel, timeout: float) -> HandshakeOutcome:
    """Pump bytes between a channel and a machine until it has an outcome."""
    loop = asyncio.get_running_loop()
    budget = machine.read_window if machine.read_window is not None else timeout
    deadline = loop.time() + budget
    try:
        await ch.send(machine.start())
        while not machine.done:
            remaining = deadline - loop.time()
            if remaining <= 0:
                machine.timed_out()
                break
            try:
                data = await ch.recv(remaining)
            except (asyncio.TimeoutError, TimeoutError):
                machine.timed_out()
                break
            except (ConnectionResetError, BrokenPipeError):
                machine.connection_closed()
                break
            if not data:
                machine.connection_closed()
                break
            reply = machine.receive_data(data)
            if reply:
                try:
                    await ch.send(reply)
                except (ConnectionResetError, BrokenPipeError):
                    machine.connection_closed()
    except ConnectionRefusedError:
        if not machine.done:
            return HandshakeOutcome(Status.REFUSED, detail="port unreachable")
    except (ConnectionResetError, BrokenPipeError):
        machine.connection_closed()
    result = machine.result
    assert result is not None
    return result


async def handshake(
    target: ScanTarget, layer: SocketLayer, config: AppScanConfig
) -> HandshakeOutcome:
    host = str(target.address)
    port = _dial_port(target, config.port_map)
    machine = machine_for(target.pp, host, port, config.machine)
    empty = machine.transcript.hexdigest()  # nothing was exchanged yet
    try:
        if target.pp.transport is Transport.TCP:
            ch = await layer.open_stream(host, port, config.connect_timeout)
        else:
            ch = await layer.open_datagram(host, port)
    except ConnectionRefusedError:
        return HandshakeOutcome(Status.REFUSED, raw_transcript_digest=empty)
    except ConnectionResetError:
        return HandshakeOutcome(Status.CONNECTED_NO_PROTOCOL, raw_transcript_digest=empty, detail="reset")
    except (asyncio.TimeoutError, TimeoutError):
        return HandshakeOutcome(Status.TIMEOUT, raw_transcript_digest=empty, detail="connect")
    except BlockedTarget:
        raise
    except OSError as exc:
        return HandshakeOutcome(Status.REFUSED, raw_transcript_digest=empty, detail=str(exc))
    try:
        return await drive(machine, ch, config.handshake_timeout)
    finally:
        ch.close()


async def app_scan(
    open_targets: Sequence[ScanTarget],
    concurrency: int = 64,
    config: Optional[AppScanConfig] = None,
    *,
    layer: Optional[SocketLayer] = None,
    blocklist=None,
    skip: Optional[set] = None,
    on_result: Optional[Callable[[ScanTarget, HandshakeOutcome], None]] = None,
) -> list[tuple[ScanTarget, HandshakeOutcome]]:
    """One application-layer handshake per target; failures are recorded, not raised."""
    config = config or AppScanConfig()
    layer = layer if layer is not None else SocketLayer()
    blocked = _blocked_predicate(blocklist)
    _install_guard(layer, blocked)
    todo = [t for t in open_targets if not (skip and t.key in skip)]
    if blocked is not None:
        todo = [t for t in todo if not blocked(str(t.address))]
    bucket = TokenBucket(config.rate) if config.rate else None
    window = asyncio.Semaphore(max(1, concurrency))
    results: list[tuple[ScanTarget, HandshakeOutcome]] = []

    async def one(t: ScanTarget) -> None:
        async with window:
            if bucket is not None:
                await bucket.acquire()
            try:
                outcome = await handshake(t, layer, config)
            except BlockedTarget:
                raise
            except Exception as exc:  # a broken peer must not end the campaign
                log.exception("handshake with %s failed unexpectedly", t.key)
                outcome = HandshakeOutcome(Status.PROTOCOL_ERROR, detail=f"internal: {exc!r}")
            results.append((t, outcome))
            if on_result is not None:
                on_result(t, outcome)

    await asyncio.gather(*(one(t) for t in todo))
    return results


class TlsFailed(Exception):
    def __init__(self, reason: str, info: Optional[TlsInfo] = None) -> None:
        super().__init__(reason)
        self.reason = reason
        self.info = info or TlsInfo(failure=reason)


async def tls_capability_probe(
    target: ScanTarget,
    offered_max: TlsVersion = TlsVersion.TLS1_3,
    *,
    layer: Optional[SocketLayer] = None,
    port_map: Optional[dict] = None,
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT,
    handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT,
    sni: Optional[str] = None,
    auth_grace: float = 1.0,
) -> TlsInfo:
    """One TLS handshake offering up to ``offered_max``; raises :class:`TlsFailed`.

    When the server asked for a client certificate the probe lingers for
    ``auth_grace`` seconds, because TLS 1.3 servers reject the missing
    certificate only after the client finished its side.
    """
    if not target.pp.secured or target.pp.transport is not Transport.TCP:
        raise ValueError(f"{target.pp} is not TLS over TCP")
    layer = layer if layer is not None else SocketLayer()
    host = str(target.address)
    session = TlsClientSession(offered_max, sni=sni)
    try:
        ch = await layer.open_stream(host, _dial_port(target, port_map), connect_timeout)
    except (asyncio.TimeoutError, TimeoutError):
        raise TlsFailed(TIMEOUT) from None
    except OSError as exc:
        raise TlsFailed("refused" if isinstance(exc, ConnectionRefusedError) else "reset") from None
    loop = asyncio.get_running_loop()
    deadline = loop.time() + handshake_timeout
    try:
        await ch.send(session.initiate())
        while not session.established and not session.failed:
            remaining = deadline - loop.time()
            if remaining <= 0:
                raise TlsFailed(TIMEOUT, session.info)
            try:
                data = await ch.recv(remaining)
            except (asyncio.TimeoutError, TimeoutError):
                raise TlsFailed(TIMEOUT, session.info) from None
            except (ConnectionResetError, BrokenPipeError):
                data = b""
            if not data:
                session.eof()
                break
            wire, _ = session.receive(data)
            if wire:
                await ch.send(wire)
        if session.established and session.info.cert_requested:
            try:
                data = await ch.recv(auth_grace)
                wire, _ = session.receive(data) if data else (b"", b"")
                if not data or session.failed:
                    session.failed = session.info.failure = PEER_REQUIRED_AUTH
            except (asyncio.TimeoutError, TimeoutError):
                pass  # optional client auth: the server carried on
            except (ConnectionResetError, BrokenPipeError):
                session.failed = session.info.failure = PEER_REQUIRED_AUTH
    finally:
        ch.close()
    if session.failed:
        raise TlsFailed(session.failed, session.info)
    return session.info


TLS_RETRY_ORDER = (TlsVersion.TLS1_3, TlsVersion.TLS1_2, TlsVersion.TLS1_0)


async def detect_max_tls_version(target: ScanTarget, **kwargs) -> TlsInfo:
    """Highest negotiable version: offer 1.3, step down only on version failures."""
    last: Optional[TlsFailed] = None
    for offered in TLS_RETRY_ORDER:
        try:
            return await tls_capability_probe(target, offered, **kwargs)
        except TlsFailed as exc:
            last = exc
            if exc.reason != PROTOCOL_VERSION:
                raise
    assert last is not None
    raise last
