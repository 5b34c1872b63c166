"""Socket layer used by both scan stages.

Every packet the scanner emits goes through one of these methods, which
makes the layer the single place to count probes, enforce the blocklist,
or swap in a simulated network for tests.
"""
from __future__ import annotations

import asyncio
import errno
import socket
from collections import Counter
from typing import Callable, Optional

_EXHAUSTION = {errno.EMFILE, errno.ENFILE, errno.ENOBUFS, errno.ENOMEM, errno.EAGAIN}


class Backpressure(Exception):
    """Local resources are exhausted; nothing was sent, retry later."""


class BlockedTarget(Exception):
    """Attempt to send to a blocklisted address."""


class Channel:
    async def send(self, data: bytes) -> None:
        raise NotImplementedError

    async def recv(self, timeout: float) -> bytes:
        """Next chunk (or datagram); ``b""`` on end of stream; TimeoutError on silence."""
        raise NotImplementedError

    def close(self) -> None:
        pass


class SocketLayer:
    """Real sockets. ``sent`` counts packets-first attempts per (address, port)."""

    def __init__(self, guard: Optional[Callable[[str], bool]] = None) -> None:
        self.sent: Counter = Counter()
        self.guard = guard

    def _check(self, host: str) -> None:
        if self.guard is not None and self.guard(host):
            raise BlockedTarget(host)

    def _record(self, host: str, port: int) -> None:
        self.sent[(host, port)] += 1

    def _socket(self, kind: int) -> socket.socket:
        try:
            s = socket.socket(socket.AF_INET6, kind)
        except OSError as exc:
            if exc.errno in _EXHAUSTION:
                raise Backpressure(str(exc)) from exc
            raise
        s.setblocking(False)
        return s

    async def tcp_connect(self, host: str, port: int, timeout: float) -> bool:
        """True if the handshake completed, False if refused; TimeoutError otherwise."""
        self._check(host)
        sock = self._socket(socket.SOCK_STREAM)
        try:
            self._record(host, port)
            try:
                await asyncio.wait_for(asyncio.get_running_loop().sock_connect(sock, (host, port)), timeout)
            except ConnectionRefusedError:
                return False
            except ConnectionResetError:
                return True  # established, then reset by the peer (a refusal would be ECONNREFUSED)
            except OSError as exc:
                if exc.errno in (errno.ENETUNREACH, errno.EHOSTUNREACH, errno.EADDRNOTAVAIL):
                    return False
                raise
            return True
        finally:
            sock.close()

    async def udp_probe(self, host: str, port: int, payload: bytes, timeout: float) -> Optional[bytes]:
        """Send one datagram and wait for one reply; None on silence."""
        ch = await self.open_datagram(host, port)
        try:
            await ch.send(payload)
            try:
                return await ch.recv(timeout)
            except (asyncio.TimeoutError, TimeoutError):
                return None
        finally:
            ch.close()

    async def open_stream(self, host: str, port: int, timeout: float) -> Channel:
        self._check(host)
        sock = self._socket(socket.SOCK_STREAM)
        self._record(host, port)
        try:
            await asyncio.wait_for(asyncio.get_running_loop().sock_connect(sock, (host, port)), timeout)
        except BaseException:
            sock.close()
            raise
        return _SockChannel(sock)

    async def open_datagram(self, host: str, port: int) -> Channel:
        self._check(host)
        sock = self._socket(socket.SOCK_DGRAM)
        try:
            sock.connect((host, port))
        except BaseException:
            sock.close()
            raise
        return _SockChannel(sock, self, (host, port))


class _SockChannel(Channel):
    def __init__(self, sock: socket.socket, layer: Optional[SocketLayer] = None, dest=None) -> None:
        self.sock = sock
        self._layer = layer
        self._dest = dest
        self._first = True

    async def send(self, data: bytes) -> None:
        if not data:
            return
        if self._layer is not None and self._first:
            self._layer._record(*self._dest)
        self._first = False
        await asyncio.get_running_loop().sock_sendall(self.sock, data)

    async def recv(self, timeout: float) -> bytes:
        return await asyncio.wait_for(asyncio.get_running_loop().sock_recv(self.sock, 65535), timeout)

    def close(self) -> None:
        self.sock.close()


class SimulatedNetwork(SocketLayer):
    """In-memory stand-in: ``open_tcp`` and ``udp_responders`` decide who answers.

    Only the port-scan primitives are simulated; application-layer streams
    need a real peer (use the mock farm for those).
    """

    def __init__(self, open_tcp=(), udp_responders=None, guard=None, clock=None) -> None:
        super().__init__(guard)
        self.open_tcp = set(open_tcp)
        self.udp_responders = dict(udp_responders or {})
        self.log: list = []
        self._clock = clock

    def _record(self, host: str, port: int) -> None:
        super()._record(host, port)
        if self._clock is not None:
            self.log.append((self._clock(), host, port))

    async def tcp_connect(self, host: str, port: int, timeout: float) -> bool:
        self._check(host)
        self._record(host, port)
        await asyncio.sleep(0)
        return (host, port) in self.open_tcp

    async def udp_probe(self, host: str, port: int, payload: bytes, timeout: float) -> Optional[bytes]:
        self._check(host)
        self._record(host, port)
        await asyncio.sleep(0)
        responder = self.udp_responders.get((host, port))
        return responder(payload) if responder else None

    async def open_stream(self, host, port, timeout):
        raise ConnectionRefusedError("simulated network has no stream peers")

    async def open_datagram(self, host, port):
        raise ConnectionRefusedError("simulated network has no datagram peers")
