"""Telnet IAC stream codec and the refuse-everything banner grabber."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .machine import HandshakeMachine
from .ports import ProtocolError, Status

IAC = 255
DONT = 254
DO = 253
WONT = 252
WILL = 251
SB = 250
SE = 240

ECHO = 1
SGA = 3
TTYPE = 24
NAWS = 31

NEGOTIATION = (WILL, WONT, DO, DONT)


@dataclass(frozen=True)
class Data:
    data: bytes


@dataclass(frozen=True)
class Command:
    command: int  # any IAC command without an option byte (NOP, GA, ...)


@dataclass(frozen=True)
class Negotiate:
    verb: int  # WILL/WONT/DO/DONT
    option: int


@dataclass(frozen=True)
class Subnegotiation:
    option: int
    data: bytes


Event = Union[Data, Command, Negotiate, Subnegotiation]


def _escape(b: bytes) -> bytes:
    return b.replace(b"\xff", b"\xff\xff")


def encode(events: list[Event]) -> bytes:
    out = bytearray()
    for ev in events:
        if isinstance(ev, Data):
            out += _escape(ev.data)
        elif isinstance(ev, Negotiate):
            if ev.verb not in NEGOTIATION:
                raise ValueError(f"not a negotiation verb: {ev.verb}")
            out += bytes([IAC, ev.verb, ev.option])
        elif isinstance(ev, Subnegotiation):
            out += bytes([IAC, SB]) + _escape(bytes([ev.option])) + _escape(ev.data) + bytes([IAC, SE])
        elif isinstance(ev, Command):
            if ev.command in NEGOTIATION or ev.command in (SB, IAC):
                raise ValueError(f"command {ev.command} needs a dedicated event type")
            out += bytes([IAC, ev.command])
        else:
            raise TypeError(f"unknown telnet event {ev!r}")
    return bytes(out)


class TelnetParser:
    """Incremental IAC parser. Never raises; partial sequences wait for more input."""

    def __init__(self) -> None:
        self._pending = b""

    @property
    def pending(self) -> bytes:
        return self._pending

    def feed(self, data: bytes) -> list[Event]:
        buf = self._pending + data
        events: list[Event] = []
        text = bytearray()
        i, n = 0, len(buf)

        def flush():
            if text:
                events.append(Data(bytes(text)))
                text.clear()

        while i < n:
            b = buf[i]
            if b != IAC:
                text.append(b)
                i += 1
                continue
            if i + 1 >= n:
                break
            cmd = buf[i + 1]
            if cmd == IAC:
                text.append(IAC)
                i += 2
            elif cmd in NEGOTIATION:
                if i + 2 >= n:
                    break
                flush()
                events.append(Negotiate(cmd, buf[i + 2]))
                i += 3
            elif cmd == SB:
                if i + 2 >= n:
                    break
                option, body = buf[i + 2], i + 3
                if option == IAC:  # option 255 travels doubled
                    if i + 3 >= n:
                        break
                    if buf[i + 3] != IAC:
                        flush()
                        events.append(Command(SB))
                        i += 2
                        continue
                    body = i + 4
                end = self._find_se(buf, body)
                if end is None:
                    break
                payload, stop = end
                flush()
                events.append(Subnegotiation(option, payload))
                i = stop
            else:
                flush()
                events.append(Command(cmd))
                i += 2
        flush()
        self._pending = bytes(buf[i:])
        return events

    @staticmethod
    def _find_se(buf: bytes, j: int):
        """Locate the end of a subnegotiation whose payload starts at ``j``.

        Returns ``(unescaped payload, index after IAC SE)`` or None if the
        sequence is incomplete. A stray ``IAC x`` inside ends it leniently
        just before the IAC so the command is parsed normally.
        """
        payload = bytearray()
        while j < len(buf):
            if buf[j] == IAC:
                if j + 1 >= len(buf):
                    return None
                nxt = buf[j + 1]
                if nxt == SE:
                    return bytes(payload), j + 2
                if nxt == IAC:
                    payload.append(IAC)
                    j += 2
                    continue
                return bytes(payload), j
            payload.append(buf[j])
            j += 1
        return None


def decode(b: bytes) -> list[Event]:
    p = TelnetParser()
    events = p.feed(b)
    if p.pending:
        raise ProtocolError(f"truncated IAC sequence ({len(p.pending)} bytes pending)")
    return events


def refusal(ev: Negotiate) -> bytes:
    """DO -> WONT, WILL -> DONT; the negative verbs need no answer."""
    if ev.verb == DO:
        return bytes([IAC, WONT, ev.option])
    if ev.verb == WILL:
        return bytes([IAC, DONT, ev.option])
    return b""


class TelnetBannerMachine(HandshakeMachine):
    """Refuses every option and collects up to ``max_banner`` data bytes.

    The driver should read for ``read_window`` seconds; the banner is
    whatever arrived by then (or once the cap is hit).
    """

    def __init__(self, max_banner: int = 1024, window: float = 5.0) -> None:
        super().__init__()
        self.max_banner = max_banner
        self.read_window = window
        self._parser = TelnetParser()
        self.banner = bytearray()
        self.negotiations = 0

    def _initial_flight(self) -> bytes:
        return b""

    def _on_data(self, data: bytes) -> bytes:
        reply = bytearray()
        for ev in self._parser.feed(data):
            if isinstance(ev, Negotiate):
                self.negotiations += 1
                reply += refusal(ev)
            elif isinstance(ev, (Subnegotiation, Command)):
                self.negotiations += 1
            elif isinstance(ev, Data):
                room = self.max_banner - len(self.banner)
                self.banner += ev.data[:max(room, 0)]
        if len(self.banner) >= self.max_banner:
            self._settle()
        return bytes(reply)

    def _settle(self) -> None:
        if self.banner or self.negotiations:
            self._finish(Status.SUCCESS, evidence=bytes(self.banner).decode("utf-8", "replace"),
                         negotiations=self.negotiations)
        else:
            self._finish(Status.CONNECTED_NO_PROTOCOL)

    def _on_close(self) -> None:
        self._settle()

    def _on_timeout(self) -> None:
        self._settle()
