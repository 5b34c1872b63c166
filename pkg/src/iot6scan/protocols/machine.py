"""Common plumbing for the sans-IO handshake machines.

A machine never touches a socket. The driver calls :meth:`start` once,
sends what it returns, then feeds every received chunk to
:meth:`receive_data` and sends whatever comes back. End of stream and
read timeouts are reported with :meth:`connection_closed` and
:meth:`timed_out`. Once :attr:`done` is true, :attr:`outcome` holds the
result.
"""
from __future__ import annotations

import hashlib
from typing import Optional

from .ports import HandshakeOutcome, Status


class Transcript:
    """Running SHA-256 over direction-tagged, length-prefixed chunks."""

    def __init__(self) -> None:
        self._h = hashlib.sha256()

    def sent(self, data: bytes) -> None:
        if data:
            self._h.update(b">" + len(data).to_bytes(4, "big") + data)

    def received(self, data: bytes) -> None:
        if data:
            self._h.update(b"<" + len(data).to_bytes(4, "big") + data)

    def hexdigest(self) -> str:
        return self._h.hexdigest()


class HandshakeMachine:
    #: Driver hint: how long to wait for the next chunk, None = driver default.
    read_window: Optional[float] = None
    #: True for datagram protocols (each receive_data call is one datagram).
    datagram = False

    def __init__(self) -> None:
        self.transcript = Transcript()
        self.outcome: Optional[HandshakeOutcome] = None
        self._started = False

    @property
    def done(self) -> bool:
        return self.outcome is not None

    def start(self) -> bytes:
        if self._started:
            raise RuntimeError("machine already started")
        self._started = True
        out = self._initial_flight()
        self.transcript.sent(out)
        return out

    def receive_data(self, data: bytes) -> bytes:
        if self.done:
            return b""
        self.transcript.received(data)
        out = self._on_data(data)
        self.transcript.sent(out)
        return out

    def connection_closed(self) -> None:
        if not self.done:
            self._on_close()

    def timed_out(self) -> None:
        if not self.done:
            self._on_timeout()

    # -- hooks -------------------------------------------------------------
    def _initial_flight(self) -> bytes:
        raise NotImplementedError

    def _on_data(self, data: bytes) -> bytes:
        raise NotImplementedError

    def _on_close(self) -> None:
        self._finish(Status.CONNECTED_NO_PROTOCOL)

    def _on_timeout(self) -> None:
        self._finish(Status.TIMEOUT)

    def _finish(self, status: Status, evidence: Optional[str] = None, detail: Optional[str] = None, **fields) -> None:
        if self.outcome is None:
            self.outcome = HandshakeOutcome(
                status=status,
                banner_or_features=evidence,
                raw_transcript_digest="",
                detail=detail,
                fields=fields,
            )

    @property
    def result(self) -> Optional[HandshakeOutcome]:
        if self.outcome is not None:
            self.outcome.raw_transcript_digest = self.transcript.hexdigest()
        return self.outcome
