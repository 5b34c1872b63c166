"""Protocol/port catalogue and handshake result types."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional


class Protocol(str, enum.Enum):
    COAP = "CoAP"
    MQTT = "MQTT"
    XMPP = "XMPP"
    AMQP = "AMQP"
    OPCUA = "OPCUA"
    TELNET = "Telnet"


class Transport(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"


@dataclass(frozen=True)
class ProtocolPort:
    protocol: Protocol
    port: int
    secured: bool
    transport: Transport

    def __post_init__(self) -> None:
        if not 0 < self.port < 65536:
            raise ValueError(f"port out of range: {self.port}")
        if self.protocol is Protocol.TELNET and self.secured:
            raise ValueError("there is no secured Telnet")

    @property
    def label(self) -> str:
        """Display name, e.g. ``MQTTs``; non-standard ports get ``@port``."""
        name = self.protocol.value + ("s" if self.secured else "")
        if self not in CANONICAL_SET:
            name += f"@{self.port}"
        return name

    @property
    def key(self) -> str:
        return self.label.lower()

    def sort_key(self) -> tuple:
        try:
            return (0, CANONICAL.index(self), 0)
        except ValueError:
            return (1, list(Protocol).index(self.protocol), self.port)

    def __str__(self) -> str:
        return self.label


def _pp(protocol: Protocol, port: int, secured: bool, transport: Transport) -> ProtocolPort:
    return ProtocolPort(protocol, port, secured, transport)


# Standard ports only; each protocol in plain then secured flavour.
CANONICAL: tuple[ProtocolPort, ...] = (
    _pp(Protocol.COAP, 5683, False, Transport.UDP),
    _pp(Protocol.COAP, 5684, True, Transport.UDP),
    _pp(Protocol.MQTT, 1883, False, Transport.TCP),
    _pp(Protocol.MQTT, 8883, True, Transport.TCP),
    _pp(Protocol.XMPP, 5222, False, Transport.TCP),
    _pp(Protocol.XMPP, 5223, True, Transport.TCP),
    _pp(Protocol.AMQP, 5672, False, Transport.TCP),
    _pp(Protocol.AMQP, 5671, True, Transport.TCP),
    _pp(Protocol.OPCUA, 4840, False, Transport.TCP),
    _pp(Protocol.OPCUA, 4843, True, Transport.TCP),
    _pp(Protocol.TELNET, 23, False, Transport.TCP),
)
CANONICAL_SET = frozenset(CANONICAL)
BY_KEY = {pp.protocol.value.lower() + ("s" if pp.secured else ""): pp for pp in CANONICAL}


def by_name(name: str) -> ProtocolPort:
    """Look up a canonical protocol-port by key (``mqtt``, ``mqtts``, ``opcuas``...).

    ``name@port`` yields the same protocol on a non-standard port.
    """
    base, _, port = name.strip().lower().partition("@")
    try:
        pp = BY_KEY[base]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}; expected one of {sorted(BY_KEY)}") from None
    if port:
        pp = ProtocolPort(pp.protocol, int(port), pp.secured, pp.transport)
    return pp


def parse_ports(spec: str) -> list[ProtocolPort]:
    if spec.strip().lower() in ("", "all"):
        return list(CANONICAL)
    return [by_name(p) for p in spec.split(",") if p.strip()]


class Status(str, enum.Enum):
    SUCCESS = "Success"
    CONNECTED_NO_PROTOCOL = "ConnectedNoProtocol"
    TLS_FAILED = "TlsFailed"
    TIMEOUT = "Timeout"
    REFUSED = "Refused"
    PROTOCOL_ERROR = "ProtocolError"


class TlsVersion(str, enum.Enum):
    TLS1_0 = "TLS1_0"
    TLS1_1 = "TLS1_1"
    TLS1_2 = "TLS1_2"
    TLS1_3 = "TLS1_3"
    DTLS1_2 = "DTLS1_2"


TLS_STREAM_VERSIONS = (TlsVersion.TLS1_0, TlsVersion.TLS1_1, TlsVersion.TLS1_2, TlsVersion.TLS1_3)


@dataclass
class TlsInfo:
    max_version: Optional[TlsVersion] = None
    certificate_chain: list[bytes] = field(default_factory=list)
    sni_sent: Optional[str] = None
    failure: Optional[str] = None
    cert_requested: bool = False

    def to_json(self, chain_ids=None) -> dict:
        return {
            "max_version": self.max_version.value if self.max_version else None,
            "chain": chain_ids if chain_ids is not None else [c.hex() for c in self.certificate_chain],
            "sni": self.sni_sent,
            "failure": self.failure,
            "cert_requested": self.cert_requested,
        }


@dataclass
class HandshakeOutcome:
    status: Status
    banner_or_features: Optional[str] = None
    tls: Optional[TlsInfo] = None
    raw_transcript_digest: str = ""
    detail: Optional[str] = None
    fields: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS


class ProtocolError(ValueError):
    """Bytes that do not form a valid message of the expected protocol."""
