"""Wire codecs and sans-IO handshake machines for the scanned protocols."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

from .amqp import AmqpHandshakeMachine
from .coap import CoapDiscoveryMachine, coap_decode, coap_encode_probe
from .dtls import DtlsHelloMachine, dtls_client_hello
from .machine import HandshakeMachine
from .mqtt import MqttConnectMachine
from .opcua import OpcUaHelloMachine, endpoint_url
from .ports import (
    CANONICAL,
    HandshakeOutcome,
    Protocol,
    ProtocolError,
    ProtocolPort,
    Status,
    TlsInfo,
    TlsVersion,
    Transport,
    by_name,
    parse_ports,
)
from .telnet import TelnetBannerMachine
from .tls import SecuredMachine, TlsClientSession
from .xmpp import XmppStreamMachine

__all__ = [
    "CANONICAL", "HandshakeMachine", "HandshakeOutcome", "MachineOptions", "Protocol", "ProtocolError",
    "ProtocolPort", "Status", "TlsInfo", "TlsVersion", "Transport", "by_name", "coap_decode",
    "coap_encode_probe", "dtls_client_hello", "machine_for", "parse_ports", "probe_payload",
]


@dataclass
class MachineOptions:
    mqtt_client_id: str = ""
    xmpp_to: Optional[str] = None
    telnet_max_banner: int = 1024
    telnet_window: float = 5.0
    sni: Optional[str] = None
    tls_offered_max: TlsVersion = TlsVersion.TLS1_3
    seed: int = 0


def _per_target_bytes(seed: int, address: str, label: str, n: int) -> bytes:
    return hashlib.sha256(f"{seed}|{address}|{label}".encode()).digest()[:n]


def probe_payload(pp: ProtocolPort, address: str, seed: int = 0) -> bytes:
    """The single datagram sent to a UDP port during the open-port stage."""
    if pp.transport is not Transport.UDP:
        raise ValueError(f"{pp} is not UDP")
    if pp.secured:
        return dtls_client_hello(_per_target_bytes(seed, address, "dtls", 32))
    mid = int.from_bytes(_per_target_bytes(seed, address, "coap", 2), "big")
    return coap_encode_probe(mid, _per_target_bytes(seed, address, "token", 4))


def machine_for(pp: ProtocolPort, address: str, port: int, opts: Optional[MachineOptions] = None) -> HandshakeMachine:
    """Build a fresh machine speaking ``pp`` to ``address``; TLS-wrapped for secured TCP."""
    opts = opts or MachineOptions()
    p = pp.protocol
    if p is Protocol.COAP:
        if pp.secured:
            return DtlsHelloMachine(_per_target_bytes(opts.seed, address, "dtls-app", 32))
        mid = int.from_bytes(_per_target_bytes(opts.seed, address, "coap-app", 2), "big")
        return CoapDiscoveryMachine(mid, _per_target_bytes(opts.seed, address, "token-app", 4))
    if p is Protocol.MQTT:
        inner: HandshakeMachine = MqttConnectMachine(opts.mqtt_client_id)
    elif p is Protocol.AMQP:
        inner = AmqpHandshakeMachine()
    elif p is Protocol.XMPP:
        inner = XmppStreamMachine(opts.xmpp_to)
    elif p is Protocol.OPCUA:
        inner = OpcUaHelloMachine(endpoint_url(address, port))
    elif p is Protocol.TELNET:
        inner = TelnetBannerMachine(opts.telnet_max_banner, opts.telnet_window)
    else:  # pragma: no cover
        raise ValueError(f"no machine for {pp}")
    if pp.secured:
        return SecuredMachine(inner, TlsClientSession(opts.tls_offered_max, sni=opts.sni))
    return inner
