"""Loopback device farm used for end-to-end tests and demos."""
from .certs import DEFAULT_EVAL_TIME, CertProfile, IssuedCert, make_cert, trust_store_pem
from .farm import (
    Behavior,
    BehaviorKind,
    Farm,
    FarmBindError,
    FarmConfig,
    Listener,
    all_protocols,
    coap_response,
    load_farm_config,
    start_farm,
)

__all__ = [
    "Behavior", "BehaviorKind", "CertProfile", "DEFAULT_EVAL_TIME", "Farm", "FarmBindError", "FarmConfig",
    "IssuedCert", "Listener", "all_protocols", "coap_response", "load_farm_config", "make_cert",
    "start_farm", "trust_store_pem",
]
