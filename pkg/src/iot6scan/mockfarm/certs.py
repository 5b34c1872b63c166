"""Deterministic certificate fixtures.

Keys are derived from the seed and signatures use deterministic ECDSA, so
the same ``(profile, seed, eval_time)`` always yields byte-identical DER.
"""
from __future__ import annotations

import datetime as dt
import enum
import hashlib
from dataclasses import dataclass
from functools import lru_cache

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

DEFAULT_EVAL_TIME = dt.datetime(2024, 6, 1, tzinfo=dt.timezone.utc)

_P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class CertProfile(str, enum.Enum):
    VALID = "valid"
    EXPIRED = "expired"
    SELF_SIGNED = "self_signed"
    UNKNOWN_ISSUER = "unknown_issuer"
    SNAKE_OIL = "snake_oil"
    UNTRUSTED_CA = "untrusted_ca"


def derive_key(*label) -> ec.EllipticCurvePrivateKey:
    digest = hashlib.sha256("|".join(map(str, label)).encode()).digest()
    scalar = int.from_bytes(digest, "big") % (_P256_ORDER - 1) + 1
    return ec.derive_private_key(scalar, ec.SECP256R1())


def _serial(*label) -> int:
    return int.from_bytes(hashlib.sha256("|".join(map(str, label)).encode()).digest()[:16], "big") >> 1 or 1


def _name(**attrs) -> x509.Name:
    oids = {"CN": NameOID.COMMON_NAME, "O": NameOID.ORGANIZATION_NAME, "OU": NameOID.ORGANIZATIONAL_UNIT_NAME,
            "L": NameOID.LOCALITY_NAME, "C": NameOID.COUNTRY_NAME}
    order = ["C", "L", "O", "OU", "CN"]
    return x509.Name([x509.NameAttribute(oids[k], attrs[k]) for k in order if k in attrs])


def _sign(builder: x509.CertificateBuilder, key: ec.EllipticCurvePrivateKey) -> x509.Certificate:
    return builder.sign(key, hashes.SHA256(), ecdsa_deterministic=True)


def _cert(subject, issuer, pub, signer, serial, not_before, not_after, ca=False, san=None) -> x509.Certificate:
    b = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(pub)
        .serial_number(serial)
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True)
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(pub), critical=False)
        .add_extension(x509.AuthorityKeyIdentifier.from_issuer_public_key(signer.public_key()), critical=False)
    )
    if not ca:
        b = b.add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), critical=False)
    if ca:
        b = b.add_extension(x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True)
    if san:
        b = b.add_extension(x509.SubjectAlternativeName([x509.DNSName(san)]), critical=False)
    return _sign(b, signer)


@dataclass(frozen=True)
class Authority:
    cert: x509.Certificate
    key: ec.EllipticCurvePrivateKey

    @property
    def der(self) -> bytes:
        return self.cert.public_bytes(serialization.Encoding.DER)

    @property
    def pem(self) -> bytes:
        return self.cert.public_bytes(serialization.Encoding.PEM)


# CA validity spans every plausible eval_time so only leaves carry pathologies.
_CA_FROM = dt.datetime(2015, 1, 1, tzinfo=dt.timezone.utc)
_CA_UNTIL = dt.datetime(2045, 1, 1, tzinfo=dt.timezone.utc)


@lru_cache(maxsize=None)
def farm_root(seed: int) -> Authority:
    key = derive_key("root", seed)
    name = _name(C="DE", O="Mock Root Authority", CN="Mock Root CA R1")
    return Authority(_cert(name, name, key.public_key(), key, _serial("root", seed), _CA_FROM, _CA_UNTIL, ca=True), key)


@lru_cache(maxsize=None)
def farm_intermediate(seed: int) -> Authority:
    root = farm_root(seed)
    key = derive_key("intermediate", seed)
    name = _name(C="US", O="Mock Trust Services", CN="Mock Issuing CA 1")
    return Authority(_cert(name, root.cert.subject, key.public_key(), root.key, _serial("inter", seed),
                           _CA_FROM, _CA_UNTIL, ca=True), key)


@lru_cache(maxsize=None)
def rogue_authority(seed: int, with_org: bool) -> Authority:
    """A CA absent from every farm trust store."""
    if with_org:
        name = _name(O="Untrusted Example CA", CN="Untrusted Example Root")
    else:
        # the RabbitMQ tls-gen default issuer, organisation left empty
        name = _name(L="$$$$", CN="TLSGenSelfSignedtRootCA")
    key = derive_key("rogue", with_org, seed)
    return Authority(_cert(name, name, key.public_key(), key, _serial("rogue", with_org, seed),
                           _CA_FROM, _CA_UNTIL, ca=True), key)


def trust_store_pem(seed: int) -> bytes:
    return farm_root(seed).pem


@dataclass(frozen=True)
class IssuedCert:
    leaf: bytes
    chain: tuple  # intermediates, DER, leaf excluded
    key: ec.EllipticCurvePrivateKey
    profile: CertProfile

    @property
    def key_pem(self) -> bytes:
        return self.key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                      serialization.NoEncryption())

    def chain_pem(self) -> bytes:
        parts = [x509.load_der_x509_certificate(d).public_bytes(serialization.Encoding.PEM)
                 for d in (self.leaf, *self.chain)]
        return b"".join(parts)


def make_cert(
    profile,
    seed: int = 0,
    eval_time: dt.datetime = DEFAULT_EVAL_TIME,
    host: str = "device.example",
    expired_days: int = 0,
    valid_days: int = 0,
) -> IssuedCert:
    """Build a leaf certificate exhibiting ``profile``.

    ``expired_days`` moves the expiry of the expired profile further into
    the past (default: 100 days before ``eval_time`` plus a seed-derived
    offset); ``valid_days`` sets the remaining lifetime of the others.
    """
    profile = CertProfile(profile)
    h = int.from_bytes(hashlib.sha256(f"{profile.value}|{seed}|{host}".encode()).digest()[:4], "big")
    key = derive_key("leaf", profile.value, seed, host)
    remaining = dt.timedelta(days=valid_days or 30 + h % 60)
    lifetime = dt.timedelta(days=90)
    not_after = eval_time + remaining
    if profile is CertProfile.EXPIRED:
        not_after = eval_time - dt.timedelta(days=expired_days or 100 + h % 300)
    not_before = not_after - lifetime
    serial = _serial("leaf", profile.value, seed, host)

    if profile in (CertProfile.VALID, CertProfile.EXPIRED):
        ca = farm_intermediate(seed)
        subject = _name(CN=host)
        cert = _cert(subject, ca.cert.subject, key.public_key(), ca.key, serial, not_before, not_after, san=host)
        chain = (ca.der,)
    elif profile is CertProfile.SELF_SIGNED:
        subject = _name(O="Example Devices", CN=host)
        cert = _cert(subject, subject, key.public_key(), key, serial, not_before, not_after, san=host)
        chain = ()
    elif profile is CertProfile.SNAKE_OIL:
        subject = _name(OU="No SNI provided; please fix your client.", CN="invalid2.invalid")
        cert = _cert(subject, subject, key.public_key(), key, serial, not_before, not_after)
        chain = ()
    elif profile is CertProfile.UNKNOWN_ISSUER:
        ca = rogue_authority(seed, with_org=False)
        cert = _cert(_name(CN=host, O="rabbit"), ca.cert.subject, key.public_key(), ca.key, serial,
                     not_before, not_after, san=host)
        chain = (ca.der,)
    else:  # UNTRUSTED_CA
        ca = rogue_authority(seed, with_org=True)
        cert = _cert(_name(CN=host), ca.cert.subject, key.public_key(), ca.key, serial,
                     not_before, not_after, san=host)
        chain = (ca.der,)
    return IssuedCert(cert.public_bytes(serialization.Encoding.DER), chain, key, profile)
