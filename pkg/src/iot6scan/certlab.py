"""Certificate parsing, deduplication and trust classification."""
from __future__ import annotations

import datetime as dt
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Union

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.x509.oid import NameOID

log = logging.getLogger(__name__)

UNKNOWN_ISSUER = "Unknown"
SNAKE_OIL_CN = "invalid2.invalid"
SNAKE_OIL_OU_MARKER = "No SNI provided"


class Trust(str, enum.Enum):
    TRUSTED = "Trusted"
    UNTRUSTED_EXPIRED = "UntrustedExpired"
    UNTRUSTED_UNKNOWN_ISSUER = "UntrustedUnknownIssuer"
    UNTRUSTED_CA = "UntrustedCA"
    UNTRUSTED_SELF_SIGNED = "UntrustedSelfSigned"
    UNTRUSTED_OTHER = "UntrustedOther"


Endpoint = tuple  # (address text, protocol-port key)


def fingerprint(der: bytes) -> str:
    return hashlib.sha256(der).hexdigest()


def _utc(t: dt.datetime) -> dt.datetime:
    return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)


def _attr(name: x509.Name, oid) -> Optional[str]:
    vals = [a.value for a in name.get_attributes_for_oid(oid)]
    vals = [v for v in vals if isinstance(v, str) and v.strip()]
    return vals[0] if vals else None


def _verifies(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        cert.verify_directly_issued_by(issuer)
        return True
    except (ValueError, TypeError, InvalidSignature):
        return False


@dataclass
class CertificateRecord:
    fingerprint: str
    der: bytes
    subject: str = ""
    issuer: str = ""
    not_before: Optional[dt.datetime] = None
    not_after: Optional[dt.datetime] = None
    issuer_org: Optional[str] = None
    self_signed: bool = False
    snake_oil: bool = False
    chain: tuple = ()  # intermediates as presented, DER
    seen_on: set = field(default_factory=set)
    parse_error: Optional[str] = None
    expired: Optional[bool] = None
    trust: Optional[Trust] = None

    def expired_at(self, eval_time: dt.datetime) -> bool:
        return self.not_after is not None and _utc(eval_time) > self.not_after

    @property
    def parsed(self) -> x509.Certificate:
        return x509.load_der_x509_certificate(self.der)

    def protocols(self) -> set[str]:
        return {pp for _, pp in self.seen_on}

    def to_json(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "subject": self.subject,
            "issuer": self.issuer,
            "issuer_org": self.issuer_org,
            "issuer_label": issuer_of(self),
            "not_before": self.not_before.isoformat().replace("+00:00", "Z") if self.not_before else None,
            "not_after": self.not_after.isoformat().replace("+00:00", "Z") if self.not_after else None,
            "self_signed": self.self_signed,
            "snake_oil": self.snake_oil,
            "expired": self.expired,
            "trust": self.trust.value if self.trust else None,
            "parse_error": self.parse_error,
            "seen_on": sorted([list(e) for e in self.seen_on]),
        }


def parse_certificate(der: bytes, chain: Iterable[bytes] = ()) -> CertificateRecord:
    """Parse a leaf; unparseable input yields a record with ``parse_error`` set."""
    fp = fingerprint(der)
    try:
        cert = x509.load_der_x509_certificate(der)
        subject = cert.subject.rfc4514_string()
        issuer = cert.issuer.rfc4514_string()
        not_before = cert.not_valid_before_utc
        not_after = cert.not_valid_after_utc
    except Exception as exc:  # malformed DER comes in many shapes
        return CertificateRecord(fp, der, chain=tuple(chain), parse_error=f"{type(exc).__name__}: {exc}")
    self_signed = cert.subject == cert.issuer and _verifies(cert, cert)
    cn = _attr(cert.issuer, NameOID.COMMON_NAME) or ""
    ou = _attr(cert.issuer, NameOID.ORGANIZATIONAL_UNIT_NAME) or ""
    return CertificateRecord(
        fingerprint=fp,
        der=der,
        subject=subject,
        issuer=issuer,
        not_before=not_before,
        not_after=not_after,
        issuer_org=_attr(cert.issuer, NameOID.ORGANIZATION_NAME),
        self_signed=self_signed,
        snake_oil=cn == SNAKE_OIL_CN or SNAKE_OIL_OU_MARKER in ou,
        chain=tuple(chain),
    )


@dataclass
class DedupResult:
    records: list[CertificateRecord]
    quarantined: int = 0
    chains_seen: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def valid(self) -> list[CertificateRecord]:
        return [r for r in self.records if r.parse_error is None]


def dedup(chains: Iterable[tuple[Endpoint, list[bytes]]]) -> DedupResult:
    """One record per distinct leaf; ``seen_on`` accumulates the endpoints."""
    by_fp: dict[str, CertificateRecord] = {}
    n = 0
    for endpoint, chain in chains:
        if not chain:
            continue
        n += 1
        leaf = chain[0]
        fp = fingerprint(leaf)
        rec = by_fp.get(fp)
        if rec is None:
            rec = by_fp[fp] = parse_certificate(leaf, chain[1:])
        rec.seen_on.add(tuple(endpoint))
    records = sorted(by_fp.values(), key=lambda r: r.fingerprint)
    bad = sum(1 for r in records if r.parse_error)
    if bad:
        log.warning("quarantined %d unparseable certificate(s)", bad)
    return DedupResult(records, bad, n)


@dataclass
class TrustStore:
    roots: list[x509.Certificate]
    eval_time: dt.datetime
    label: str = ""

    def __post_init__(self) -> None:
        if not self.roots:
            raise ValueError("trust store needs at least one root")
        if self.eval_time.tzinfo is None:
            raise ValueError("eval_time must be timezone-aware")
        self._fps = {fingerprint(c.public_bytes(serialization.Encoding.DER)) for c in self.roots}

    @classmethod
    def from_pem(cls, pem: bytes, eval_time: dt.datetime, label: str = "") -> "TrustStore":
        return cls(x509.load_pem_x509_certificates(pem), eval_time, label)

    @classmethod
    def load(cls, path: Union[str, Path], eval_time: dt.datetime) -> "TrustStore":
        return cls.from_pem(Path(path).read_bytes(), eval_time, str(path))

    def is_root(self, cert: x509.Certificate) -> bool:
        return fingerprint(cert.public_bytes(serialization.Encoding.DER)) in self._fps

    def issuers_of(self, cert: x509.Certificate) -> list[x509.Certificate]:
        return [r for r in self.roots if r.subject == cert.issuer]

    def digest(self) -> str:
        return hashlib.sha256("".join(sorted(self._fps)).encode()).hexdigest()


def _in_window(cert: x509.Certificate, t: dt.datetime) -> bool:
    return cert.not_valid_before_utc <= t <= cert.not_valid_after_utc


def build_path(leaf: x509.Certificate, intermediates: list[x509.Certificate], ts: TrustStore):
    """Depth-first chain building over presented intermediates only.

    Returns ``(path, bad_signature)``: the leaf-to-root path if one verifies,
    and whether some name-matching issuer failed signature verification.
    """
    bad_sig = False

    def walk(cert, path, depth):
        nonlocal bad_sig
        if ts.is_root(cert):
            return path
        if depth > 8:
            return None
        for root in ts.issuers_of(cert):
            if _verifies(cert, root):
                return path + [root]
            bad_sig = True
        for inter in intermediates:
            if inter in path or inter.subject != cert.issuer:
                continue
            if not _verifies(cert, inter):
                bad_sig = True
                continue
            found = walk(inter, path + [inter], depth + 1)
            if found:
                return found
        return None

    return walk(leaf, [leaf], 0), bad_sig


def classify(r: CertificateRecord, ts: TrustStore) -> CertificateRecord:
    """Fill ``expired`` and ``trust``. Untrusted certificates get one reason.

    Reason priority: unknown issuer (empty issuer organisation and no path
    to a root), then expired, self-signed, untrusted CA, other.
    """
    if r.parse_error:
        raise ValueError(f"cannot classify unparseable certificate {r.fingerprint}")
    t = ts.eval_time
    leaf = r.parsed
    inters = []
    for der in r.chain:
        try:
            inters.append(x509.load_der_x509_certificate(der))
        except ValueError:
            continue
    path, bad_sig = build_path(leaf, inters, ts)
    expired = r.expired_at(t)
    if path is not None and all(_in_window(c, t) for c in path):
        trust = Trust.TRUSTED
    elif r.issuer_org is None and path is None:
        trust = Trust.UNTRUSTED_UNKNOWN_ISSUER
    elif expired or (path is not None and any(t > c.not_valid_after_utc for c in path)):
        trust = Trust.UNTRUSTED_EXPIRED
    elif r.self_signed:
        trust = Trust.UNTRUSTED_SELF_SIGNED
    elif path is None and not bad_sig:
        trust = Trust.UNTRUSTED_CA
    else:
        trust = Trust.UNTRUSTED_OTHER
    return replace(r, expired=expired, trust=trust, seen_on=set(r.seen_on))


def issuer_of(r: CertificateRecord) -> str:
    return r.issuer_org if r.issuer_org else UNKNOWN_ISSUER


def issuer_tags(r: CertificateRecord) -> set[str]:
    return {"snake-oil"} if r.snake_oil else set()


def days_past_expiry(r: CertificateRecord, eval_time: dt.datetime) -> int:
    """Whole days since expiry; negative while the certificate is still valid."""
    if r.not_after is None:
        raise ValueError("record has no validity period")
    return math.floor((_utc(eval_time) - r.not_after).total_seconds() / 86400)


def write_jsonl(records: Iterable[CertificateRecord], path: Union[str, Path], meta: Optional[dict] = None) -> None:
    lines = []
    if meta is not None:
        lines.append(json.dumps({"_meta": meta}, sort_keys=True))
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
