"""Aggregate analyses over scan snapshots and classified certificates.

Everything here is a pure function of its inputs. "Responsive" means the
application-layer handshake ended in ``Success``.
"""
from __future__ import annotations

import datetime as dt
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from ..certlab import CertificateRecord, Trust, days_past_expiry, issuer_of
from ..protocols import ProtocolPort, Status, TlsVersion, Transport, by_name
from ..scanner.snapshot import ScanSnapshot
from .enrich import EnrichmentTables

UNDEFINED = None
"""Marker for a rate whose denominator is zero."""

OTHER_COUNTRY = "Other"


def pp_order(pps: Iterable[ProtocolPort]) -> list[ProtocolPort]:
    return sorted(set(pps), key=ProtocolPort.sort_key)


def responsive(s: ScanSnapshot) -> dict[ProtocolPort, set[str]]:
    out: dict[ProtocolPort, set[str]] = defaultdict(set)
    for t, o in s.handshake_results:
        if o.status is Status.SUCCESS:
            out[t.pp].add(str(t.address))
    return dict(out)


def _by_address(s: ScanSnapshot) -> dict[str, set[ProtocolPort]]:
    out: dict[str, set[ProtocolPort]] = defaultdict(set)
    for pp, addrs in responsive(s).items():
        for a in addrs:
            out[a].add(pp)
    return dict(out)


def _pct(n: int, d: int) -> Optional[float]:
    return 100.0 * n / d if d else UNDEFINED


# ---- combinations -------------------------------------------------------------

@dataclass
class Combinations:
    groups: dict[frozenset, int]
    totals: dict[ProtocolPort, int]

    def ranked(self) -> list[tuple[frozenset, int]]:
        return sorted(self.groups.items(),
                      key=lambda kv: (-kv[1], [pp.sort_key() for pp in pp_order(kv[0])]))


def combination_counts(s: ScanSnapshot) -> Combinations:
    per_ip = _by_address(s)
    groups = Counter(frozenset(pps) for pps in per_ip.values())
    totals = Counter(pp for pps in per_ip.values() for pp in pps)
    return Combinations(dict(groups), dict(totals))


# ---- churn ----------------------------------------------------------------------

@dataclass
class ChurnRow:
    both: int
    reference_only: int
    subsequent_only: int

    @property
    def union(self) -> int:
        return self.both + self.reference_only + self.subsequent_only

    @property
    def both_pct(self) -> Optional[float]:
        return _pct(self.both, self.union)

    @property
    def reference_only_pct(self) -> Optional[float]:
        return _pct(self.reference_only, self.union)

    @property
    def subsequent_only_pct(self) -> Optional[float]:
        return _pct(self.subsequent_only, self.union)


@dataclass
class ChurnReport:
    reference_id: str
    subsequent_id: str
    rows: dict[ProtocolPort, ChurnRow] = field(default_factory=dict)
    normalization: str = "union"


def _universe(s: ScanSnapshot) -> Optional[frozenset]:
    ports = s.config.get("ports") if isinstance(s.config, dict) else None
    return frozenset(ports) if ports else None


def churn(ref: ScanSnapshot, sub: ScanSnapshot) -> ChurnReport:
    """Per protocol-port overlap of responsive addresses, percentages over the union."""
    u_ref, u_sub = _universe(ref), _universe(sub)
    if u_ref is not None and u_sub is not None and u_ref != u_sub:
        raise ValueError(f"snapshots scanned different ports: {sorted(u_ref)} vs {sorted(u_sub)}")
    a, b = responsive(ref), responsive(sub)
    report = ChurnReport(ref.campaign_id, sub.campaign_id)
    for pp in pp_order([*a, *b]):
        x, y = a.get(pp, set()), b.get(pp, set())
        report.rows[pp] = ChurnRow(len(x & y), len(x - y), len(y - x))
    return report


# ---- handshake rates ---------------------------------------------------------------

@dataclass
class Rate:
    open_count: int
    success_count: int

    @property
    def rate(self) -> Optional[float]:
        return self.success_count / self.open_count if self.open_count else UNDEFINED


def handshake_rates(s: ScanSnapshot) -> dict[ProtocolPort, Rate]:
    """Open vs. successful per protocol-port; scanned ports with nothing open get an undefined rate."""
    opened = {r.target for r in s.probe_results if r.open}
    out: dict[ProtocolPort, Rate] = {by_name(k): Rate(0, 0) for k in _universe(s) or ()}
    for t in opened:
        out.setdefault(t.pp, Rate(0, 0)).open_count += 1
    for t, o in s.handshake_results:
        if o.status is Status.SUCCESS and t in opened:
            out[t.pp].success_count += 1
    return {pp: out[pp] for pp in pp_order(out)}


# ---- enrichment-based ---------------------------------------------------------------

def network_types(s: ScanSnapshot, e: EnrichmentTables) -> dict[ProtocolPort, dict[str, float]]:
    """Row per protocol-port: network type → percentage of its responsive addresses."""
    out = {}
    resp = responsive(s)
    for pp in pp_order(resp):
        counts = Counter(e.network_type(a) for a in resp[pp])
        n = sum(counts.values())
        out[pp] = {t: 100.0 * c / n for t, c in sorted(counts.items())}
    return out


@dataclass
class CountryDistribution:
    counts: dict[str, int]
    by_protocol: dict[str, dict[ProtocolPort, int]]
    top_k: int

    def top(self) -> list[tuple[str, int]]:
        """Top ``top_k`` countries by address count, the rest rolled into "Other"."""
        ranked = sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))
        head, tail = ranked[: self.top_k], ranked[self.top_k:]
        if tail:
            head.append((OTHER_COUNTRY, sum(c for _, c in tail)))
        return head


def country_distribution(s: ScanSnapshot, e: EnrichmentTables, top_k: int = 25) -> CountryDistribution:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    per_ip = _by_address(s)
    counts: Counter = Counter()
    matrix: dict[str, Counter] = defaultdict(Counter)
    for addr, pps in per_ip.items():
        cc = e.country(addr)
        counts[cc] += 1
        for pp in pps:
            matrix[cc][pp] += 1
    return CountryDistribution(dict(sorted(counts.items())),
                               {cc: dict(matrix[cc]) for cc in sorted(matrix)}, top_k)


# ---- TLS -------------------------------------------------------------------------------

def tls_version_distribution(snapshots: Sequence[ScanSnapshot]) -> list[dict[ProtocolPort, dict[TlsVersion, float]]]:
    """Per snapshot: for each secured TCP protocol-port, share of hosts by negotiated TLS version.

    Hosts count once the server has picked a version, even if the handshake
    later failed (e.g. because it wanted a client certificate).
    """
    out = []
    for s in snapshots:
        per: dict[ProtocolPort, Counter] = defaultdict(Counter)
        for t, o in s.handshake_results:
            if not (t.pp.secured and t.pp.transport is Transport.TCP):
                continue
            if o.tls is not None and o.tls.max_version is not None:
                per[t.pp][o.tls.max_version] += 1
        row = {}
        for pp in pp_order(per):
            n = sum(per[pp].values())
            row[pp] = {v: 100.0 * c / n for v, c in sorted(per[pp].items(), key=lambda kv: list(TlsVersion).index(kv[0]))}
        out.append(row)
    return out


# ---- certificates ----------------------------------------------------------------------------

TOTAL = "total"


def _require_classified(records: Sequence[CertificateRecord]) -> None:
    for r in records:
        if r.trust is None or r.expired is None:
            raise ValueError(f"certificate {r.fingerprint[:16]} is not classified")


def _columns(records: Sequence[CertificateRecord]) -> dict[str, list[CertificateRecord]]:
    cols: dict[str, list[CertificateRecord]] = defaultdict(list)
    for r in records:
        for proto in r.protocols():
            cols[proto].append(r)
    return {k: cols[k] for k in sorted(cols)}


@dataclass
class IssuerShare:
    issuer: str
    count: int
    share: float  # percent of the column


def issuer_table(records: Sequence[CertificateRecord]) -> dict[str, list[IssuerShare]]:
    """Ranked issuer shares; column ``total`` plus one per protocol the certificates were seen on."""
    _require_classified(records)
    if not records:
        return {}
    cols = {TOTAL: list(records), **_columns(records)}
    out = {}
    for name, recs in cols.items():
        counts = Counter(issuer_of(r) for r in recs)
        n = len(recs)
        out[name] = [IssuerShare(i, c, 100.0 * c / n)
                     for i, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    return out


@dataclass
class CertStats:
    self_signed_pct: float
    expired_pct: float
    untrusted_pct: float
    total: int


def cert_stats(records: Sequence[CertificateRecord]) -> dict[str, CertStats]:
    """Per protocol over the distinct certificates seen on it, plus a ``total`` column."""
    _require_classified(records)
    out = {}
    if not records:
        return out
    for proto, recs in {TOTAL: list(records), **_columns(records)}.items():
        n = len(recs)
        out[proto] = CertStats(
            100.0 * sum(r.self_signed for r in recs) / n,
            100.0 * sum(bool(r.expired) for r in recs) / n,
            100.0 * sum(r.trust is not Trust.TRUSTED for r in recs) / n,
            n,
        )
    return out


def expiry_ecdf(records: Sequence[CertificateRecord], eval_time: dt.datetime) -> dict[str, list[tuple[int, float]]]:
    """ECDF of days past expiry (``total`` and per protocol); one point per distinct day."""
    out = {}
    dated = [r for r in records if r.not_after is not None]
    if not dated:
        return out
    for proto, recs in {TOTAL: dated, **_columns(dated)}.items():
        days = sorted(days_past_expiry(r, eval_time) for r in recs)
        n = len(days)
        series: list[tuple[int, float]] = []
        for i, d in enumerate(days, 1):
            if series and series[-1][0] == d:
                series[-1] = (d, i / n)
            else:
                series.append((d, i / n))
        out[proto] = series
    return out
