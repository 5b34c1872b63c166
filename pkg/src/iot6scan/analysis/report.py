"""Deterministic CSV/JSON report files.

Rows are sorted, floats use a fixed format, and snapshots are referred to
by their position on the command line, so re-running the same analysis
produces byte-identical CSVs. Campaign ids and timestamps go to
``metadata.json`` only.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .. import certlab
from ..scanner.snapshot import ScanSnapshot, rfc3339
from . import aggregates as agg
from .enrich import EnrichmentTables

NA = "NA"
FLOAT_FMT = "{:.4f}"


def fmt(x) -> str:
    if x is None:
        return NA
    if isinstance(x, float):
        return FLOAT_FMT.format(x)
    return str(x)


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(c) for c in row])
    return buf.getvalue()


def combo_label(pps) -> str:
    return "+".join(pp.label for pp in agg.pp_order(pps))


@dataclass
class ReportOptions:
    top_k: int = 25
    eval_time: Optional[dt.datetime] = None
    enrichment: Optional[EnrichmentTables] = None
    trust_store: Optional[certlab.TrustStore] = None
    extra_metadata: dict = field(default_factory=dict)


def certificate_records(snapshots: Sequence[ScanSnapshot], ts: certlab.TrustStore) -> certlab.DedupResult:
    chains = [c for s in snapshots for c in s.certificate_chains()]
    result = certlab.dedup(chains)
    result.records = sorted((certlab.classify(r, ts) if not r.parse_error else r for r in result.records),
                            key=lambda r: r.fingerprint)
    return result


def build_report(snapshots: Sequence[ScanSnapshot], opts: Optional[ReportOptions] = None) -> dict[str, str]:
    """File name → contents for every report file."""
    opts = opts or ReportOptions()
    if not snapshots:
        raise ValueError("at least one snapshot is required")
    files: dict[str, str] = {}
    idx = range(len(snapshots))

    combos, totals = [], []
    for i, s in zip(idx, snapshots):
        c = agg.combination_counts(s)
        combos += [(i, combo_label(k), n) for k, n in c.ranked()]
        totals += [(i, pp.label, c.totals[pp]) for pp in agg.pp_order(c.totals)]
    files["combinations.csv"] = _csv(["snapshot", "combination", "count"], combos)
    files["protocol_totals.csv"] = _csv(["snapshot", "protocol", "count"], totals)

    files["handshake_rates.csv"] = _csv(
        ["snapshot", "protocol", "open", "success", "rate"],
        [(i, pp.label, r.open_count, r.success_count, r.rate)
         for i, s in zip(idx, snapshots) for pp, r in agg.handshake_rates(s).items()],
    )

    churn_rows = []
    for j in idx[1:]:
        rep = agg.churn(snapshots[0], snapshots[j])
        churn_rows += [(0, j, pp.label, r.both, r.reference_only, r.subsequent_only,
                        r.both_pct, r.reference_only_pct, r.subsequent_only_pct) for pp, r in rep.rows.items()]
    files["churn.csv"] = _csv(["reference", "subsequent", "protocol", "both", "reference_only", "subsequent_only",
                               "both_pct", "reference_only_pct", "subsequent_only_pct"], churn_rows)

    tls_rows = []
    for i, dist in zip(idx, agg.tls_version_distribution(snapshots)):
        tls_rows += [(i, pp.label, v.value, share) for pp, row in dist.items() for v, share in row.items()]
    files["tls_versions.csv"] = _csv(["snapshot", "protocol", "version", "percent"], tls_rows)

    if opts.enrichment is not None:
        e = opts.enrichment
        nt, top, matrix = [], [], []
        for i, s in zip(idx, snapshots):
            nt += [(i, pp.label, t, p) for pp, row in agg.network_types(s, e).items() for t, p in row.items()]
            cd = agg.country_distribution(s, e, opts.top_k)
            top += [(i, cc, n) for cc, n in cd.top()]
            matrix += [(i, cc, pp.label, row[pp]) for cc, row in cd.by_protocol.items() for pp in agg.pp_order(row)]
        files["network_types.csv"] = _csv(["snapshot", "protocol", "network_type", "percent"], nt)
        files["countries.csv"] = _csv(["snapshot", "country", "count"], top)
        files["countries_by_protocol.csv"] = _csv(["snapshot", "country", "protocol", "count"], matrix)

    eval_time = opts.eval_time or max(s.started_at for s in snapshots)
    meta = {
        "snapshots": [{"index": i, "id": s.campaign_id, "started_at": rfc3339(s.started_at),
                       "config_sha256": hashlib.sha256(json.dumps(s.config, sort_keys=True).encode()).hexdigest()}
                      for i, s in zip(idx, snapshots)],
        "churn_normalization": "percentages over |reference ∪ subsequent|, first snapshot is the reference",
        "responsive_means": "application-layer handshake status Success",
        "undefined_marker": NA,
        "top_k": opts.top_k,
        "eval_time": rfc3339(eval_time),
        "enrichment": opts.enrichment is not None,
        **opts.extra_metadata,
    }

    if opts.trust_store is not None:
        ts = certlab.TrustStore(opts.trust_store.roots, eval_time, opts.trust_store.label)
        result = certificate_records(snapshots, ts)
        recs = result.valid
        files["issuers.csv"] = _csv(
            ["column", "rank", "issuer", "count", "percent"],
            [(col, rank, s.issuer, s.count, s.share)
             for col, shares in agg.issuer_table(recs).items() for rank, s in enumerate(shares, 1)],
        )
        files["cert_stats.csv"] = _csv(
            ["protocol", "self_signed_pct", "expired_pct", "untrusted_pct", "total"],
            [(p, s.self_signed_pct, s.expired_pct, s.untrusted_pct, s.total)
             for p, s in agg.cert_stats(recs).items()],
        )
        files["expiry_ecdf.csv"] = _csv(
            ["protocol", "days_past_expiry", "fraction"],
            [(p, d, f) for p, series in agg.expiry_ecdf(recs, eval_time).items() for d, f in series],
        )
        files["certificates.csv"] = _csv(
            ["fingerprint", "issuer", "trust", "self_signed", "expired", "snake_oil", "protocols"],
            [(r.fingerprint, certlab.issuer_of(r), r.trust.value, r.self_signed, r.expired, r.snake_oil,
              "+".join(sorted(r.protocols()))) for r in recs],
        )
        meta["trust_store_sha256"] = ts.digest()
        meta["certificates"] = {"distinct": len(recs), "quarantined": result.quarantined,
                                "chains_seen": result.chains_seen}

    files["metadata.json"] = json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    return files


def write_report(snapshots: Sequence[ScanSnapshot], out_dir: Union[str, Path],
                 opts: Optional[ReportOptions] = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in build_report(snapshots, opts).items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written
