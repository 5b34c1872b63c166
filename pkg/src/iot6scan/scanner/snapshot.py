"""Snapshot directory layout and (de)serialization.

::

    campaign.json     id, seed, started_at, effective config
    portscan.jsonl    one ProbeResult per line
    appscan.jsonl     one handshake outcome per line
    certs/<sha256>.der
    resume.ledger     "<stage>\\t<address>\\t<pp key>" per completed target

Record files are append-only. A result is flushed to its JSONL file before
its key is appended to the ledger, so after a crash every ledger key has a
stored result; targets in flight at the time are probed again on resume.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import ipaddress
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from ..protocols import HandshakeOutcome, ProtocolPort, Status, TlsInfo, TlsVersion
from ..protocols.ports import Protocol, Transport
from .stages import Evidence, ProbeResult, ScanTarget

CAMPAIGN = "campaign.json"
PORTSCAN = "portscan.jsonl"
APPSCAN = "appscan.jsonl"
CERTS = "certs"
LEDGER = "resume.ledger"


def rfc3339(t: dt.datetime) -> str:
    return t.astimezone(dt.timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_time(s: str) -> dt.datetime:
    t = dt.datetime.fromisoformat(s.replace("Z", "+00:00"))
    return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)


def pp_to_json(pp: ProtocolPort) -> dict:
    return {"protocol": pp.protocol.value, "port": pp.port, "secured": pp.secured, "transport": pp.transport.value}


def pp_from_json(d: dict) -> ProtocolPort:
    return ProtocolPort(Protocol(d["protocol"]), int(d["port"]), bool(d["secured"]), Transport(d["transport"]))


def probe_to_json(r: ProbeResult) -> dict:
    return {
        "address": str(r.target.address),
        **pp_to_json(r.target.pp),
        "open": r.open,
        "rtt_s": r.rtt,
        "observed_at": rfc3339(r.observed_at),
        "evidence": r.evidence.value,
    }


def probe_from_json(d: dict) -> ProbeResult:
    target = ScanTarget(ipaddress.IPv6Address(d["address"]), pp_from_json(d))
    return ProbeResult(target, d["open"], d["rtt_s"], parse_time(d["observed_at"]), Evidence(d["evidence"]))


def cert_id(der: bytes) -> str:
    return hashlib.sha256(der).hexdigest()


def outcome_to_json(t: ScanTarget, o: HandshakeOutcome) -> dict:
    tls = None
    if o.tls is not None:
        tls = o.tls.to_json(chain_ids=[cert_id(c) for c in o.tls.certificate_chain])
    return {
        "address": str(t.address),
        **pp_to_json(t.pp),
        "status": o.status.value,
        "banner": o.banner_or_features,
        "detail": o.detail,
        "fields": o.fields,
        "tls": tls,
        "transcript_sha256": o.raw_transcript_digest,
    }


def outcome_from_json(d: dict, certs_dir: Optional[Path] = None) -> tuple[ScanTarget, HandshakeOutcome]:
    target = ScanTarget(ipaddress.IPv6Address(d["address"]), pp_from_json(d))
    tls = None
    if d.get("tls") is not None:
        td = d["tls"]
        chain = []
        for cid in td.get("chain", []):
            path = certs_dir / f"{cid}.der" if certs_dir else None
            chain.append(path.read_bytes() if path and path.exists() else b"")
        tls = TlsInfo(
            max_version=TlsVersion(td["max_version"]) if td.get("max_version") else None,
            certificate_chain=chain,
            sni_sent=td.get("sni"),
            failure=td.get("failure"),
            cert_requested=td.get("cert_requested", False),
        )
    o = HandshakeOutcome(Status(d["status"]), d.get("banner"), tls, d.get("transcript_sha256", ""),
                         d.get("detail"), d.get("fields") or {})
    return target, o


@dataclass
class ScanSnapshot:
    campaign_id: str
    started_at: dt.datetime
    probe_results: list[ProbeResult] = field(default_factory=list)
    handshake_results: list[tuple[ScanTarget, HandshakeOutcome]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def open_targets(self) -> list[ScanTarget]:
        return [r.target for r in self.probe_results if r.open]

    def check_staging(self) -> None:
        opened = {r.target for r in self.probe_results if r.open}
        stray = [t for t, _ in self.handshake_results if t not in opened]
        if stray:
            raise ValueError(f"{len(stray)} handshake result(s) without an open probe, e.g. {stray[0].key}")

    def certificate_chains(self):
        """``((address, pp key), chain)`` for every handshake that yielded certificates."""
        for t, o in self.handshake_results:
            if o.tls is not None and o.tls.certificate_chain:
                yield (str(t.address), t.pp.key), list(o.tls.certificate_chain)

    def metadata(self) -> dict:
        return {"id": self.campaign_id, "started_at": rfc3339(self.started_at), "config": self.config}


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class SnapshotWriter:
    """Serialized appender for one snapshot directory."""

    def __init__(self, directory: Union[str, Path], campaign_id: str = "", started_at: Optional[dt.datetime] = None,
                 config: Optional[dict] = None) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / CERTS).mkdir(exist_ok=True)
        meta_path = self.dir / CAMPAIGN
        if meta_path.exists():
            self.meta = json.loads(meta_path.read_text())
        else:
            self.meta = {"id": campaign_id, "started_at": rfc3339(started_at or dt.datetime.now(dt.timezone.utc)),
                         "config": config or {}}
            self._atomic_write(meta_path, json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        for name in (PORTSCAN, APPSCAN, LEDGER):
            (self.dir / name).touch()
        self.completed = read_ledger(self.dir)

    @staticmethod
    def _atomic_write(path: Path, text: str) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def update_config(self, **entries) -> None:
        self.meta["config"].update(entries)
        self._atomic_write(self.dir / CAMPAIGN, json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    def _append(self, name: str, line: str) -> None:
        with open(self.dir / name, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _mark(self, stage: str, t: ScanTarget) -> None:
        key = f"{stage}\t{t.key}"
        self._append(LEDGER, key)
        self.completed.add(key)

    def done_keys(self, stage: str) -> set[str]:
        prefix = stage + "\t"
        return {k[len(prefix):] for k in self.completed if k.startswith(prefix)}

    def add_probe(self, r: ProbeResult) -> None:
        self._append(PORTSCAN, _dumps(probe_to_json(r)))
        self._mark("portscan", r.target)

    def add_handshake(self, t: ScanTarget, o: HandshakeOutcome) -> None:
        if o.tls is not None:
            for der in o.tls.certificate_chain:
                path = self.dir / CERTS / f"{cert_id(der)}.der"
                if not path.exists():
                    self._atomic_write_bytes(path, der)
        self._append(APPSCAN, _dumps(outcome_to_json(t, o)))
        self._mark("appscan", t)

    @staticmethod
    def _atomic_write_bytes(path: Path, data: bytes) -> None:
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def compact_ledger(self) -> None:
        """Rewrite the ledger sorted and deduplicated (safe at rest only)."""
        self._atomic_write(self.dir / LEDGER, "".join(k + "\n" for k in sorted(self.completed)))


def read_ledger(directory: Union[str, Path]) -> set[str]:
    path = Path(directory) / LEDGER
    if not path.exists():
        return set()
    return {line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()}


def persist_snapshot(s: ScanSnapshot, directory: Union[str, Path]) -> None:
    """Write (or extend) a snapshot directory; already-recorded targets are skipped."""
    w = SnapshotWriter(directory, s.campaign_id, s.started_at, s.config)
    done_p, done_a = w.done_keys("portscan"), w.done_keys("appscan")
    for r in s.probe_results:
        if r.target.key not in done_p:
            w.add_probe(r)
    for t, o in s.handshake_results:
        if t.key not in done_a:
            w.add_handshake(t, o)
    w.compact_ledger()


def _read_jsonl(path: Path) -> Iterable[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            break  # torn final line from a crash
    return out


def load_snapshot(directory: Union[str, Path]) -> ScanSnapshot:
    d = Path(directory)
    meta = json.loads((d / CAMPAIGN).read_text(encoding="utf-8"))
    probes = [probe_from_json(x) for x in _read_jsonl(d / PORTSCAN)]
    handshakes = [outcome_from_json(x, d / CERTS) for x in _read_jsonl(d / APPSCAN)]
    return ScanSnapshot(meta.get("id", d.name), parse_time(meta["started_at"]), probes, handshakes,
                        meta.get("config", {}))
