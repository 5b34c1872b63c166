"""Offline enrichment: address → origin ASN → network type, address → country."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..trie import AddressLike, PrefixTrie, as_network

UNKNOWN_TYPE = "Unknown"
UNDISCLOSED_TYPE = "Undisclosed"
UNKNOWN_COUNTRY = "??"

ROUTING_FILE = "routing.csv"
ASMETA_FILE = "asmeta.csv"
GEO_FILE = "geo.csv"


class EnrichmentError(ValueError):
    pass


def _rows(text: str, source: str, header: str):
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if lineno == 1 and row[0].strip().lower() == header:
            continue
        yield lineno, [c.strip() for c in row]


def _asn(text: str, where: str) -> int:
    t = text.upper()
    if t.startswith("AS"):
        t = t[2:]
    try:
        n = int(t)
    except ValueError:
        raise EnrichmentError(f"{where}: bad ASN {text!r}") from None
    if not 0 <= n < 2**32:
        raise EnrichmentError(f"{where}: ASN out of range {text!r}")
    return n


def parse_routing(text: str, source: str = ROUTING_FILE) -> PrefixTrie[int]:
    """``prefix,asn`` lines. Any malformed line is fatal."""
    trie: PrefixTrie[int] = PrefixTrie()
    for lineno, row in _rows(text, source, "prefix"):
        where = f"{source}:{lineno}"
        if len(row) != 2:
            raise EnrichmentError(f"{where}: expected 'prefix,asn', got {len(row)} field(s)")
        try:
            net = as_network(row[0])
        except ValueError as exc:
            raise EnrichmentError(f"{where}: {exc}") from None
        trie.insert(net, _asn(row[1], where))
    return trie


def parse_asmeta(text: str, source: str = ASMETA_FILE) -> dict[int, tuple[str, str]]:
    """``asn,name,type`` lines; an empty type means the operator did not disclose one."""
    out: dict[int, tuple[str, str]] = {}
    for lineno, row in _rows(text, source, "asn"):
        where = f"{source}:{lineno}"
        if len(row) != 3:
            raise EnrichmentError(f"{where}: expected 'asn,name,type', got {len(row)} field(s)")
        out[_asn(row[0], where)] = (row[1], row[2] or UNDISCLOSED_TYPE)
    return out


def parse_geo(text: str, source: str = GEO_FILE) -> PrefixTrie[str]:
    trie: PrefixTrie[str] = PrefixTrie()
    for lineno, row in _rows(text, source, "prefix"):
        where = f"{source}:{lineno}"
        if len(row) != 2 or not row[1]:
            raise EnrichmentError(f"{where}: expected 'prefix,country'")
        try:
            trie.insert(as_network(row[0]), row[1].upper())
        except ValueError as exc:
            raise EnrichmentError(f"{where}: {exc}") from None
    return trie


@dataclass
class EnrichmentTables:
    routing: PrefixTrie = field(default_factory=PrefixTrie)
    as_meta: dict = field(default_factory=dict)
    geo: PrefixTrie = field(default_factory=PrefixTrie)

    @property
    def net_types(self) -> dict[int, str]:
        return {asn: t for asn, (_, t) in self.as_meta.items()}

    def asn_of(self, addr: AddressLike) -> Optional[int]:
        hit = self.routing.longest_match(addr)
        return hit[1] if hit else None

    def network_type(self, addr: AddressLike) -> str:
        asn = self.asn_of(addr)
        if asn is None or asn not in self.as_meta:
            return UNKNOWN_TYPE
        return self.as_meta[asn][1]

    def country(self, addr: AddressLike) -> str:
        hit = self.geo.longest_match(addr)
        return hit[1] if hit else UNKNOWN_COUNTRY

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "EnrichmentTables":
        """Read ``routing.csv``, ``asmeta.csv`` and ``geo.csv``; the latter two are optional."""
        d = Path(directory)
        routing_path = d / ROUTING_FILE
        if not routing_path.exists():
            raise EnrichmentError(f"missing {routing_path}")
        routing = parse_routing(routing_path.read_text(encoding="utf-8"), str(routing_path))
        meta = {}
        if (d / ASMETA_FILE).exists():
            meta = parse_asmeta((d / ASMETA_FILE).read_text(encoding="utf-8"), str(d / ASMETA_FILE))
        geo: PrefixTrie[str] = PrefixTrie()
        if (d / GEO_FILE).exists():
            geo = parse_geo((d / GEO_FILE).read_text(encoding="utf-8"), str(d / GEO_FILE))
        return cls(routing, meta, geo)
