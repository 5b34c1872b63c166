"""Hitlist loading, aliased-prefix detection and target filtering."""
from __future__ import annotations

import asyncio
import inspect
import ipaddress
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, Iterable, Optional, Sequence, Union

from .trie import PrefixTrie, as_network, minimal_cover

log = logging.getLogger(__name__)

IPv6Address = ipaddress.IPv6Address
IPv6Network = ipaddress.IPv6Network

# A prober answers "did anything respond at this address?".  Timeouts and
# unreachable networks must come back as False (or raise OSError/TimeoutError).
AliasProber = Callable[[IPv6Address], Union[bool, Awaitable[bool]]]

DEFAULT_ALIAS_LEVELS = tuple(range(64, 125, 4))
DEFAULT_PROBES_PER_SUBPREFIX = 3
SUBPREFIX_BITS = 4  # 16 children per tested prefix


@dataclass
class Hitlist:
    entries: list[IPv6Address]
    source_label: str = ""
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class AliasedPrefixSet:
    prefixes: list[IPv6Network] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.prefixes = minimal_cover(self.prefixes)

    def __contains__(self, prefix) -> bool:
        return as_network(prefix) in self.prefixes

    def __len__(self) -> int:
        return len(self.prefixes)

    def trie(self) -> PrefixTrie:
        t: PrefixTrie = PrefixTrie()
        for p in self.prefixes:
            t.insert(p, "aliased")
        return t


@dataclass
class Blocklist:
    prefixes: list[IPv6Network] = field(default_factory=list)
    reasons: dict[IPv6Network, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.prefixes)

    def trie(self) -> PrefixTrie:
        t: PrefixTrie = PrefixTrie()
        for p in self.prefixes:
            t.insert(p, self.reasons.get(p, "blocklist"))
        return t

    def covers(self, address) -> bool:
        return self.trie().covers(address)


def _read_lines(path: Union[str, Path]) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def parse_hitlist(lines: Iterable[str], source_label: str = "") -> Hitlist:
    seen: set[IPv6Address] = set()
    entries: list[IPv6Address] = []
    skipped = 0
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            addr = ipaddress.IPv6Address(line)
        except ValueError:
            log.warning("%s:%d: skipping malformed address %r", source_label, lineno, line)
            skipped += 1
            continue
        if addr not in seen:
            seen.add(addr)
            entries.append(addr)
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", source_label, skipped)
    return Hitlist(entries, source_label, skipped)


def load_hitlist(path: Union[str, Path]) -> Hitlist:
    """Read a hitlist file: one IPv6 address per line, ``#`` comments.

    Addresses are normalized and deduplicated in first-seen order. Malformed
    lines are skipped with a warning; their number ends up in ``skipped``.
    """
    return parse_hitlist(_read_lines(path), str(path))


def parse_prefix_lines(lines: Iterable[str], source_label: str = "") -> tuple[list[IPv6Network], dict]:
    prefixes: list[IPv6Network] = []
    reasons: dict[IPv6Network, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        body, _, comment = line.partition("#")
        body = body.strip()
        try:
            net = ipaddress.IPv6Network(body, strict=False)
        except ValueError as exc:
            raise ValueError(f"{source_label}:{lineno}: bad prefix {body!r}") from exc
        prefixes.append(net)
        if comment.strip():
            reasons[net] = comment.strip()
    return prefixes, reasons


def load_blocklist(path: Union[str, Path]) -> Blocklist:
    """``prefix/length`` per line; a trailing ``# text`` is kept as the reason."""
    prefixes, reasons = parse_prefix_lines(_read_lines(path), str(path))
    return Blocklist(prefixes, reasons)


def load_aliased_prefixes(path: Union[str, Path]) -> AliasedPrefixSet:
    prefixes, _ = parse_prefix_lines(_read_lines(path), str(path))
    return AliasedPrefixSet(prefixes)


def write_prefix_file(prefixes: Iterable[IPv6Network], path: Union[str, Path], header: str = "") -> None:
    lines = [f"# {header}"] if header else []
    lines += [str(p) for p in prefixes]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def candidate_prefixes(addresses: Iterable[IPv6Address], levels: Sequence[int] = DEFAULT_ALIAS_LEVELS) -> set[IPv6Network]:
    """Every prefix at each level that contains at least one hitlist address."""
    out = set()
    for a in addresses:
        for level in levels:
            out.add(ipaddress.IPv6Network((int(a), level), strict=False))
    return out


def subprefix_probe_addresses(prefix: IPv6Network, probes_per_subprefix: int, rng: random.Random) -> list[list[IPv6Address]]:
    """Pseudorandom addresses inside each of the 16 children one nibble deeper."""
    child_len = prefix.prefixlen + SUBPREFIX_BITS
    host_bits = 128 - child_len
    base = int(prefix.network_address)
    groups = []
    for nibble in range(1 << SUBPREFIX_BITS):
        child = base | (nibble << host_bits)
        groups.append([IPv6Address(child | rng.getrandbits(host_bits)) for _ in range(probes_per_subprefix)])
    return groups


async def _ask(prober: AliasProber, addr: IPv6Address) -> bool:
    try:
        answer = prober(addr)
        if inspect.isawaitable(answer):
            answer = await answer
        return bool(answer)
    except (OSError, asyncio.TimeoutError, TimeoutError):
        return False


def _validate_levels(levels: Sequence[int], probes_per_level: int) -> None:
    if probes_per_level < 1:
        raise ValueError("probes_per_level must be >= 1")
    if not levels:
        raise ValueError("levels must not be empty")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    if levels[0] < 0 or levels[-1] > 128 - SUBPREFIX_BITS:
        raise ValueError("levels must lie in [0, 124]")


async def detect_aliased_prefixes_async(
    candidates: Iterable,
    prober: AliasProber,
    probes_per_level: int = DEFAULT_PROBES_PER_SUBPREFIX,
    levels: Sequence[int] = DEFAULT_ALIAS_LEVELS,
    seed: int = 0,
    max_in_flight: int = 64,
) -> AliasedPrefixSet:
    levels = list(levels)
    _validate_levels(levels, probes_per_level)
    by_level: dict[int, list[IPv6Network]] = {lv: [] for lv in levels}
    for c in {as_network(c) for c in candidates}:
        if c.prefixlen not in by_level:
            raise ValueError(f"candidate {c} is not at a configured level {levels}")
        by_level[c.prefixlen].append(c)

    rng = random.Random(seed)
    window = asyncio.Semaphore(max_in_flight)
    found = PrefixTrie()
    aliased: list[IPv6Network] = []

    async def ask(addr: IPv6Address) -> bool:
        async with window:
            return await _ask(prober, addr)

    for level in levels:
        batch = sorted(by_level[level], key=lambda n: int(n.network_address))
        # Addresses are drawn for every candidate up front so results do not
        # depend on which coarser prefixes were already found aliased.
        plans = [(net, subprefix_probe_addresses(net, probes_per_level, rng)) for net in batch]
        todo = [(net, groups) for net, groups in plans if not found.covers_prefix(net)]
        answers = await asyncio.gather(
            *(ask(a) for _, groups in todo for group in groups for a in group)
        )
        per_net = probes_per_level << SUBPREFIX_BITS
        for i, (net, _) in enumerate(todo):
            if all(answers[i * per_net:(i + 1) * per_net]):
                found.insert(net, level)
                aliased.append(net)
    log.info("alias detection: %d aliased prefix(es)", len(aliased))
    return AliasedPrefixSet(aliased)


def detect_aliased_prefixes(
    candidates: Iterable,
    prober: AliasProber,
    probes_per_level: int = DEFAULT_PROBES_PER_SUBPREFIX,
    levels: Sequence[int] = DEFAULT_ALIAS_LEVELS,
    seed: int = 0,
    max_in_flight: int = 64,
) -> AliasedPrefixSet:
    """Find prefixes where every probed address answers.

    Each candidate prefix is split into 16 children one nibble deeper and
    ``probes_per_level`` pseudorandom addresses are probed in every child.
    The prefix counts as aliased only when all of those probes answer.
    Candidates are processed coarse to fine; anything below an aliased
    prefix is skipped, so the result is already a minimal cover.
    """
    return asyncio.run(
        detect_aliased_prefixes_async(candidates, prober, probes_per_level, levels, seed, max_in_flight)
    )


@dataclass
class FilterReport:
    kept: int
    removed_aliased: int
    removed_blocklist: int

    def as_dict(self) -> dict:
        return {"kept": self.kept, "removed_aliased": self.removed_aliased, "removed_blocklist": self.removed_blocklist}


def filter_targets(
    h: Hitlist,
    aliased: Optional[AliasedPrefixSet] = None,
    bl: Optional[Blocklist] = None,
    report: Optional[dict] = None,
) -> Hitlist:
    """Drop addresses covered by an aliased or blocklisted prefix.

    Order is preserved. If ``report`` is given it is filled with per-cause
    counts (an address covered by both is attributed to the aliased set).
    """
    alias_trie = aliased.trie() if aliased else PrefixTrie()
    block_trie = bl.trie() if bl else PrefixTrie()
    causes: Counter = Counter()
    kept = []
    for addr in h.entries:
        if alias_trie.covers(addr):
            causes["aliased"] += 1
        elif block_trie.covers(addr):
            causes["blocklist"] += 1
        else:
            kept.append(addr)
    summary = FilterReport(len(kept), causes["aliased"], causes["blocklist"])
    log.info("filter: %s", summary.as_dict())
    if report is not None:
        report.update(summary.as_dict())
    return Hitlist(kept, h.source_label, h.skipped)
