import ipaddress
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iot6scan.targetprep import (
    DEFAULT_ALIAS_LEVELS,
    AliasedPrefixSet,
    Blocklist,
    Hitlist,
    candidate_prefixes,
    detect_aliased_prefixes,
    filter_targets,
    load_aliased_prefixes,
    load_blocklist,
    load_hitlist,
    parse_hitlist,
    subprefix_probe_addresses,
    write_prefix_file,
)
from iot6scan.trie import minimal_cover

A = ipaddress.IPv6Address
N = ipaddress.IPv6Network


def test_hitlist_normalizes_dedups_and_skips(tmp_path, caplog):
    p = tmp_path / "hits.txt"
    p.write_text("# comment\n2001:DB8::1\n\n2001:db8:0:0::1\n  2001:db8::2  \nnot-an-address\n10.0.0.1\n2001:db8::3\n")
    h = load_hitlist(p)
    assert h.entries == [A("2001:db8::1"), A("2001:db8::2"), A("2001:db8::3")]
    assert h.skipped == 2
    assert "malformed" in caplog.text


def test_hitlist_unreadable(tmp_path):
    with pytest.raises(OSError):
        load_hitlist(tmp_path / "missing.txt")


def test_blocklist_reasons_and_errors(tmp_path):
    p = tmp_path / "bl.txt"
    p.write_text("# opt-outs\n2001:db8:bad::/48  # asked us to stop\n2001:db8:1:2::5/64\n")
    bl = load_blocklist(p)
    assert bl.prefixes == [N("2001:db8:bad::/48"), N("2001:db8:1:2::/64")]
    assert bl.reasons[N("2001:db8:bad::/48")] == "asked us to stop"
    assert bl.covers("2001:db8:bad:ffff::1") and not bl.covers("2001:db8:1:3::1")
    p.write_text("2001:db8::/32\nbogus/12\n")
    with pytest.raises(ValueError, match=":2"):
        load_blocklist(p)


def test_prefix_file_round_trip(tmp_path):
    nets = [N("2001:db8::/48"), N("2001:db8:1::/64")]
    write_prefix_file(nets, tmp_path / "a.txt", header="aliased")
    assert load_aliased_prefixes(tmp_path / "a.txt").prefixes == nets


def test_aliased_set_is_minimal():
    s = AliasedPrefixSet([N("2001:db8::/48"), N("2001:db8:0:1::/64"), N("2001:db9::/64")])
    assert s.prefixes == [N("2001:db8::/48"), N("2001:db9::/64")]
    assert "2001:db8::/48" in s and len(s) == 2


def random_hitlist(rng, n):
    nets48 = [N(((0x20010DB8 << 96) | (rng.getrandbits(16) << 80), 48)) for _ in range(40)]
    out = []
    for _ in range(n):
        base = rng.choice(nets48)
        out.append(A(int(base.network_address) | rng.getrandbits(80)))
    return out, nets48


def test_filter_matches_brute_force_oracle():
    rng = random.Random(11)
    addrs, nets48 = random_hitlist(rng, 10_000)
    aliased = [N((int(n.network_address) | (rng.getrandbits(16) << 64), 64), strict=False) for n in nets48[:10]]
    aliased += nets48[10:13]
    # give the aliased /64s some members so they matter
    addrs += [A(int(a.network_address) | rng.getrandbits(64)) for a in aliased for _ in range(5)]
    blocked = nets48[12:18] + [N((int(nets48[20].network_address) | (1 << 70), 56), strict=False)]
    h = Hitlist(addrs)
    report = {}
    kept = filter_targets(h, AliasedPrefixSet(aliased), Blocklist(blocked), report)

    def oracle(a):
        if any(a in n for n in aliased):
            return "aliased"
        if any(a in n for n in blocked):
            return "blocklist"
        return "kept"

    verdicts = [oracle(a) for a in addrs]
    assert kept.entries == [a for a, v in zip(addrs, verdicts) if v == "kept"]
    assert report == {"kept": verdicts.count("kept"), "removed_aliased": verdicts.count("aliased"),
                      "removed_blocklist": verdicts.count("blocklist")}
    assert report["removed_aliased"] > 0 and report["removed_blocklist"] > 0
    # filtering is idempotent
    again = {}
    assert filter_targets(kept, AliasedPrefixSet(aliased), Blocklist(blocked), again).entries == kept.entries
    assert again["removed_aliased"] == again["removed_blocklist"] == 0


def test_filter_without_sets_keeps_everything():
    h = parse_hitlist(["2001:db8::1", "2001:db8::2"])
    assert filter_targets(h).entries == h.entries


def test_default_levels():
    assert DEFAULT_ALIAS_LEVELS[0] == 64 and DEFAULT_ALIAS_LEVELS[-1] == 124
    assert all(b - a == 4 for a, b in zip(DEFAULT_ALIAS_LEVELS, DEFAULT_ALIAS_LEVELS[1:]))


def test_candidate_prefixes_oracle():
    addrs = [A("2001:db8:1:2:3:4:5:6"), A("2001:db8:1:2::9")]
    levels = (48, 64, 96)
    want = {N(f"{a}/{lv}", strict=False) for a in addrs for lv in levels}
    assert candidate_prefixes(addrs, levels) == want


def test_subprefix_probes_land_in_each_child():
    rng = random.Random(1)
    net = N("2001:db8:aa00::/40")
    groups = subprefix_probe_addresses(net, 3, rng)
    children = list(net.subnets(prefixlen_diff=4))
    assert len(groups) == 16
    for child, group in zip(children, groups):
        assert len(group) == 3 and all(a in child for a in group)


class Prober:
    """Ground truth: every address in an aliased prefix answers, plus a few real hosts."""

    def __init__(self, aliased, hosts=()):
        self.aliased = [N(p) for p in aliased]
        self.hosts = set(hosts)
        self.calls = 0

    def __call__(self, a):
        self.calls += 1
        return a in self.hosts or any(a in n for n in self.aliased)


def alias_oracle(hitlist, truth, levels):
    """Coarsest candidate prefixes that lie wholly inside a truly aliased prefix."""
    cands = {N((int(a), lv), strict=False) for a in hitlist for lv in levels}
    inside = [c for c in cands if any(c.subnet_of(N(t)) for t in truth)]
    return minimal_cover(inside)


def test_detection_matches_oracle():
    rng = random.Random(3)
    truth = ["2001:db8:1:2::/64", "2001:db8:2::/48", "2001:db8:3:40::/58"]
    hits = [A("2001:db8:1:2::1"), A("2001:db8:1:3::1"), A("2001:db8:2:7::9"), A("2001:db8:3:40::77"),
            A("2001:db8:4::1")]
    hits += [A(int(N(t).network_address) | rng.getrandbits(128 - N(t).prefixlen)) for t in truth for _ in range(3)]
    levels = range(48, 125, 4)
    found = detect_aliased_prefixes(candidate_prefixes(hits, levels), Prober(truth, hits), levels=levels, seed=7)
    assert found.prefixes == alias_oracle(hits, truth, levels)
    assert N("2001:db8:2::/48") in found.prefixes
    assert N("2001:db8:1:2::/64") in found.prefixes
    # /58 is not a level: the /56 around it is only partly aliased, the /60s inside it are whole
    assert N("2001:db8:3:40::/60") in found.prefixes
    assert not any(p.prefixlen < 58 and p.overlaps(N("2001:db8:3:40::/58")) for p in found.prefixes)


def test_all_probes_must_answer():
    net = N("2001:db8:5::/64")

    class OneHole(Prober):
        def __call__(self, a):
            self.calls += 1
            return a in net and a != self.hole

    seen = []
    first = detect_aliased_prefixes([net], lambda a: seen.append(a) or True, levels=[64], seed=2)
    assert first.prefixes == [net]
    for hole in seen:
        p = OneHole([])
        p.hole = hole
        assert detect_aliased_prefixes([net], p, levels=[64], seed=2).prefixes == []


def test_probe_budget_and_skip_below_found():
    p = Prober(["2001:db8::/32"])
    cands = [N("2001:db8::/48"), N("2001:db8:0:1::/64"), N("2001:db8:0:2::/64")]
    found = detect_aliased_prefixes(cands, p, probes_per_level=2, levels=[48, 64])
    assert found.prefixes == [N("2001:db8::/48")]
    assert p.calls == 16 * 2  # the /64s below the aliased /48 are never probed


def test_deterministic_for_seed():
    truth = ["2001:db8:1::/48"]
    cands = candidate_prefixes([A("2001:db8:1::1"), A("2001:db8:9::1")])
    runs = []
    for _ in range(2):
        seen = []
        detect_aliased_prefixes(cands, lambda a: seen.append(a) or Prober(truth)(a), seed=42)
        runs.append(sorted(seen))
    assert runs[0] == runs[1]


def test_prober_errors_count_as_silence():
    def flaky(a):
        raise TimeoutError
    assert detect_aliased_prefixes([N("2001:db8::/64")], flaky, levels=[64]).prefixes == []


async def _async_yes(a):
    return True


def test_async_prober():
    assert detect_aliased_prefixes([N("2001:db8::/64")], _async_yes, levels=[64]).prefixes == [N("2001:db8::/64")]


@pytest.mark.parametrize("levels,k", [([], 3), ([64, 64], 3), ([64, 48], 3), ([126], 3), ([64], 0)])
def test_parameter_validation(levels, k):
    with pytest.raises(ValueError):
        detect_aliased_prefixes([], Prober([]), probes_per_level=k, levels=levels)


def test_candidate_at_unknown_level():
    with pytest.raises(ValueError):
        detect_aliased_prefixes([N("2001:db8::/50")], Prober([]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.sampled_from([52, 56, 60, 64])), min_size=1, max_size=4),
       st.integers(0, 2**16))
def test_detection_property(truth_specs, seed):
    base = 0x20010DB8 << 96
    truth = [str(N((base | (v << 76), lv), strict=False)) for v, lv in truth_specs]
    hits = [A(int(N(t).network_address) + 1) for t in truth] + [A(base | (1 << 70) | 5)]
    levels = (48, 52, 56, 60, 64)
    found = detect_aliased_prefixes(candidate_prefixes(hits, levels), Prober(truth, hits),
                                    probes_per_level=1, levels=levels, seed=seed)
    assert found.prefixes == alias_oracle(hits, truth, levels)
