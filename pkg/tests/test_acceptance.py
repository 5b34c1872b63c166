"""Exit criteria for the whole pipeline, numbered AC1 to AC10.

Each test carries an ``acceptance`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run. Run them alone with

    pytest tests/test_acceptance.py
"""
import ipaddress
import json
import random
import socket
import time
from collections import Counter, defaultdict
from pathlib import Path

import pytest

from codecgen import normalize, random_events, random_message
from conftest import PROFILE_TRUST, cert_corpus, reference_verifies, responsive_snapshot, run
from iot6scan import certlab, cli
from iot6scan.analysis import aggregates as agg
from iot6scan.mockfarm import DEFAULT_EVAL_TIME, Behavior, Listener, trust_store_pem
from iot6scan.protocols import (
    CANONICAL, MachineOptions, ProtocolError, Status, TlsVersion, Transport, by_name, coap, telnet,
)
from iot6scan.protocols.tls import PEER_REQUIRED_AUTH
from iot6scan.scanner import (
    AppScanConfig,
    ScanSnapshot,
    SimulatedNetwork,
    SocketLayer,
    app_scan,
    detect_max_tls_version,
    make_targets,
    port_scan,
)
from iot6scan.targetprep import DEFAULT_ALIAS_LEVELS, Blocklist, candidate_prefixes, detect_aliased_prefixes

N = ipaddress.IPv6Network
A = ipaddress.IPv6Address
LOOP = A("::1")


def spread_addresses(n, net, seed=0):
    """``n`` distinct pseudorandom addresses inside ``net``."""
    net = N(net)
    rng = random.Random(seed)
    out = set()
    while len(out) < n:
        out.add(net[rng.getrandbits(128 - net.prefixlen)])
    return sorted(out)


# ---- AC1 ----------------------------------------------------------------------------------

def closed_loopback_ports(n):
    """``n`` loopback port numbers that were free a moment ago, with a protocol each."""
    out, holders = [], []
    for i in range(n):
        pp = CANONICAL[i % len(CANONICAL)]
        s = socket.socket(socket.AF_INET6, socket.SOCK_STREAM if pp.transport is Transport.TCP else socket.SOCK_DGRAM)
        s.bind(("::1", 0))
        holders.append(s)
        out.append(by_name(f"{pp.key}@{s.getsockname()[1]}"))
    for s in holders:
        s.close()
    return out


@pytest.mark.acceptance(1, "end-to-end discovery: 11 Success, 0 false positives on 50 closed ports, < 30 s")
def test_ac1_end_to_end_discovery(farm_factory):
    farm = farm_factory(*[Listener(pp) for pp in CANONICAL])
    closed = [pp for pp in closed_loopback_ports(50) if pp.port not in farm.port_map().values()]
    assert len(closed) == 50
    targets = make_targets([LOOP], list(CANONICAL) + closed)
    started = time.monotonic()
    probes = run(port_scan(targets, rate=500, timeout=1.0, seed=1, layer=SocketLayer(), port_map=farm.port_map()))
    opened = [r.target for r in probes if r.open]
    cfg = AppScanConfig(connect_timeout=2, handshake_timeout=3, machine=MachineOptions(telnet_window=0.3),
                        port_map=farm.port_map())
    results = run(app_scan(opened, concurrency=32, config=cfg))
    elapsed = time.monotonic() - started
    successes = {t.pp for t, o in results if o.status is Status.SUCCESS}
    assert len(probes) == len(targets)
    assert successes == set(CANONICAL), {t.pp.key: (o.status, o.detail) for t, o in results}
    assert not [t for t in opened if t.pp in closed]  # no false positives
    assert elapsed < 30, elapsed


# ---- AC2 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(2, "one-probe law: exactly |targets| probes for 10,000 targets")
def test_ac2_one_probe_law():
    addrs = spread_addresses(1000, "2001:db8::/32", seed=2)
    pps = [pp for pp in CANONICAL if pp.key != "telnet"]
    targets = make_targets(addrs, pps)
    assert len(targets) == 10_000
    rng = random.Random(2)
    open_tcp = {(str(t.address), t.pp.port) for t in targets if t.pp.transport is Transport.TCP and rng.random() < 0.1}
    net = SimulatedNetwork(open_tcp=open_tcp)
    results = run(port_scan(targets, rate=1e7, timeout=0.01, seed=2, layer=net, burst=1000))
    assert sum(net.sent.values()) == len(targets)
    assert Counter({(str(t.address), t.pp.port): 1 for t in targets}) == net.sent
    assert len(results) == len(targets) and len({r.target for r in results}) == len(targets)
    assert {(str(r.target.address), r.target.pp.port) for r in results if r.open} == open_tcp


# ---- AC3 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(3, "blocklist law: zero packets to covered addresses")
def test_ac3_blocklist_law():
    inside = spread_addresses(500, "2001:db8:bad::/48", seed=3)
    outside = spread_addresses(500, "2001:db8:900d::/48", seed=4)
    bl = Blocklist([N("2001:db8:bad::/48")])
    assert all(bl.trie().covers(a) for a in inside) and not any(bl.trie().covers(a) for a in outside)
    targets = make_targets(inside + outside, list(CANONICAL))
    net = SimulatedNetwork(open_tcp={(str(a), pp.port) for a in inside + outside for pp in CANONICAL})
    results = run(port_scan(targets, rate=1e7, timeout=0.01, seed=3, layer=net, blocklist=bl, burst=1000))
    covered = set(map(str, inside))
    assert not [k for k in net.sent if k[0] in covered]
    assert sum(net.sent.values()) == len(outside) * len(CANONICAL)
    assert not [r for r in results if str(r.target.address) in covered]
    # the application stage honors the same list, even when handed covered targets
    app = run(app_scan(make_targets(inside[:50] + outside[:5], [by_name("mqtt")]),
                       config=AppScanConfig(connect_timeout=0.1, handshake_timeout=0.1), layer=net, blocklist=bl))
    assert len(app) == 5
    assert not [k for k in net.sent if k[0] in covered]


# ---- AC4 ----------------------------------------------------------------------------------

def per_level_oracle(hitlist, truth, levels):
    """Brute force: a candidate is aliased iff it lies inside the true aliased prefix; keep the coarsest."""
    aliased = {N((int(a), L), strict=False) for L in levels for a in hitlist}
    aliased = {c for c in aliased if any(c.subnet_of(t) for t in truth)}
    return sorted(c for c in aliased if not any(c != o and c.subnet_of(o) for o in aliased))


@pytest.mark.acceptance(4, "alias filtering: AliasAll /64 inside a sparse /48 is found exactly")
def test_ac4_alias_filtering(farm_factory):
    site, alias = N("2001:db8:5::/48"), N("2001:db8:5:7::/64")
    farm = farm_factory(Listener(by_name("telnet"), Behavior.alias_all(str(alias))))
    rng = random.Random(4)
    in_alias = [alias[rng.getrandbits(64)] for _ in range(20)]
    sparse = [site[rng.getrandbits(80)] for _ in range(12)]
    sparse = [a for a in sparse if a not in alias]
    hosts = set(sparse)
    alias_probe = farm.alias_prober()

    def prober(addr):
        return alias_probe(addr) or A(addr) in hosts  # real hosts answer only for themselves

    hitlist = in_alias + sparse
    for levels in (tuple(range(48, 125, 4)), DEFAULT_ALIAS_LEVELS):  # the first makes the /48 a candidate too
        found = detect_aliased_prefixes(candidate_prefixes(hitlist, levels), prober, levels=levels, seed=4)
        assert found.prefixes == [alias]
        assert found.prefixes == per_level_oracle(hitlist, [alias], levels)
    assert sum(farm.hits.values()) > 0


# ---- AC5 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(5, "codec round-trips: 10,000 CoAP + 10,000 Telnet; 100,000 fuzzed decodes")
def test_ac5_codec_round_trips_and_fuzz():
    rng = random.Random(5)
    for _ in range(10_000):
        m = random_message(rng)
        assert coap.decode(coap.encode(m)) == m
    for _ in range(10_000):
        evs = random_events(rng, rng.randrange(1, 12))
        assert telnet.decode(telnet.encode(evs)) == normalize(evs)
    fuzz = random.Random(55)
    crashes = []
    for i in range(100_000):
        raw = fuzz.randbytes(fuzz.choice([0, 1, 2, 4, 8, 16, 32, 64]))
        if i % 2:  # every other input starts like a real message to get past the header checks
            raw = bytes([0x40 | fuzz.randrange(16)]) + raw
        for decode in (coap.decode, telnet.decode):
            try:
                decode(raw)
            except ProtocolError:
                pass
            except Exception as exc:  # anything else is a crash
                crashes.append((decode.__module__, raw, exc))
        telnet.TelnetParser().feed(raw)  # the incremental parser must never raise
    assert crashes == []


# ---- AC6 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(6, "TLS version detection: pinned 1.0 / 1.2 / 1.3 reported exactly")
@pytest.mark.parametrize("version", [TlsVersion.TLS1_0, TlsVersion.TLS1_2, TlsVersion.TLS1_3])
def test_ac6_tls_version_detection(farm_factory, version):
    farm = farm_factory(Listener(by_name("mqtts"), Behavior.pin_tls_version(version)))
    target = make_targets([LOOP], [by_name("mqtts")])[0]
    info = run(detect_max_tls_version(target, port_map=farm.port_map()))
    assert info.max_version is version


# ---- AC7 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(7, "certificate classification: 200-cert corpus, zero disagreements, stats to 0.1")
def test_ac7_certificate_classification():
    corpus = cert_corpus(200, seed=7)
    root = trust_store_pem(7)
    store = certlab.TrustStore.from_pem(root, DEFAULT_EVAL_TIME)
    rng = random.Random(7)
    secured = ["amqps", "mqtts", "xmpps", "opcuas", "coaps"]
    seen = defaultdict(set)
    chains = []
    for i, issued in enumerate(corpus):
        for key in rng.sample(secured, rng.randint(1, 3)):
            seen[certlab.fingerprint(issued.leaf)].add(key)
            chains.append(((f"2001:db8::{i:x}", key), [issued.leaf, *issued.chain]))
    records = [certlab.classify(r, store) for r in certlab.dedup(chains).records]
    assert len(records) == 200
    truth = {certlab.fingerprint(c.leaf): (c, f"dev{i}.example") for i, c in enumerate(corpus)}
    disagreements = []
    for r in records:
        issued, host = truth[r.fingerprint]
        expected = PROFILE_TRUST[issued.profile.value]
        if r.trust.value != expected:
            disagreements.append((issued.profile.value, r.trust.value, expected))
        if (r.trust is certlab.Trust.TRUSTED) != reference_verifies(issued, root, DEFAULT_EVAL_TIME, host):
            disagreements.append((issued.profile.value, r.trust.value, "reference verifier"))
    assert disagreements == []
    stats = agg.cert_stats(records)
    columns = {"total": set(truth)}
    for fp, keys in seen.items():
        for k in keys:
            columns.setdefault(k, set()).add(fp)
    assert set(stats) == set(columns)
    for col, fps in columns.items():
        profiles = Counter(truth[f][0].profile.value for f in fps)
        n = len(fps)
        assert stats[col].total == n
        assert abs(stats[col].self_signed_pct - 100 * (profiles["self_signed"] + profiles["snake_oil"]) / n) < 0.1
        assert abs(stats[col].expired_pct - 100 * profiles["expired"] / n) < 0.1
        untrusted = sum(v for p, v in profiles.items() if PROFILE_TRUST[p] != "Trusted")
        assert abs(stats[col].untrusted_pct - 100 * untrusted / n) < 0.1


# ---- AC8 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(8, "handshake-rate asymmetry: AMQP 100% vs AMQPs 0% (peer-required-auth)")
def test_ac8_amqp_asymmetry(farm_factory):
    farm = farm_factory(Listener(by_name("amqp")), Listener(by_name("amqps"), Behavior.require_client_cert()))
    targets = make_targets([LOOP], [by_name("amqp"), by_name("amqps")])
    snap = ScanSnapshot("ac8", DEFAULT_EVAL_TIME)
    for _ in range(5):  # five independent rounds against the same farm
        probes = run(port_scan(targets, rate=100, timeout=2, layer=SocketLayer(), port_map=farm.port_map()))
        snap.probe_results += probes
        snap.handshake_results += run(app_scan([r.target for r in probes if r.open],
                                               config=AppScanConfig(port_map=farm.port_map())))
    # each round sees the same targets; rates are over all rounds
    rates = {}
    for pp in (by_name("amqp"), by_name("amqps")):
        opened = sum(r.open for r in snap.probe_results if r.target.pp == pp)
        ok = sum(o.status is Status.SUCCESS for t, o in snap.handshake_results if t.pp == pp)
        rates[pp.key] = ok / opened
    assert rates == {"amqp": 1.0, "amqps": 0.0}
    secured = [o for t, o in snap.handshake_results if t.pp.key == "amqps"]
    assert len(secured) == 5
    assert all(o.status is Status.TLS_FAILED and o.detail == PEER_REQUIRED_AUTH for o in secured)
    one_round = ScanSnapshot("r", DEFAULT_EVAL_TIME, snap.probe_results[:2], snap.handshake_results[:2])
    per_pp = agg.handshake_rates(one_round)
    assert (per_pp[by_name("amqp")].rate, per_pp[by_name("amqps")].rate) == (1.0, 0.0)


# ---- AC9 ----------------------------------------------------------------------------------

@pytest.mark.acceptance(9, "churn algebra over 1,000 randomized trials")
def test_ac9_churn_algebra():
    rng = random.Random(9)
    keys = ["mqtt", "coap", "telnet", "amqps"]
    for _ in range(1000):
        universe = [f"2001:db8::{i:x}" for i in range(rng.randint(1, 60))]
        sa = {k: set(rng.sample(universe, rng.randint(0, len(universe)))) for k in keys}
        sb = {k: set(rng.sample(universe, rng.randint(0, len(universe)))) for k in keys}
        a, b = responsive_snapshot(sa, campaign_id="A"), responsive_snapshot(sb, campaign_id="B")
        rep = agg.churn(a, b)
        for k in keys:
            pp = by_name(k)
            if not (sa[k] or sb[k]):
                assert pp not in rep.rows
                continue
            row = rep.rows[pp]
            assert row.both + row.reference_only == len(sa[k])
            assert row.both + row.subsequent_only == len(sb[k])
            assert row.both == len(sa[k] & sb[k])
        for row in agg.churn(a, a).rows.values():
            assert (row.both_pct, row.reference_only_pct, row.subsequent_only_pct) == (100.0, 0.0, 0.0)


# ---- AC10 ---------------------------------------------------------------------------------

FARM_10 = [
    Listener(by_name("coap")), Listener(by_name("coaps"), Behavior.serve_cert("self_signed")),
    Listener(by_name("mqtt")), Listener(by_name("mqtts"), Behavior.pin_tls_version("TLS1_2")),
    Listener(by_name("xmpp")), Listener(by_name("xmpps"), Behavior.serve_cert("snake_oil")),
    Listener(by_name("amqp")), Listener(by_name("amqps"), Behavior.require_client_cert()),
    Listener(by_name("opcua")), Listener(by_name("opcuas"), Behavior.serve_cert("expired")),
    Listener(by_name("telnet")),
]


def pipeline(farm, work: Path) -> dict:
    work.mkdir()
    (work / "ports.json").write_text(json.dumps(farm.port_map()))
    (work / "hitlist.txt").write_text("::1\n")
    (work / "block.txt").write_text("2001:db8:dead::/48\n")
    (work / "root.pem").write_bytes(trust_store_pem(3))
    enrich = work / "enrich"
    enrich.mkdir()
    (enrich / "routing.csv").write_text("prefix,asn\n::1/128,64500\n")
    (enrich / "asmeta.csv").write_text("asn,name,type\n64500,Loopback,Content\n")
    (enrich / "geo.csv").write_text("prefix,country\n::/0,ZZ\n")
    snap, out = work / "snap", work / "report"
    common = ["--blocklist", str(work / "block.txt"), "--port-map", f"@{work / 'ports.json'}"]
    assert cli.main(["portscan", "--hitlist", str(work / "hitlist.txt"), "--snapshot", str(snap), "--seed", "3",
                     "--timeout", "2", *common]) == 0
    assert cli.main(["appscan", "--snapshot", str(snap), "--telnet-window", "0.3", "--handshake-timeout", "3",
                     *common]) == 0
    assert cli.main(["report", "--in", str(snap), "--out", str(out), "--enrich", str(enrich),
                     "--trust-store", str(work / "root.pem"), "--eval-time", "2024-06-01T00:00:00Z"]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@pytest.mark.acceptance(10, "determinism: two full pipeline runs give byte-identical report CSVs")
def test_ac10_determinism(farm_factory, tmp_path, capsys):
    first = pipeline(farm_factory(*FARM_10, seed=3), tmp_path / "one")
    second = pipeline(farm_factory(*FARM_10, seed=3), tmp_path / "two")
    assert len(first) >= 9
    assert first == second
    certs = first["certificates.csv"].decode()
    assert "UntrustedUnknownIssuer" in certs and "UntrustedExpired" in certs and "UntrustedSelfSigned" in certs
    assert b"AMQPs,1,0,0.0000" in first["handshake_rates.csv"]
