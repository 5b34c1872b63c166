import asyncio

import pytest

from iot6scan.mockfarm import FarmConfig, Listener, start_farm


def run(coro):
    return asyncio.run(coro)


@pytest.fixture
def farm_factory():
    """Start farms on demand; every farm is stopped at teardown."""
    farms = []

    def make(*listeners: Listener, seed: int = 0, **kw):
        farm = start_farm(FarmConfig(list(listeners), seed=seed, **kw))
        farms.append(farm)
        return farm

    yield make
    for f in farms:
        f.stop()


def farm_handshake(farm, key: str, *, address: str = "::1", machine=None, timeout: float = 3.0):
    """Run one application handshake against the farm listener for protocol-port ``key``."""
    from iot6scan.protocols import MachineOptions, by_name
    from iot6scan.scanner import AppScanConfig, SocketLayer, ScanTarget
    from iot6scan.scanner.stages import handshake
    import ipaddress

    cfg = AppScanConfig(connect_timeout=timeout, handshake_timeout=timeout,
                        machine=machine or MachineOptions(telnet_window=0.3), port_map=farm.port_map(address))
    target = ScanTarget(ipaddress.IPv6Address(address), by_name(key))
    return run(handshake(target, SocketLayer(), cfg))


PROFILE_TRUST = {
    "valid": "Trusted",
    "expired": "UntrustedExpired",
    "self_signed": "UntrustedSelfSigned",
    "snake_oil": "UntrustedUnknownIssuer",
    "unknown_issuer": "UntrustedUnknownIssuer",
    "untrusted_ca": "UntrustedCA",
}


def cert_corpus(n: int = 200, seed: int = 0):
    """``n`` issued certificates cycling through every profile, each with its own host name."""
    from iot6scan.mockfarm import CertProfile, make_cert

    profiles = list(CertProfile)
    return [make_cert(profiles[i % len(profiles)], seed, host=f"dev{i}.example") for i in range(n)]


def reference_verifies(issued, trust_pem: bytes, when, host: str) -> bool:
    """Independent path validation with the RFC 5280 verifier shipped in ``cryptography``."""
    from cryptography import x509
    from cryptography.x509.verification import PolicyBuilder, Store, VerificationError

    store = Store(x509.load_pem_x509_certificates(trust_pem))
    verifier = PolicyBuilder().store(store).time(when).build_server_verifier(x509.DNSName(host))
    leaf = x509.load_der_x509_certificate(issued.leaf)
    try:
        verifier.verify(leaf, [x509.load_der_x509_certificate(d) for d in issued.chain])
        return True
    except VerificationError:
        return False


def settled_hits(farm, expected_total: int, limit: float = 3.0):
    """Farm counters are bumped by the farm's own loop, a moment after the client's connect returns."""
    import time

    deadline = time.monotonic() + limit
    while sum(farm.hits.values()) < expected_total and time.monotonic() < deadline:
        time.sleep(0.01)
    time.sleep(0.05)  # anything extra would show up here
    return farm.hits


def synthetic_snapshot(rows, *, closed=(), campaign_id="synthetic", started_at=None, config=None):
    """Snapshot from ``(address, pp key, status[, TlsInfo])`` rows; each row also gets an open probe.

    ``closed`` lists ``(address, pp key)`` pairs probed without an answer.
    """
    import datetime as dt
    import ipaddress

    from iot6scan.protocols import HandshakeOutcome, Status, by_name
    from iot6scan.scanner import ProbeResult, ScanSnapshot, ScanTarget
    from iot6scan.scanner.stages import Evidence

    t0 = started_at or dt.datetime(2024, 6, 1, tzinfo=dt.timezone.utc)
    snap = ScanSnapshot(campaign_id, t0, config=dict(config or {}))
    for row in rows:
        addr, key, status = row[:3]
        target = ScanTarget(ipaddress.IPv6Address(addr), by_name(key))
        snap.probe_results.append(ProbeResult(target, True, 0.001, t0, Evidence.SYN_ACK_OR_CONNECT))
        tls = row[3] if len(row) > 3 else None
        snap.handshake_results.append((target, HandshakeOutcome(Status(status), tls=tls)))
    for addr, key in closed:
        target = ScanTarget(ipaddress.IPv6Address(addr), by_name(key))
        snap.probe_results.append(ProbeResult(target, False, 0.0, t0))
    return snap


def responsive_snapshot(sets: dict, **kw):
    """``{pp key: iterable of addresses}`` → snapshot where exactly those handshakes succeeded."""
    return synthetic_snapshot([(a, k, "Success") for k, addrs in sets.items() for a in addrs], **kw)


# ---- acceptance summary ---------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "call" or report.failed:
        prev_ok, _, prev_secs = _CRITERIA.get(number, (True, title, 0.0))  # parametrized criteria merge
        _CRITERIA[number] = (prev_ok and report.passed, title, prev_secs + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, secs = _CRITERIA[number]
        terminalreporter.write_line(f"AC{number:<2} {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f}s)")
    passed = sum(ok for ok, _, _ in _CRITERIA.values())
    terminalreporter.write_line(f"{passed}/{len(_CRITERIA)} criteria passed")
