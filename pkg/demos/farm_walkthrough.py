"""Scan a loopback device farm end to end and print what each stage learns.

    python3 demos/farm_walkthrough.py

A farm with one listener per protocol-port is started on ::1. A couple of
listeners misbehave on purpose: AMQPs insists on a client certificate, MQTTs
only speaks TLS 1.2, and XMPPs hands out a snake-oil certificate. The port
scan finds the open ports, the application scan talks to each one, and
the analysis layer turns the snapshot into rates and certificate tables.
"""
import asyncio

from iot6scan import certlab
from iot6scan.analysis import cert_stats, handshake_rates, issuer_table
from iot6scan.analysis.report import certificate_records
from iot6scan.mockfarm import DEFAULT_EVAL_TIME, Behavior, FarmConfig, Listener, start_farm, trust_store_pem
from iot6scan.protocols import CANONICAL, MachineOptions
from iot6scan.scanner import AppScanConfig, ScanSnapshot, app_scan, make_targets, port_scan

special = {
    "amqps": Behavior.require_client_cert(),
    "mqtts": Behavior.pin_tls_version("TLS1_2"),
    "xmpps": Behavior.serve_cert("snake_oil"),
}
farm = start_farm(FarmConfig([Listener(pp, special.get(pp.key, Behavior())) for pp in CANONICAL], seed=1))
try:
    ports = farm.port_map()
    print("farm listening on ::1:", ", ".join(f"{k}={p}" for k, p in sorted(ports.items())))

    targets = make_targets(["::1"], CANONICAL)
    probes = asyncio.run(port_scan(targets, rate=100, timeout=2, seed=1, port_map=ports))
    print(f"\nport scan: {sum(p.open for p in probes)}/{len(probes)} targets open")

    config = AppScanConfig(machine=MachineOptions(telnet_window=0.5), port_map=ports)
    handshakes = asyncio.run(app_scan([p.target for p in probes if p.open], config=config))
    print("\napplication handshakes:")
    for target, outcome in sorted(handshakes, key=lambda x: x[0].pp.sort_key()):
        tls = f" {outcome.tls.max_version.value}" if outcome.tls and outcome.tls.max_version else ""
        why = f" ({outcome.detail})" if outcome.detail else ""
        print(f"  {target.pp.label:<8} {outcome.status.value}{tls}{why}")
finally:
    farm.stop()

snap = ScanSnapshot("demo", DEFAULT_EVAL_TIME, probes, handshakes)
print("\nhandshake success rate per protocol-port:")
for pp, rate in handshake_rates(snap).items():
    print(f"  {pp.label:<8} {rate.success_count}/{rate.open_count}")

store = certlab.TrustStore.from_pem(trust_store_pem(1), DEFAULT_EVAL_TIME, "farm root")
records = certificate_records([snap], store).valid
print(f"\n{len(records)} distinct certificates:")
for r in records:
    tags = ", ".join(sorted(certlab.issuer_tags(r))) or "-"
    print(f"  {'+'.join(sorted(r.protocols())):<8} issuer={certlab.issuer_of(r):<20} {r.trust.value:<24} tags={tags}")
print("\nissuers (all secured protocols):")
for share in issuer_table(records)["total"]:
    print(f"  {share.issuer:<20} {share.count}  {share.share:.1f}%")
s = cert_stats(records)["total"]
print(f"\nself-signed {s.self_signed_pct:.1f}%  expired {s.expired_pct:.1f}%  untrusted {s.untrusted_pct:.1f}%")
