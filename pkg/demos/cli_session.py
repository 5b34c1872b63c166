"""The command-line pipeline, driven from Python so it runs anywhere.

    python3 demos/cli_session.py

Equivalent shell session (with a farm running in another terminal):

    iot6scan mockfarm --port-map-out ports.json --trust-store-out root.pem
    iot6scan portscan --hitlist hitlist.txt --blocklist block.txt --port-map @ports.json --snapshot snap
    iot6scan appscan  --snapshot snap --blocklist block.txt --port-map @ports.json
    iot6scan report   --in snap --trust-store root.pem --eval-time 2024-06-01T00:00:00Z --out report
"""
import json
import tempfile
from pathlib import Path

from iot6scan import cli
from iot6scan.mockfarm import DEFAULT_EVAL_TIME, all_protocols, start_farm, trust_store_pem


def iot6scan(*argv):
    print("\n$ iot6scan", " ".join(argv))
    code = cli.main(list(argv))
    if code != 0:
        raise SystemExit(code)


with tempfile.TemporaryDirectory() as tmp:
    work = Path(tmp)
    farm = start_farm(all_protocols(seed=0))
    try:
        (work / "ports.json").write_text(json.dumps(farm.port_map()))
        (work / "root.pem").write_bytes(trust_store_pem(0))
        (work / "hitlist.txt").write_text("::1\n2001:db8:dead::1\n")
        (work / "block.txt").write_text("# never scan the documentation range\n2001:db8::/32\n")
        w = str(work)
        iot6scan("filter", "--hitlist", f"{w}/hitlist.txt", "--blocklist", f"{w}/block.txt")
        iot6scan("portscan", "--hitlist", f"{w}/hitlist.txt", "--blocklist", f"{w}/block.txt", "--dry-run")
        iot6scan("portscan", "--hitlist", f"{w}/hitlist.txt", "--blocklist", f"{w}/block.txt",
                 "--port-map", f"@{w}/ports.json", "--snapshot", f"{w}/snap", "--timeout", "2")
        iot6scan("appscan", "--snapshot", f"{w}/snap", "--blocklist", f"{w}/block.txt",
                 "--port-map", f"@{w}/ports.json", "--telnet-window", "0.5")
    finally:
        farm.stop()
    # farm certificates are minted around a fixed date, so judge them at that date
    when = ("--eval-time", DEFAULT_EVAL_TIME.isoformat())
    iot6scan("report", "--in", f"{w}/snap", "--trust-store", f"{w}/root.pem", "--out", f"{w}/report", *when)
    iot6scan("certlab", "--in", f"{w}/snap", "--trust-store", f"{w}/root.pem", *when)
    print("\nhandshake_rates.csv:")
    print((work / "report" / "handshake_rates.csv").read_text())
