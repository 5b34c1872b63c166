import csv
import io
import ipaddress
import json
import random
import socket
from pathlib import Path

import pytest

from conftest import responsive_snapshot
from iot6scan import cli
from iot6scan.analysis import aggregates as agg
from iot6scan.mockfarm import Behavior, Listener, trust_store_pem
from iot6scan.protocols import CANONICAL, by_name
from iot6scan.scanner import load_snapshot, persist_snapshot


@pytest.fixture(autouse=True)
def no_config(monkeypatch):
    monkeypatch.delenv(cli.CONFIG_ENV, raising=False)


def write(path: Path, lines) -> str:
    path.write_text("".join(f"{x}\n" for x in lines))
    return str(path)


# ---- exit codes ----------------------------------------------------------------------------

def test_no_subcommand_is_a_usage_error(capsys):
    assert cli.main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_prints_help(capsys):
    assert cli.main(["report", "--in", "x", "--out", "y", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_bad_value_is_a_usage_error(tmp_path, capsys):
    hl = write(tmp_path / "h.txt", ["::1"])
    assert cli.main(["portscan", "--hitlist", hl, "--rate", "0", "--dry-run", "--i-have-no-blocklist"]) == 1
    assert cli.main(["portscan", "--hitlist", hl, "--ports", "gopher", "--dry-run", "--i-have-no-blocklist"]) == 1


def test_help_and_version(capsys):
    assert cli.main(["--help"]) == 0
    assert cli.main(["--version"]) == 0
    assert "iot6scan" in capsys.readouterr().out


def test_runtime_failure_is_2(tmp_path, capsys):
    assert cli.main(["report", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert "report" in capsys.readouterr().err


# ---- blocklist guard and dry run ------------------------------------------------------------------

def test_portscan_requires_a_blocklist(tmp_path, capsys):
    hl = write(tmp_path / "h.txt", ["2001:db8::1"])
    assert cli.main(["portscan", "--hitlist", hl, "--dry-run"]) == 1
    assert "--blocklist is required" in capsys.readouterr().err
    assert cli.main(["portscan", "--hitlist", hl, "--dry-run", "--i-have-no-blocklist"]) == 0


def test_appscan_requires_a_blocklist(tmp_path, capsys):
    snap = tmp_path / "snap"
    persist_snapshot(responsive_snapshot({"mqtt": ["::1"]}), snap)
    assert cli.main(["appscan", "--snapshot", str(snap), "--dry-run"]) == 1
    assert cli.main(["appscan", "--snapshot", str(snap), "--dry-run", "--i-have-no-blocklist"]) == 0
    assert "would handshake with 0 open targets (1 already done)" in capsys.readouterr().out


class NoSockets:
    def __init__(self, *a, **kw):
        raise AssertionError("a socket was opened")


def test_dry_run_sends_nothing(tmp_path, monkeypatch, capsys):
    hl = write(tmp_path / "h.txt", [f"2001:db8::{i:x}" for i in range(1, 41)] + ["2001:db8:1::1"])
    bl = write(tmp_path / "b.txt", ["2001:db8:1::/48"])
    al = write(tmp_path / "a.txt", ["2001:db8::/124"])  # ::0 - ::f
    monkeypatch.setattr(socket, "socket", NoSockets)
    monkeypatch.setattr(socket, "socketpair", NoSockets)
    code = cli.main(["portscan", "--hitlist", hl, "--blocklist", bl, "--aliased", al, "--ports", "mqtt,coap,telnet",
                     "--dry-run"])
    assert code == 0
    out = capsys.readouterr().out
    assert "would probe 75 targets (25 addresses x 3 ports); removed 15 aliased, 1 blocklisted" in out
    assert not (tmp_path / "snap").exists()


# ---- filter --------------------------------------------------------------------------------------

def test_filter_counts_match_membership_oracle(tmp_path, capsys):
    rng = random.Random(3)
    addrs = [ipaddress.IPv6Address(0x20010DB8 << 96 | rng.choice([0x00, 0x40, 0x41, 0x80, 0xC0]) << 88
                                   | rng.getrandbits(88)) for _ in range(300)]
    block = [ipaddress.IPv6Network("2001:db8::/40"), ipaddress.IPv6Network("2001:db8:40::/44")]
    alias = [ipaddress.IPv6Network("2001:db8:80::/41"), ipaddress.IPv6Network("2001:db8::/44")]
    lines = [str(a) for a in addrs] + ["garbage", "# comment", str(addrs[0])]
    hl, bl, al = write(tmp_path / "h", lines), write(tmp_path / "b", block), write(tmp_path / "a", alias)
    out = tmp_path / "kept.txt"
    assert cli.main(["filter", "--hitlist", hl, "--blocklist", bl, "--aliased", al, "--out", str(out), "--json"]) == 0
    counts = json.loads(capsys.readouterr().out)
    in_alias = [a for a in addrs if any(a in n for n in alias)]
    in_block = [a for a in addrs if a not in in_alias and any(a in n for n in block)]
    kept = [a for a in addrs if a not in in_alias and a not in in_block]
    assert counts == {"input": 300, "skipped_lines": 1, "removed_aliased": len(in_alias),
                      "removed_blocklist": len(in_block), "kept": len(kept)}
    assert in_alias and in_block
    assert [ipaddress.IPv6Address(x) for x in out.read_text().split()] == kept


def test_filter_detects_aliases_without_sending_to_blocked_space(tmp_path, capsys):
    # no real network is needed: every candidate prefix is blocklisted, so the prober never sends
    hl = write(tmp_path / "h", ["2001:db8::1", "2001:db8::2"])
    bl = write(tmp_path / "b", ["2001:db8::/32"])
    res = tmp_path / "aliased.txt"
    assert cli.main(["filter", "--hitlist", hl, "--blocklist", bl, "--detect-aliases", "--aliased-out", str(res)]) == 0
    assert "kept              0" in capsys.readouterr().out
    assert [x for x in res.read_text().splitlines() if not x.startswith("#")] == []


# ---- config file -------------------------------------------------------------------------------------

def test_config_file_supplies_defaults(tmp_path, monkeypatch, capsys):
    hl = write(tmp_path / "h.txt", ["2001:db8::1", "2001:db8::2"])
    cfg = tmp_path / "iot6scan.toml"
    cfg.write_text(f'seed = 4\ni-have-no-blocklist = true\n[portscan]\nhitlist = "{hl}"\nports = "mqtt,telnet,coap"\n')
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert cli.main(["portscan", "--dry-run"]) == 0
    assert "would probe 6 targets" in capsys.readouterr().out
    assert cli.main(["portscan", "--dry-run", "--ports", "mqtt"]) == 0  # flags win
    assert "would probe 2 targets" in capsys.readouterr().out


@pytest.mark.parametrize("text", ["rate = [", "colour = 3\n", "[portscan]\nrate = -1\n"])
def test_bad_config_file_is_a_usage_error(tmp_path, monkeypatch, capsys, text):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert cli.main(["report", "--in", "x", "--out", "y"]) == 1
    assert str(cfg) in capsys.readouterr().err


# ---- report ------------------------------------------------------------------------------------------

def test_report_churn_matches_analysis(tmp_path, capsys):
    ref = responsive_snapshot({"mqtt": ["::1", "::2", "::3"], "telnet": ["::1"]}, campaign_id="ref")
    sub = responsive_snapshot({"mqtt": ["::2", "::3", "::4", "::5"], "coap": ["::9"]}, campaign_id="sub")
    persist_snapshot(ref, tmp_path / "a")
    persist_snapshot(sub, tmp_path / "b")
    out = tmp_path / "report"
    assert cli.main(["report", "--in", f"{tmp_path / 'a'},{tmp_path / 'b'}", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "churn.csv").read_text())))
    oracle = agg.churn(load_snapshot(tmp_path / "a"), load_snapshot(tmp_path / "b"))
    assert len(rows) == len(oracle.rows) == 3
    for row in rows:
        r = oracle.rows[next(pp for pp in CANONICAL if pp.label == row["protocol"])]
        assert (int(row["both"]), int(row["reference_only"]), int(row["subsequent_only"])) == \
            (r.both, r.reference_only, r.subsequent_only)
        assert float(row["both_pct"]) == pytest.approx(r.both_pct, abs=1e-4)
    meta = json.loads((out / "metadata.json").read_text())
    assert [s["id"] for s in meta["snapshots"]] == ["ref", "sub"]


# ---- full pipeline against the farm -------------------------------------------------------------------

def test_pipeline_against_farm(tmp_path, farm_factory, capsys):
    farm = farm_factory(*[Listener(pp) for pp in CANONICAL if pp.key != "amqps"],
                        Listener(by_name("amqps"), Behavior.require_client_cert()))
    pm = tmp_path / "ports.json"
    pm.write_text(json.dumps(farm.port_map()))
    hl = write(tmp_path / "h.txt", ["::1"])
    bl = write(tmp_path / "b.txt", ["2001:db8::/32"])
    snap = tmp_path / "snap"
    assert cli.main(["portscan", "--hitlist", hl, "--blocklist", bl, "--port-map", f"@{pm}", "--snapshot", str(snap),
                     "--rate", "200", "--timeout", "2", "--seed", "1"]) == 0
    campaign = json.loads((snap / "campaign.json").read_text())
    assert campaign["config"]["portscan"]["rate"] == 200.0
    assert campaign["config"]["portscan"]["seed"] == 1
    assert len(campaign["config"]["ports"]) == 11
    assert cli.main(["appscan", "--snapshot", str(snap), "--blocklist", bl, "--port-map", f"@{pm}",
                     "--telnet-window", "0.3", "--handshake-timeout", "3"]) == 0
    assert "11 handshakes, 10 successful" in capsys.readouterr().out
    trust = tmp_path / "root.pem"
    trust.write_bytes(trust_store_pem(0))
    out = tmp_path / "report"
    assert cli.main(["report", "--in", str(snap), "--out", str(out), "--trust-store", str(trust),
                     "--eval-time", "2024-06-01T00:00:00Z"]) == 0
    rates = {r["protocol"]: r for r in csv.DictReader(io.StringIO((out / "handshake_rates.csv").read_text()))}
    assert rates["AMQPs"]["rate"] == "0.0000" and rates["AMQP"]["rate"] == "1.0000"
    assert cli.main(["certlab", "--in", str(snap), "--trust-store", str(trust), "--out", str(tmp_path / "c.jsonl"),
                     "--eval-time", "2024-06-01T00:00:00Z"]) == 0
    assert "Trusted" in capsys.readouterr().out
    # a second appscan finds nothing left to do
    assert cli.main(["appscan", "--snapshot", str(snap), "--blocklist", bl, "--dry-run"]) == 0
    assert "would handshake with 0 open targets (11 already done)" in capsys.readouterr().out


def test_portscan_refuses_changed_resume(tmp_path, capsys):
    hl = write(tmp_path / "h.txt", ["::1"])
    snap = tmp_path / "snap"
    common = ["portscan", "--hitlist", hl, "--i-have-no-blocklist", "--snapshot", str(snap), "--timeout", "0.5",
              "--port-map", "telnet=1"]
    assert cli.main(common + ["--ports", "telnet"]) == 0
    assert cli.main(common + ["--ports", "telnet", "--seed", "9"]) == 1
    assert "different seed" in capsys.readouterr().err


def test_mockfarm_subcommand(tmp_path, capsys):
    pm, root = tmp_path / "pm.json", tmp_path / "root.pem"
    assert cli.main(["mockfarm", "--duration", "0.2", "--port-map-out", str(pm), "--trust-store-out", str(root)]) == 0
    ports = json.loads(pm.read_text())
    assert set(ports) == {pp.key for pp in CANONICAL}
    assert json.loads(capsys.readouterr().out.splitlines()[0]) == ports
    assert root.read_bytes() == trust_store_pem(0)
