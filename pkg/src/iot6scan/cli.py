"""``iot6scan`` command line.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import asyncio
import datetime as dt
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, certlab, targetprep
from .protocols import CANONICAL, MachineOptions, TlsVersion, by_name, parse_ports
from .scanner import AppScanConfig, ScanTarget, SnapshotWriter, SocketLayer, app_scan, load_snapshot, port_scan
from .scanner.snapshot import rfc3339

log = logging.getLogger("iot6scan")

CONFIG_ENV = "IOT6SCAN_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


# ---- argument types -----------------------------------------------------------

def positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0: {text!r}")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return v


def ports_arg(text: str) -> list:
    try:
        return parse_ports(text)
    except (KeyError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def utc_time(text: str) -> dt.datetime:
    try:
        t = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO-8601 time: {text!r}") from None
    return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)


_TLS_NAMES = {"1.0": TlsVersion.TLS1_0, "1.1": TlsVersion.TLS1_1, "1.2": TlsVersion.TLS1_2, "1.3": TlsVersion.TLS1_3}


def tls_version_arg(text: str) -> TlsVersion:
    key = text.strip().upper().removeprefix("TLSV").removeprefix("TLS").replace("_", ".")
    try:
        return _TLS_NAMES[key]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown TLS version {text!r} (use 1.0, 1.1, 1.2 or 1.3)") from None


def port_map_arg(text: str) -> dict[str, int]:
    """``mqtt=1883,coap=5683`` or ``@file.json`` (as printed by ``iot6scan mockfarm``)."""
    if text.startswith("@"):
        try:
            raw = json.loads(Path(text[1:]).read_text())
        except (OSError, ValueError) as exc:
            raise argparse.ArgumentTypeError(f"cannot read port map {text[1:]}: {exc}") from None
    else:
        raw = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            key, sep, port = item.partition("=")
            if not sep:
                raise argparse.ArgumentTypeError(f"expected KEY=PORT, got {item!r}")
            raw[key.strip()] = port.strip()
    out = {}
    for key, port in raw.items():
        try:
            pp = by_name(key)
            p = int(port)
        except (KeyError, ValueError):
            raise argparse.ArgumentTypeError(f"bad port map entry {key}={port}") from None
        if not 0 < p < 65536:
            raise argparse.ArgumentTypeError(f"port out of range in {key}={port}")
        out[pp.key] = p
    return out


# ---- parser --------------------------------------------------------------------

def _add_blocklist(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocklist", metavar="PATH", help="prefixes that must never receive a packet")
    p.add_argument("--i-have-no-blocklist", action="store_true",
                   help="acknowledge scanning without a blocklist")


def _add_port_map(p: argparse.ArgumentParser) -> None:
    p.add_argument("--port-map", type=port_map_arg, default={}, metavar="MAP",
                   help="dial other ports than the canonical ones, e.g. mqtt=41883 or @ports.json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iot6scan", description="IPv6 IoT protocol scanner")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("filter", help="drop aliased and blocklisted addresses from a hitlist")
    p.add_argument("--hitlist", required=True, metavar="PATH")
    p.add_argument("--blocklist", metavar="PATH")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--aliased", metavar="PATH", help="known aliased prefixes")
    group.add_argument("--detect-aliases", action="store_true",
                       help="probe the hitlist's prefixes for aliasing (sends traffic)")
    p.add_argument("--seed", type=int, default=0, help="seed for alias probe addresses")
    p.add_argument("--alias-port", type=int, default=80, help="TCP port used by alias probes")
    p.add_argument("--alias-rate", type=positive_float, default=100.0, help="alias probes per second")
    p.add_argument("--alias-timeout", type=positive_float, default=2.0)
    p.add_argument("--aliased-out", metavar="PATH", help="write detected aliased prefixes here")
    p.add_argument("--out", metavar="PATH", help="write the remaining addresses here")
    p.add_argument("--json", action="store_true", help="print counts as JSON")

    p = sub.add_parser("portscan", help="one probe per (address, protocol-port)")
    p.add_argument("--hitlist", "--targets", dest="hitlist", required=True, metavar="PATH")
    _add_blocklist(p)
    p.add_argument("--aliased", metavar="PATH")
    p.add_argument("--ports", type=ports_arg, default=list(CANONICAL), metavar="LIST",
                   help="'all' or comma-separated keys such as mqtt,coaps (default: all)")
    p.add_argument("--rate", type=positive_float, default=1000.0, help="probes per second (default 1000)")
    p.add_argument("--timeout", type=positive_float, default=5.0, help="per-probe timeout in seconds")
    p.add_argument("--concurrency", type=positive_int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snapshot", "--out", dest="snapshot", metavar="DIR",
                   help="snapshot directory (resumed if it exists)")
    p.add_argument("--campaign-id")
    _add_port_map(p)
    p.add_argument("--dry-run", action="store_true", help="print the target count and send nothing")

    p = sub.add_parser("appscan", help="application-layer handshakes with the open ports of a snapshot")
    p.add_argument("--snapshot", "--in", dest="snapshot", required=True, metavar="DIR")
    _add_blocklist(p)
    p.add_argument("--connect-timeout", type=positive_float, default=5.0)
    p.add_argument("--handshake-timeout", type=positive_float, default=10.0)
    p.add_argument("--concurrency", type=positive_int, default=64)
    p.add_argument("--rate", type=positive_float, default=None, help="handshakes per second (default unlimited)")
    p.add_argument("--sni", metavar="NAME", help="send this SNI name (default: none)")
    p.add_argument("--tls-max", type=tls_version_arg, default=TlsVersion.TLS1_3, help="highest TLS version offered")
    p.add_argument("--mqtt-client-id", default="")
    p.add_argument("--telnet-window", type=positive_float, default=5.0)
    p.add_argument("--seed", type=int, default=None, help="default: the port scan's seed")
    _add_port_map(p)
    p.add_argument("--dry-run", action="store_true", help="print the target count and send nothing")

    p = sub.add_parser("report", help="aggregate analyses as CSV/JSON")
    p.add_argument("--in", dest="inputs", required=True, metavar="DIR[,DIR...]",
                   help="snapshot directories; the first is the churn reference")
    p.add_argument("--enrich", metavar="DIR", help="directory with routing.csv, asmeta.csv, geo.csv")
    p.add_argument("--trust-store", metavar="PEM", help="root certificates for certificate analyses")
    p.add_argument("--eval-time", type=utc_time, help="certificate evaluation time (default: latest scan start)")
    p.add_argument("--top-k", type=positive_int, default=25)
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("mockfarm", help="run loopback protocol responders")
    p.add_argument("--config", metavar="TOML", help="farm description (default: all 11 protocol-ports, normal)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=0.0, help="seconds to run (default: until interrupted)")
    p.add_argument("--port-map-out", metavar="PATH", help="write the bound ports as JSON")
    p.add_argument("--trust-store-out", metavar="PATH", help="write the farm root certificate (PEM)")

    p = sub.add_parser("certlab", help="deduplicate and classify certificates from snapshots")
    p.add_argument("--in", dest="inputs", required=True, metavar="DIR[,DIR...]")
    p.add_argument("--trust-store", required=True, metavar="PEM")
    p.add_argument("--eval-time", type=utc_time)
    p.add_argument("--out", metavar="PATH", help="write one JSON record per certificate")
    return parser


# ---- config file --------------------------------------------------------------------

def _subparsers(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def apply_config_file(parser: argparse.ArgumentParser, path: str) -> None:
    """Install defaults from a TOML file.

    Top-level keys apply to every subcommand that has such an option;
    ``[portscan]``-style tables apply to one subcommand. Command-line flags
    still win.
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"{CONFIG_ENV}={path}: {exc}") from None
    subs = _subparsers(parser)
    scoped = {k: v for k, v in raw.items() if isinstance(v, dict) and k in subs}
    common = {k: v for k, v in raw.items() if k not in scoped}
    used = set()
    for name, sp in subs.items():
        actions = {a.dest: a for a in sp._actions}
        values = {**{k: v for k, v in common.items() if k.replace("-", "_") in actions}, **scoped.get(name, {})}
        defaults = {}
        for key, value in values.items():
            dest = key.replace("-", "_")
            action = actions.get(dest)
            if action is None:
                raise UsageError(f"{path}: unknown option {key!r} for {name}")
            if action.type is not None and isinstance(value, (str, int, float)) and not isinstance(value, bool):
                try:
                    value = action.type(str(value))
                except argparse.ArgumentTypeError as exc:
                    raise UsageError(f"{path}: {key}: {exc}") from None
            defaults[dest] = value
            if action.required:
                action.required = False
            used.add(key)
        sp.set_defaults(**defaults)
    unknown = set(common) - used
    if unknown:
        raise UsageError(f"{path}: unknown option(s) {sorted(unknown)}")


# ---- helpers -------------------------------------------------------------------------

def _effective(args: argparse.Namespace, drop=("command", "verbose")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in drop:
            continue
        if isinstance(v, list):
            v = [getattr(x, "key", x) for x in v]
        elif isinstance(v, TlsVersion):
            v = v.value
        elif isinstance(v, dt.datetime):
            v = rfc3339(v)
        out[k] = v
    return out


def _load_blocklist(args) -> Optional[targetprep.Blocklist]:
    if args.blocklist:
        return targetprep.load_blocklist(args.blocklist)
    if not args.i_have_no_blocklist:
        raise UsageError("--blocklist is required (or pass --i-have-no-blocklist)")
    log.warning("scanning without a blocklist")
    return None


def _split_dirs(text: str) -> list[str]:
    dirs = [d for d in (x.strip() for x in text.split(",")) if d]
    if not dirs:
        raise UsageError("no input directories")
    return dirs


def _file_digest(path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---- subcommands -------------------------------------------------------------------------

def _alias_prober(port: int, timeout: float, rate: float, bl: Optional[targetprep.Blocklist]):
    """Any TCP answer (accept or RST) counts as a response; silence does not."""
    import socket

    from .scanner import TokenBucket

    bucket = TokenBucket(rate)
    blocked = bl.trie() if bl else None

    async def probe(addr) -> bool:
        if blocked is not None and blocked.covers(addr):
            return False
        await bucket.acquire()
        sock = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
        sock.setblocking(False)
        try:
            await asyncio.wait_for(asyncio.get_running_loop().sock_connect(sock, (str(addr), port)), timeout)
            return True
        except ConnectionRefusedError:
            return True
        except (OSError, asyncio.TimeoutError):
            return False
        finally:
            sock.close()

    return probe


def cmd_filter(args) -> int:
    hitlist = targetprep.load_hitlist(args.hitlist)
    bl = targetprep.load_blocklist(args.blocklist) if args.blocklist else None
    aliased = targetprep.load_aliased_prefixes(args.aliased) if args.aliased else None
    if args.detect_aliases:
        candidates = targetprep.candidate_prefixes(hitlist.entries)
        aliased = targetprep.detect_aliased_prefixes(
            candidates, _alias_prober(args.alias_port, args.alias_timeout, args.alias_rate, bl), seed=args.seed)
        if args.aliased_out:
            targetprep.write_prefix_file(aliased.prefixes, args.aliased_out, f"detected with seed {args.seed}")
    report: dict = {}
    kept = targetprep.filter_targets(hitlist, aliased, bl, report)
    counts = {"input": len(hitlist), "skipped_lines": hitlist.skipped, **report}
    if args.out:
        Path(args.out).write_text("".join(f"{a}\n" for a in kept), encoding="utf-8")
    if args.json:
        print(json.dumps(counts, sort_keys=True))
    else:
        for k in ("input", "skipped_lines", "removed_aliased", "removed_blocklist", "kept"):
            print(f"{k:<18}{counts[k]}")
    return EXIT_OK


def cmd_portscan(args) -> int:
    bl = _load_blocklist(args)
    hitlist = targetprep.load_hitlist(args.hitlist)
    aliased = targetprep.load_aliased_prefixes(args.aliased) if args.aliased else None
    report: dict = {}
    kept = targetprep.filter_targets(hitlist, aliased, bl, report)
    targets = [ScanTarget(a, pp) for a in kept for pp in args.ports]
    if args.dry_run:
        print(f"would probe {len(targets)} targets ({len(kept)} addresses x {len(args.ports)} ports); "
              f"removed {report['removed_aliased']} aliased, {report['removed_blocklist']} blocklisted")
        return EXIT_OK
    if not args.snapshot:
        raise UsageError("--snapshot is required unless --dry-run is given")
    config = _effective(args)
    config.update(hitlist_sha256=_file_digest(args.hitlist), blocklist_sha256=_file_digest(args.blocklist),
                  aliased_sha256=_file_digest(args.aliased), version=__version__)
    campaign = args.campaign_id or "c-" + hashlib.sha256(
        json.dumps({k: v for k, v in config.items() if k not in ("snapshot", "port_map")}, sort_keys=True).encode()
    ).hexdigest()[:12]
    writer = SnapshotWriter(args.snapshot, campaign, dt.datetime.now(dt.timezone.utc))
    previous = writer.meta["config"].get("portscan")
    if previous is not None:
        pinned = ("ports", "seed", "hitlist_sha256", "blocklist_sha256", "aliased_sha256")
        changed = [k for k in pinned if previous.get(k) != config.get(k)]
        if changed:
            raise UsageError(f"{args.snapshot} holds a scan with different {', '.join(changed)}; "
                             "use a new snapshot directory")
    writer.update_config(portscan=config, ports=config["ports"])
    skip = writer.done_keys("portscan")
    if skip:
        log.info("resuming: %d target(s) already probed", len(skip))
    results = asyncio.run(port_scan(
        targets, args.rate, args.timeout, args.seed, layer=SocketLayer(), concurrency=args.concurrency,
        blocklist=bl, port_map=args.port_map, skip=skip, on_result=writer.add_probe,
    ))
    writer.compact_ledger()
    print(f"probed {len(results)} targets, {sum(r.open for r in results)} open -> {args.snapshot}")
    return EXIT_OK


def cmd_appscan(args) -> int:
    bl = _load_blocklist(args)
    snap = load_snapshot(args.snapshot)
    writer = SnapshotWriter(args.snapshot)
    skip = writer.done_keys("appscan")
    todo = [t for t in snap.open_targets() if t.key not in skip]
    if args.dry_run:
        print(f"would handshake with {len(todo)} open targets ({len(skip)} already done)")
        return EXIT_OK
    seed = args.seed if args.seed is not None else snap.config.get("portscan", {}).get("seed", 0)
    config = _effective(args)
    config.update(seed=seed, version=__version__, blocklist_sha256=_file_digest(args.blocklist))
    writer.update_config(appscan=config)
    cfg = AppScanConfig(
        connect_timeout=args.connect_timeout,
        handshake_timeout=args.handshake_timeout,
        machine=MachineOptions(mqtt_client_id=args.mqtt_client_id, telnet_window=args.telnet_window,
                               sni=args.sni, tls_offered_max=args.tls_max, seed=seed),
        port_map=args.port_map,
        rate=args.rate,
    )
    results = asyncio.run(app_scan(todo, args.concurrency, cfg, layer=SocketLayer(), blocklist=bl,
                                   on_result=writer.add_handshake))
    writer.compact_ledger()
    ok = sum(o.status.value == "Success" for _, o in results)
    print(f"{len(results)} handshakes, {ok} successful -> {args.snapshot}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .analysis import EnrichmentTables, ReportOptions, write_report

    snaps = [load_snapshot(d) for d in _split_dirs(args.inputs)]
    for s in snaps:
        s.check_staging()
    eval_time = args.eval_time or max(s.started_at for s in snaps)
    opts = ReportOptions(
        top_k=args.top_k,
        eval_time=eval_time,
        enrichment=EnrichmentTables.load(args.enrich) if args.enrich else None,
        trust_store=certlab.TrustStore.load(args.trust_store, eval_time) if args.trust_store else None,
    )
    written = write_report(snaps, args.out, opts)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_mockfarm(args) -> int:
    from .mockfarm import all_protocols, load_farm_config, start_farm, trust_store_pem

    config = load_farm_config(args.config) if args.config else all_protocols(seed=args.seed)
    farm = start_farm(config)
    try:
        pm = farm.port_map()
        print(json.dumps(pm, sort_keys=True), flush=True)
        if args.port_map_out:
            Path(args.port_map_out).write_text(json.dumps(pm, sort_keys=True, indent=2) + "\n")
        if args.trust_store_out:
            Path(args.trust_store_out).write_bytes(trust_store_pem(config.seed))
        stop = threading.Event()
        if threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGTERM, lambda *_: stop.set())
        try:
            stop.wait(args.duration if args.duration > 0 else None)
        except KeyboardInterrupt:
            pass
        hits = farm.hits
        for (addr, key), n in sorted(hits.items()):
            log.info("hits [%s] %s: %d", addr, key, n)
    finally:
        farm.stop()
    return EXIT_OK


def cmd_certlab(args) -> int:
    from collections import Counter

    from .analysis import certificate_records

    snaps = [load_snapshot(d) for d in _split_dirs(args.inputs)]
    eval_time = args.eval_time or max(s.started_at for s in snaps)
    ts = certlab.TrustStore.load(args.trust_store, eval_time)
    result = certificate_records(snaps, ts)
    if args.out:
        certlab.write_jsonl(result.records, args.out, {"eval_time": rfc3339(eval_time), "trust_store": ts.digest()})
    counts = Counter(r.trust.value if r.trust else "Quarantined" for r in result.records)
    print(f"{len(result.records)} distinct certificates from {result.chains_seen} chains")
    for k, n in sorted(counts.items()):
        print(f"  {k:<26}{n}")
    return EXIT_OK


COMMANDS = {
    "filter": cmd_filter,
    "portscan": cmd_portscan,
    "appscan": cmd_appscan,
    "report": cmd_report,
    "mockfarm": cmd_mockfarm,
    "certlab": cmd_certlab,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        cfg_path = os.environ.get(CONFIG_ENV)
        if cfg_path:
            apply_config_file(parser, cfg_path)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"iot6scan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help, --version, or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"iot6scan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"iot6scan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
