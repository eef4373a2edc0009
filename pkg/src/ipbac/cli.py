"""Command-line entry points: ``ipbacd`` (service) and ``ipbac-bench``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .bench import (
    WorkloadSpec,
    alpha_sweep,
    chain_length_scaling,
    generate_workload,
    latency_summary,
    measure_latency,
    run_comparison,
    seed_store,
    write_report,
)
from .engine import Decision, EngineConfig, review_threshold
from .errors import IPBACError
from .policy import policy_to_dict

logger = logging.getLogger("ipbac")


def load_engine_config(path: Optional[str]) -> EngineConfig:
    """Read a config file; relative rule-base / policy paths are taken
    relative to the file's directory."""
    if not path:
        return EngineConfig()
    base = Path(path).resolve().parent
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("rule_base_path", "policy_path"):
        if isinstance(doc.get(key), str) and not os.path.isabs(doc[key]):
            doc[key] = str(base / doc[key])
    return EngineConfig.from_dict(doc)


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


# -- ipbacd --------------------------------------------------------------------


def daemon_main(argv: Optional[Sequence[str]] = None) -> int:
    from .service import DecisionService, serve

    ap = argparse.ArgumentParser(prog="ipbacd", description="Run the access decision service.")
    ap.add_argument("--config", default=os.environ.get("IPBAC_CONFIG"), help="engine config JSON (env IPBAC_CONFIG)")
    ap.add_argument("--data-dir", default=os.environ.get("IPBAC_DATA_DIR"), help="chain storage (env IPBAC_DATA_DIR)")
    ap.add_argument("--listen", type=parse_listen, default=("127.0.0.1", 8080), help="host:port (default 127.0.0.1:8080)")
    ap.add_argument("--request-log", help="append one JSON line per decision to this file (default: stderr)")
    ap.add_argument("--no-fsync", action="store_true", help="skip fsync after appends (tests/benchmarks only)")
    ap.add_argument("--log-level", default="INFO")
    args = ap.parse_args(argv)
    if not args.data_dir:
        ap.error("--data-dir (or IPBAC_DATA_DIR) is required")

    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s %(message)s")
    req_log = logging.getLogger("ipbac.requests")
    req_log.propagate = False
    req_log.setLevel(logging.INFO)
    handler = logging.FileHandler(args.request_log) if args.request_log else logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    req_log.addHandler(handler)

    try:
        service = DecisionService(args.data_dir, load_engine_config(args.config), fsync=not args.no_fsync)
    except (IPBACError, OSError, ValueError) as exc:
        logger.error("cannot start: %s", exc)
        return 2
    host, port = args.listen
    server = serve(service, host, port)

    def stop(signum, frame):  # serve_forever must be stopped from another thread
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    logger.info("listening on %s (data dir %s)", server.url, args.data_dir)
    print(f"ipbacd listening on {server.url}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


# -- ipbac-bench ---------------------------------------------------------------


def _load_spec(path: Optional[str]) -> WorkloadSpec:
    if not path:
        return WorkloadSpec()
    with open(path, encoding="utf-8") as fh:
        return WorkloadSpec.from_dict(json.load(fh))


def _cmd_run(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec)
    config = load_engine_config(args.config)
    workload = generate_workload(spec)
    report = run_comparison(workload, config, latency_repeats=0)
    if args.mode == "over-wire":
        report.latency_us = measure_latency(workload, config, "over-wire", url=args.url)
    elif args.repeats:
        report.latency_us = measure_latency(workload, config, args.mode, repeats=args.repeats)
    extra = {
        "workload": json.dumps(asdict(spec)),
        "pre-seeded records": workload.total_records,
        "latency mode": args.mode,
    }
    if args.sweep:
        extra["alpha sweep (alpha, grants)"] = alpha_sweep(workload, config, [0.1, config.alpha, 0.5, 0.9])
    if args.scaling:
        extra["median latency by chain length (us)"] = chain_length_scaling(config)
    write_report(report, args.out, extra)
    print((Path(args.out) / "report.txt").read_text(), end="")
    return 0


def _cmd_seed(args: argparse.Namespace) -> int:
    workload = generate_workload(_load_spec(args.spec))
    store = seed_store(workload, args.data_dir)
    with open(Path(args.data_dir) / "requests.jsonl", "w", encoding="utf-8") as fh:
        for req in workload.requests:
            fh.write(json.dumps(req.to_dict()) + "\n")
    policy_path = Path(args.data_dir) / "policy.json"
    policy_path.write_text(json.dumps(policy_to_dict(workload.policies), indent=1))
    print(f"seeded {store.total_records()} records for {len(store.principals())} principals in {args.data_dir}")
    print(f"policy: {policy_path}; request stream: {Path(args.data_dir) / 'requests.jsonl'}")
    return 0


def _cmd_latency(args: argparse.Namespace) -> int:
    workload = generate_workload(_load_spec(args.spec))
    config = load_engine_config(args.config)
    series = measure_latency(workload, config, args.mode, url=args.url, repeats=args.repeats)
    print(json.dumps(latency_summary(series), indent=2))
    return 0


def _cmd_review(args: argparse.Namespace) -> int:
    entries = []
    with open(args.log, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                entries.append((Decision.from_dict(doc["decision"]), bool(doc["correct"])))
            except (KeyError, ValueError, TypeError) as exc:
                print(f"{args.log}:{n}: bad entry ({exc})", file=sys.stderr)
                return 2
    try:
        alpha = review_threshold(entries, args.alpha, min_samples=args.min_samples)
    except IPBACError as exc:
        print(f"review failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"current_alpha": args.alpha, "suggested_alpha": alpha, "entries": len(entries)}))
    return 0


def bench_main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="ipbac-bench", description="RBAC vs IPBAC workload replay and latency runs.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="grant comparison + latency report")
    run.add_argument("--spec", help="WorkloadSpec JSON (default: built-in workload)")
    run.add_argument("--config", help="engine config JSON (default: alpha=0.2645, theta=1)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--mode", choices=("in-process", "in-memory", "over-wire"), default="in-process")
    run.add_argument("--url", help="service url for --mode over-wire")
    run.add_argument("--repeats", type=int, default=5, help="latency replays (min per request); 0 skips latency")
    run.add_argument("--sweep", action="store_true", help="also sweep alpha")
    run.add_argument("--scaling", action="store_true", help="also measure latency at chain length 100 vs 15000")
    run.set_defaults(func=_cmd_run)

    seed = sub.add_parser("seed", help="write a workload's chains, policy and requests into a service data dir")
    seed.add_argument("--spec")
    seed.add_argument("--data-dir", required=True)
    seed.set_defaults(func=_cmd_seed)

    lat = sub.add_parser("latency", help="latency series summary only")
    lat.add_argument("--spec")
    lat.add_argument("--config")
    lat.add_argument("--mode", choices=("in-process", "in-memory", "over-wire"), default="in-process")
    lat.add_argument("--url")
    lat.add_argument("--repeats", type=int, default=5)
    lat.set_defaults(func=_cmd_latency)

    rev = sub.add_parser("review", help="suggest alpha from labelled decisions")
    rev.add_argument("log", help='JSONL of {"decision": <decision document>, "correct": bool}')
    rev.add_argument("--alpha", type=float, default=EngineConfig().alpha, help="alpha currently in force")
    rev.add_argument("--min-samples", type=int, default=100)
    rev.set_defaults(func=_cmd_review)

    args = ap.parse_args(argv)
    if getattr(args, "mode", None) == "over-wire" and not args.url:
        ap.error("--mode over-wire needs --url")
    logging.basicConfig(level=logging.WARNING)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(bench_main())
