"""Operations CLI: scenario runs, MAC comparisons, energy reports, serve mode.

Exit codes: 0 success, 2 invalid scenario file, 3 bind failure,
4 assertion failure (``--assert`` or compare-mac regression).  Set
HEARTH_LOG=debug|info|warning for logging verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .metrics import compute_report
from .scenario import ScenarioError, build_world, load_scenario, run_scenario

log = logging.getLogger("hearth")

EXIT_OK = 0
EXIT_BAD_SCENARIO = 2
EXIT_BIND_FAILURE = 3
EXIT_ASSERTION = 4


def _setup_logging() -> None:
    level = os.environ.get("HEARTH_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(path: str) -> dict:
    try:
        return load_scenario(path)
    except FileNotFoundError:
        print(f"scenario not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_SCENARIO)
    except ScenarioError as exc:
        print(f"invalid scenario {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_SCENARIO)


def _check_asserts(doc: dict, report: dict) -> list[str]:
    failures = []
    asserts = doc.get("asserts", {})
    ratio_min = asserts.get("delivery_ratio_min")
    if ratio_min is not None:
        ratio = report["delivery"]["ratio"]
        if ratio is None or ratio < ratio_min:
            failures.append(f"delivery ratio {ratio} < {ratio_min}")
    p99_max = asserts.get("cmd_p99_max_s")
    if p99_max is not None:
        p99 = report["commands"]["latency_p99_s"]
        if p99 is not None and p99 > p99_max:
            failures.append(f"command p99 {p99}s > {p99_max}s")
    expired_max = asserts.get("expired_sessions_max")
    if expired_max is not None:
        expired = report["server"]["sessions_expired"]
        if expired > expired_max:
            failures.append(f"expired sessions {expired} > {expired_max}")
    return failures


def cmd_sim_run(args) -> int:
    doc = _load(args.scenario)
    world = run_scenario(doc, seed=args.seed)
    report = compute_report(world.sim.trace.events, end_us=world.sim.now)
    if args.trace:
        world.sim.trace.write(args.trace)
        log.info("trace written to %s (%d events)", args.trace, len(world.sim.trace))
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    if args.assert_checks:
        failures = _check_asserts(doc, report)
        for failure in failures:
            print(f"ASSERTION FAILED: {failure}", file=sys.stderr)
        if failures:
            return EXIT_ASSERTION
        print("all scenario assertions passed", file=sys.stderr)
    return EXIT_OK


def cmd_compare_mac(args) -> int:
    doc = _load(args.scenario)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = list(range(args.seeds)) if args.seeds else [doc.get("seed", 0)]
    rows = []
    results = {}
    for mode in modes:
        ratios, attempts, fails = [], [], 0
        for seed in seeds:
            run_doc = json.loads(json.dumps(doc))
            run_doc.setdefault("mac", {})["mode"] = mode
            world = run_scenario(run_doc, seed=seed)
            rep = compute_report(world.sim.trace.events, end_us=world.sim.now)
            ratios.append(rep["delivery"]["ratio"] or 0.0)
            if rep["mac"]["avg_attempts"]:
                attempts.append(rep["mac"]["avg_attempts"])
            fails += rep["mac"]["failed"]
        mean_ratio = sum(ratios) / len(ratios)
        results[mode] = mean_ratio
        rows.append((mode, mean_ratio, min(ratios),
                     sum(attempts) / len(attempts) if attempts else 1.0, fails))
    print(f"{'mode':10} {'delivery':>9} {'worst':>7} {'attempts':>9} {'failures':>9}")
    for mode, mean_ratio, worst, avg_attempts, fails in rows:
        print(f"{mode:10} {mean_ratio:9.4f} {worst:7.4f} {avg_attempts:9.3f} {fails:9d}")
    if "selforg" in results and "naive" in results:
        if results["selforg"] < results["naive"]:
            print("ASSERTION FAILED: self-organized MAC underperformed the naive baseline",
                  file=sys.stderr)
            return EXIT_ASSERTION
    return EXIT_OK


def cmd_report_energy(args) -> int:
    doc = _load(args.scenario)
    world = run_scenario(doc, seed=args.seed)
    report = compute_report(world.sim.trace.events, end_us=world.sim.now)
    print(f"{'device':10} {'kind':16} {'avg mA':>9} {'lifetime':>12} {'verdict':>14}")
    for entity in sorted(report["battery_estimate"]):
        est = report["battery_estimate"][entity]
        meta_kind = next((d.spec.kind.name for d in world.devices.values()
                          if f"dev{d.device_id}" == entity), "?")
        if est.get("mains"):
            print(f"{entity:10} {meta_kind:16} {'n/a':>9} {'n/a':>12} {'mains':>14}")
            continue
        years = est["lifetime_years"]
        verdict = "ok" if est["in_window"] else "OUT OF WINDOW"
        print(f"{entity:10} {meta_kind:16} {est['avg_current_mA']:9.4f} "
              f"{years:10.2f}yr {verdict:>14}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .serve import serve_forever  # deferred: pulls in fastapi/uvicorn

    doc = _load(args.scenario)
    host, _, port_s = args.bind.rpartition(":")
    host = host or "127.0.0.1"
    try:
        port = int(port_s)
    except ValueError:
        print(f"invalid bind address {args.bind!r}", file=sys.stderr)
        return EXIT_BIND_FAILURE
    return serve_forever(doc, host=host, port=port, speed=args.speed,
                         trace_path=args.trace, wire_port=args.wire_port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hearth",
        description="smart-home stack simulator and operations CLI")
    sub = parser.add_subparsers(dest="group", required=True)

    sim = sub.add_parser("sim", help="batch simulation commands")
    sim_sub = sim.add_subparsers(dest="sim_cmd", required=True)

    run_p = sim_sub.add_parser("run", help="run a scenario deterministically")
    run_p.add_argument("scenario")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--trace", default=None, help="write the JSONL trace here")
    run_p.add_argument("--report", default=None, help="write the JSON report here")
    run_p.add_argument("--assert", dest="assert_checks", action="store_true",
                       help="evaluate the scenario's asserts block (CI mode)")
    run_p.set_defaults(fn=cmd_sim_run)

    cmp_p = sim_sub.add_parser("compare-mac",
                               help="same scenario under different MAC modes")
    cmp_p.add_argument("scenario")
    cmp_p.add_argument("--modes", default="selforg,naive")
    cmp_p.add_argument("--seeds", type=int, default=0,
                       help="run seeds 0..N-1 instead of the scenario seed")
    cmp_p.set_defaults(fn=cmd_compare_mac)

    rep = sub.add_parser("report", help="analysis reports")
    rep_sub = rep.add_subparsers(dest="report_cmd", required=True)
    energy_p = rep_sub.add_parser("energy", help="per-device battery table")
    energy_p.add_argument("scenario")
    energy_p.add_argument("--seed", type=int, default=None)
    energy_p.set_defaults(fn=cmd_report_energy)

    serve_p = sub.add_parser("serve", help="paced live mode with the web API")
    serve_p.add_argument("scenario")
    serve_p.add_argument("--bind", default="127.0.0.1:8787")
    serve_p.add_argument("--wire-port", type=int, default=None,
                         help="rendezvous wire port (default: HTTP port + 1)")
    serve_p.add_argument("--speed", type=float, default=1.0,
                         help="simulated seconds per wall second")
    serve_p.add_argument("--trace", default=None,
                         help="flush the trace here on shutdown")
    serve_p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
