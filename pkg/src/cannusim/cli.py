"""Command-line entry points: batch runs, replay, report regeneration,
the live session server, and scenario templates."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CannuSimError
from .harness import read_log, replay_log, run_batch, timing_stats
from .scenario import (Scenario, compact_scenario, default_scenario,
                       load_scenario, save_scenario)


def _load(path: str | None) -> Scenario:
    if path is None:
        return default_scenario()
    return load_scenario(path)


def cmd_run(args) -> int:
    scenario = _load(args.scenario)
    modes = {"auto": ("auto",), "manual": ("manual",), "both": ("auto", "manual")}[args.mode]
    report = run_batch(scenario, n_trials=args.trials, modes=modes,
                       master_seed=args.seed, out_dir=args.out, keep_logs=args.keep_logs,
                       dump_frames=args.dump_frames)
    for mode, stats in report.mode_stats.items():
        nav, pun = stats["navigation"], stats["puncture"]
        print(f"{mode}: n={stats['n']} nav mean {nav['mean']:.2f}s median {nav['median']:.2f}s "
              f"sd {nav['std']:.2f}s | puncture mean {pun['mean']:.2f}s median {pun['median']:.2f}s "
              f"sd {pun['std']:.2f}s | gt successes {stats['ground_truth_successes']}")
    if report.metrics is not None:
        print(f"puncture-claim accuracy {report.metrics.accuracy:.3f}")
    if args.out:
        print(f"wrote records.csv, report.json, tableI.csv, tableII.csv, figures -> {args.out}")
    return 0


def cmd_replay(args) -> int:
    lines = read_log(args.log)
    override = json.loads(args.override_artifacts) if args.override_artifacts else None
    result = replay_log(lines, artifact_override=override)
    if result.identical:
        print("replay identical: zero diff")
        return 0
    print(f"replay diverged at {len(result.divergences)} point(s):")
    for d in result.divergences[:10]:
        print(f"  tick {d['tick']}: fields {d['fields']}")
    return 0 if override else 1


def cmd_report(args) -> int:
    from .harness import BatchReport
    from .perception import LabeledSample, evaluate_classifier
    from .reports import read_records_csv, write_all

    records = read_records_csv(args.records)
    modes = sorted({r.mode for r in records})
    mode_stats = {}
    for mode in modes:
        rows = [r for r in records if r.mode == mode]
        mode_stats[mode] = {
            "navigation": timing_stats([r.navigation_s for r in rows]),
            "puncture": timing_stats([r.puncture_s for r in rows]),
            "n": len(rows),
            "ground_truth_successes": sum(1 for r in rows if r.ground_truth == 1),
        }
    metric_rows = [r for r in records if r.mode == "auto"] or records
    metrics = evaluate_classifier(
        [LabeledSample(i, r.ground_truth, r.verdict) for i, r in enumerate(metric_rows)])
    report = BatchReport(trial_count=len(records), config_digest="from-records",
                         master_seed=-1, mode_stats=mode_stats, metrics=metrics,
                         records=records,
                         notes=["regenerated from records.csv",
                                "puncture time spans contact seeking through full retraction"])
    out = Path(args.out)
    write_all(report, out)
    print(f"report regenerated under {out}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve
    scenario = _load(args.scenario)
    mode = "realtime" if args.realtime else "free-running"
    print(f"serving {scenario.name!r} on ws://{args.host}:{args.port} ({mode}); Ctrl-C stops")
    serve(scenario, host=args.host, port=args.port, seed=args.seed, realtime=args.realtime)
    return 0


def cmd_scenario(args) -> int:
    sc = compact_scenario() if args.preset == "compact" else default_scenario()
    save_scenario(sc, args.out)
    print(f"wrote {args.preset} scenario template to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cannusim",
                                 description="Deterministic vein-cannulation procedure simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of trials and write reports")
    run.add_argument("--scenario", help="scenario JSON (default: built-in)")
    run.add_argument("--trials", type=int, default=20)
    run.add_argument("--mode", choices=["auto", "manual", "both"], default="auto")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", help="output directory for CSV/JSON/figures")
    run.add_argument("--keep-logs", action="store_true",
                     help="write per-trial NDJSON event logs")
    run.add_argument("--dump-frames", action="store_true",
                     help="write PNG snapshots of both views under <out>/frames")
    run.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="re-run a trial log and diff it")
    rp.add_argument("--log", required=True)
    rp.add_argument("--override-artifacts",
                    help='JSON object of artifact overrides, e.g. \'{"noise_frac": 0.001}\'')
    rp.set_defaults(func=cmd_replay)

    rep = sub.add_parser("report", help="regenerate tables/figures from records.csv")
    rep.add_argument("--records", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    srv = sub.add_parser("serve", help="serve live sessions over WebSocket")
    srv.add_argument("--scenario")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8765)
    srv.add_argument("--seed", type=int, default=0)
    speed = srv.add_mutually_exclusive_group()
    speed.add_argument("--realtime", dest="realtime", action="store_true", default=True)
    speed.add_argument("--fast", dest="realtime", action="store_false",
                       help="free-run the sim loop (no wall-clock throttle)")
    srv.set_defaults(func=cmd_serve)

    scn = sub.add_parser("scenario", help="write a scenario template")
    scn.add_argument("--preset", choices=["default", "compact"], default="default")
    scn.add_argument("--out", required=True)
    scn.set_defaults(func=cmd_scenario)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CannuSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
