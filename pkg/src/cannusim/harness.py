"""Batch execution: trials, paired-mode batches, statistics, replay."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import LogCorrupt
from .imaging import ArtifactConfig
from .perception import LabeledSample, MetricsTable, evaluate_classifier
from .scenario import Scenario
from .session import TrialEngine
from .world import inject_air

__all__ = [
    "TrialRecord", "BatchReport", "run_trial", "run_batch", "replay_log",
    "timing_stats", "derive_seed", "randomize_scenario", "outcome_class",
]

CSV_COLUMNS = ["trial_id", "mode", "seed", "navigation_s", "puncture_s",
               "attempts", "verdict", "ground_truth", "outcome_class", "abort_reason"]


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    mode: str
    seed: int
    navigation_s: float
    puncture_s: float
    attempts: int
    verdict: int
    ground_truth: int
    gt_reason: str
    outcome_class: str
    abort_reason: str = ""

    def csv_row(self) -> list[str]:
        return [self.trial_id, self.mode, str(self.seed), repr(self.navigation_s),
                repr(self.puncture_s), str(self.attempts), str(self.verdict),
                str(self.ground_truth), self.outcome_class, self.abort_reason]

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "mode": self.mode, "seed": self.seed,
                "navigation_s": self.navigation_s, "puncture_s": self.puncture_s,
                "attempts": self.attempts, "verdict": self.verdict,
                "ground_truth": self.ground_truth, "gt_reason": self.gt_reason,
                "outcome_class": self.outcome_class, "abort_reason": self.abort_reason}


def outcome_class(verdict: int, ground_truth: int) -> str:
    return {(1, 1): "TP", (0, 0): "TN", (1, 0): "FP", (0, 1): "FN"}[(verdict, ground_truth)]


def run_trial(scenario: Scenario, mode: str, seed: int, trial_id: str = "0000",
              budget: Optional[int] = None, dump_frames_to=None,
              dump_every: int = 5) -> tuple[TrialRecord, list[dict]]:
    """Run one trial to termination and score it against the air-injection
    oracle. Returns the record plus replayable NDJSON-ready log entries.
    ``dump_frames_to`` writes PNG snapshots of both views every
    ``dump_every`` ticks."""
    hook = None
    if dump_frames_to is not None:
        from .imaging import write_png
        dump_dir = Path(dump_frames_to)
        dump_dir.mkdir(parents=True, exist_ok=True)

        def hook(tick, mic, bscan):
            if tick % dump_every:
                return
            if mic is not None:
                write_png(mic.pixels, dump_dir / f"{trial_id}_t{tick:05d}_planar.png")
            if bscan is not None:
                write_png(bscan.pixels, dump_dir / f"{trial_id}_t{tick:05d}_depth.png")

    engine = TrialEngine(scenario, mode=mode, seed=seed, frame_hook=hook)
    engine.run(budget=budget)
    _, gt = inject_air(engine.claim_world)
    pol = engine.policy
    verdict = 1 if pol.verdict == 1 else 0
    ground = int(gt.success)
    record = TrialRecord(
        trial_id=trial_id, mode=mode, seed=seed,
        navigation_s=pol.navigation_s, puncture_s=pol.puncture_s,
        attempts=pol.attempts, verdict=verdict, ground_truth=ground,
        gt_reason=gt.reason, outcome_class=outcome_class(verdict, ground),
        abort_reason=pol.abort_reason or "",
    )
    log = [{"kind": "header", "trial_id": trial_id, "mode": mode, "seed": seed,
            "scenario": scenario.to_dict()}]
    log.extend(r.to_dict() for r in engine.records)
    log.append({"kind": "result", **record.to_dict()})
    return record, log


# -- statistics -----------------------------------------------------------------

def timing_stats(values: list[float]) -> dict:
    """Mean, median and sample (n-1) standard deviation."""
    if not values:
        return {"mean": 0.0, "median": 0.0, "std": 0.0, "n": 0}
    std = statistics.stdev(values) if len(values) >= 2 else 0.0
    return {"mean": statistics.fmean(values), "median": statistics.median(values),
            "std": std, "n": len(values)}


@dataclass
class BatchReport:
    trial_count: int
    config_digest: str
    master_seed: int
    mode_stats: dict
    metrics: Optional[MetricsTable]
    records: list[TrialRecord]
    navigation_outliers: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trial_count": self.trial_count,
            "config_digest": self.config_digest,
            "master_seed": self.master_seed,
            "mode_stats": self.mode_stats,
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "navigation_outliers": self.navigation_outliers,
            "notes": self.notes,
        }


def derive_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(ss.generate_state(1)[0])


def randomize_scenario(scenario: Scenario, rng: np.random.Generator) -> Scenario:
    """Per-trial variation: vein placement/depth, optional lumen diameter
    (wall elasticity interpolated with size), fresh artifact seed."""
    b = scenario.batch
    vein = scenario.vein
    dx, dy = vein.axis_dir
    lateral = float(rng.uniform(-b.vein_lateral_jitter_mm, b.vein_lateral_jitter_mm))
    depth = vein.depth_z + float(rng.uniform(-b.vein_depth_jitter_mm, b.vein_depth_jitter_mm))
    axis_point = (vein.axis_point[0] + (-dy) * lateral, vein.axis_point[1] + dx * lateral)
    kwargs = dict(axis_point=axis_point, axis_dir=vein.axis_dir, depth_z=depth,
                  diameter_mm=vein.diameter_mm, wall_thickness_mm=vein.wall_thickness_mm,
                  max_deflection_mm=vein.max_deflection_mm,
                  puncture_velocity_mm_s=vein.puncture_velocity_mm_s)
    if b.diameter_range_mm is not None:
        lo, hi = b.diameter_range_mm
        d = float(rng.uniform(lo, hi))
        t = float(np.clip((d - 0.35) / (1.27 - 0.35), 0.0, 1.0))
        kwargs.update(diameter_mm=d,
                      wall_thickness_mm=0.06 + t * 0.04,
                      max_deflection_mm=0.08 + t * 0.07)
    sc = replace(scenario, vein=type(vein)(**kwargs))
    if b.randomize_artifact_seed:
        sc = replace(sc, artifacts=replace(scenario.artifacts,
                                           seed=int(rng.integers(0, 2 ** 31))))
    return sc


def run_batch(scenario: Scenario, n_trials: int, modes=("auto",), master_seed: int = 0,
              out_dir=None, keep_logs: bool = False, dump_frames: bool = False) -> BatchReport:
    """Randomized batch; paired modes share the trial's world seed. Writes
    records.csv, report.json, tableI.csv, tableII.csv and figures when
    ``out_dir`` is given."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    records: list[TrialRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for i in range(n_trials):
        seed_i = derive_seed(master_seed, i)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=master_seed,
                                                           spawn_key=(i, 1)))
        sc_i = randomize_scenario(scenario, rng)
        for mode in modes:
            trial_id = f"{i:04d}-{mode}"
            dump_to = (out_path / "frames") if (dump_frames and out_path is not None) else None
            rec, log = run_trial(sc_i, mode, seed_i, trial_id=trial_id,
                                 dump_frames_to=dump_to)
            records.append(rec)
            if out_path is not None and keep_logs:
                write_log(log, out_path / f"trial_{trial_id}.ndjson")

    mode_stats = {}
    outliers: list[str] = []
    for mode in modes:
        rows = [r for r in records if r.mode == mode]
        nav = timing_stats([r.navigation_s for r in rows])
        pun = timing_stats([r.puncture_s for r in rows])
        succ = sum(1 for r in rows if r.ground_truth == 1)
        mode_stats[mode] = {"navigation": nav, "puncture": pun,
                            "n": len(rows), "ground_truth_successes": succ}
        if nav["std"] > 0:
            cut = nav["mean"] + 2.5 * nav["std"]
            outliers.extend(r.trial_id for r in rows if r.navigation_s > cut)

    metric_rows = [r for r in records if r.mode == "auto"] or records
    samples = [LabeledSample(frame_id=i, true_label=r.ground_truth,
                             predicted_label=r.verdict)
               for i, r in enumerate(metric_rows)]
    metrics = evaluate_classifier(samples)

    report = BatchReport(
        trial_count=len(records), config_digest=scenario.digest(),
        master_seed=master_seed, mode_stats=mode_stats, metrics=metrics,
        records=records, navigation_outliers=outliers,
        notes=["puncture time spans contact seeking through full retraction",
               "all trials included in statistics; navigation outliers flagged, not excluded"],
    )
    if out_path is not None:
        from . import reports
        reports.write_all(report, out_path)
    return report


# -- event logs & replay -----------------------------------------------------------

def write_log(lines: list[dict], path) -> None:
    with open(path, "w") as f:
        for line in lines:
            f.write(json.dumps(line, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    lines = []
    try:
        with open(path) as f:
            for raw in f:
                raw = raw.strip()
                if raw:
                    lines.append(json.loads(raw))
    except (OSError, json.JSONDecodeError) as e:
        raise LogCorrupt(f"unreadable log: {e}") from e
    return lines


@dataclass
class ReplayResult:
    identical: bool
    divergences: list[dict]
    original_result: dict
    replay_result: dict


def replay_log(lines: list[dict], artifact_override: Optional[dict] = None) -> ReplayResult:
    """Re-run a trial from its log header and diff every tick. With no
    override the diff must be empty; with artifact overrides divergences are
    reported for ablation work.

    Raises:
        LogCorrupt: missing header/result or malformed entries.
    """
    if not lines or lines[0].get("kind") != "header":
        raise LogCorrupt("log does not start with a header")
    if lines[-1].get("kind") != "result":
        raise LogCorrupt("log is truncated (no result line)")
    header = lines[0]
    ticks = [l for l in lines[1:-1] if l.get("kind") == "tick"]
    if len(ticks) != len(lines) - 2:
        raise LogCorrupt("unexpected entries between header and result")

    scenario = Scenario.from_dict(header["scenario"])
    if artifact_override:
        base = scenario.artifacts
        merged = {**{k: getattr(base, k) for k in base.__dataclass_fields__},
                  **artifact_override}
        scenario = replace(scenario, artifacts=ArtifactConfig(**merged))

    record, new_log = run_trial(scenario, header["mode"], header["seed"],
                                trial_id=header["trial_id"])
    new_ticks = [l for l in new_log[1:-1]]
    divergences = []
    for i, (a, b) in enumerate(zip(ticks, new_ticks)):
        if a != b:
            fields = [k for k in a if a.get(k) != b.get(k)]
            divergences.append({"tick": i, "fields": fields})
            if len(divergences) >= 25:
                break
    if len(ticks) != len(new_ticks):
        divergences.append({"tick": min(len(ticks), len(new_ticks)),
                            "fields": ["length"],
                            "lengths": [len(ticks), len(new_ticks)]})
    return ReplayResult(identical=not divergences,
                        divergences=divergences,
                        original_result=lines[-1], replay_result={"kind": "result",
                                                                  **record.to_dict()})
