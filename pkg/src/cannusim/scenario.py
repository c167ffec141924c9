"""Scenario files: everything needed to construct a reproducible trial.

A scenario bundles the world template, imaging geometry, artifact knobs,
controller tuning and the operator model. JSON round trips are exact.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .controller import ControllerConfig
from .errors import ScenarioInvalid
from .imaging import ArtifactConfig, BScanConfig, MicroscopeConfig
from .world import (NeedleModel, Pose3, TissuePhase, VeinModel, WorldConfig,
                    WorldState, vein_preset)

__all__ = ["OperatorModel", "BatchRanges", "Scenario", "default_scenario",
           "compact_scenario", "load_scenario", "save_scenario"]


@dataclass(frozen=True)
class OperatorModel:
    """Scripted keyboard operator: reaction latency, discrete key steps,
    physiological tremor jitter on every commanded pose, and occasional
    over/undershoot per keypress."""
    reaction_latency_s: float = 0.3
    key_step_mm: float = 0.05
    tremor_rms_um: float = 182.0
    decision_noise: float = 0.1

    def __post_init__(self):
        if self.reaction_latency_s < 0 or self.key_step_mm <= 0:
            raise ScenarioInvalid("bad operator latency/step")
        if self.tremor_rms_um < 0 or not 0 <= self.decision_noise <= 1:
            raise ScenarioInvalid("bad operator tremor/noise")


@dataclass(frozen=True)
class BatchRanges:
    """Per-trial randomization applied by the batch runner."""
    vein_lateral_jitter_mm: float = 0.3
    vein_depth_jitter_mm: float = 0.1
    diameter_range_mm: Optional[tuple[float, float]] = None
    randomize_artifact_seed: bool = True


@dataclass
class Scenario:
    name: str = "default"
    seed: int = 0
    dt_s: float = 0.1
    vein: VeinModel = field(default_factory=lambda: vein_preset("embryo"))
    needle: NeedleModel = field(default_factory=lambda: NeedleModel(tip=Pose3(-2.5, -2.0, 2.6)))
    world_config: WorldConfig = field(default_factory=WorldConfig)
    microscope: MicroscopeConfig = field(default_factory=MicroscopeConfig)
    bscan: BScanConfig = field(default_factory=BScanConfig)
    artifacts: ArtifactConfig = field(default_factory=ArtifactConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    operator: OperatorModel = field(default_factory=OperatorModel)
    target_mm: Optional[tuple[float, float]] = None  # None: nearest vein point
    batch: BatchRanges = field(default_factory=BatchRanges)

    def resolve_target_mm(self) -> tuple[float, float]:
        """Cannulation goal: explicit, or the vein point nearest scene center."""
        if self.target_mm is not None:
            return self.target_mm
        ax, ay = self.vein.axis_point
        dx, dy = self.vein.axis_dir
        cx, cy, _ = self.world_config.workspace_center
        s = (cx - ax) * dx + (cy - ay) * dy
        return (ax + s * dx, ay + s * dy)

    def build_world(self, seed: Optional[int] = None) -> WorldState:
        return WorldState(t=0.0, tick=0, needle=self.needle, vein=self.vein,
                          tissue=TissuePhase(), config=self.world_config,
                          rng_seed=self.seed if seed is None else seed)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "seed": self.seed,
            "dt_s": self.dt_s,
            "vein": asdict(self.vein),
            "needle": {
                "tip": [self.needle.tip.x, self.needle.tip.y, self.needle.tip.z],
                "insertion_angle_deg": self.needle.insertion_angle_deg,
                "azimuth_deg": self.needle.azimuth_deg,
                "tip_diameter_um": self.needle.tip_diameter_um,
                "shaft_length_mm": self.needle.shaft_length_mm,
            },
            "world_config": asdict(self.world_config),
            "microscope": asdict(self.microscope),
            "bscan": asdict(self.bscan),
            "artifacts": asdict(self.artifacts),
            "controller": asdict(self.controller),
            "operator": asdict(self.operator),
            "target_mm": None if self.target_mm is None else list(self.target_mm),
            "batch": asdict(self.batch),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            vein_d = dict(d["vein"])
            vein_d["axis_point"] = tuple(vein_d["axis_point"])
            vein_d["axis_dir"] = tuple(vein_d["axis_dir"])
            needle_d = dict(d["needle"])
            needle_d["tip"] = Pose3(*needle_d["tip"])
            wc = dict(d["world_config"])
            wc["workspace_center"] = tuple(wc["workspace_center"])
            mic = dict(d["microscope"])
            mic["origin"] = tuple(mic["origin"])
            art = dict(d["artifacts"])
            if art.get("occlusion") is not None:
                art["occlusion"] = tuple(art["occlusion"])
            batch = dict(d["batch"])
            if batch.get("diameter_range_mm") is not None:
                batch["diameter_range_mm"] = tuple(batch["diameter_range_mm"])
            return cls(
                name=d["name"], seed=d["seed"], dt_s=d["dt_s"],
                vein=VeinModel(**vein_d), needle=NeedleModel(**needle_d),
                world_config=WorldConfig(**wc), microscope=MicroscopeConfig(**mic),
                bscan=BScanConfig(**d["bscan"]), artifacts=ArtifactConfig(**art),
                controller=ControllerConfig(**d["controller"]),
                operator=OperatorModel(**d["operator"]),
                target_mm=None if d["target_mm"] is None else tuple(d["target_mm"]),
                batch=BatchRanges(**batch),
            )
        except ScenarioInvalid:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioInvalid(f"bad scenario document: {e}") from e

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def default_scenario() -> Scenario:
    return Scenario()


def compact_scenario(name: str = "compact", **overrides) -> Scenario:
    """Short-trial geometry for batch work: the needle starts close to the
    target and just above the vein."""
    sc = Scenario(name=name,
                  needle=NeedleModel(tip=Pose3(0.3, -0.8, 2.25)))
    for k, v in overrides.items():
        setattr(sc, k, v)
    return sc


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        raise ScenarioInvalid(f"scenario file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioInvalid(f"scenario is not valid JSON: {e}") from e
    return Scenario.from_dict(doc)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n")
