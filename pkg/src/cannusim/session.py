"""Trial engine: drives one procedure through the full closed loop.

Each tick renders only the views the active policy consumes, corrupts them
per the artifact config, runs perception, feeds the policy, and integrates
the chosen motion command. Everything is seeded, so identical inputs yield
identical tick streams; the per-tick log carries frame digests to prove it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import controller as ctl
from .controller import ControllerPhase, Percepts
from .errors import (CommandOutOfBounds, PerceptionError, ScanlineMissesROI,
                     TickBudgetExceeded, WorkspaceExceeded)
from .imaging import (BScanFrame, MicroscopeFrame, RenderCache,
                      apply_artifacts, render_bscan, render_microscope,
                      scanline_through)
from .operator import ScriptedOperator
from .perception import (PerceptionConfig, classify_contact, detect_puncture,
                         detect_tip)
from .scenario import Scenario
from .world import (AxialInsertion, Hold, MotionCommand, PlanarVelocity,
                    Pose3, WorldState, ZStep, step)

__all__ = ["AutoPolicy", "TrialEngine", "TickRecord", "cmd_to_dict", "cmd_from_dict"]


def cmd_to_dict(cmd: MotionCommand) -> dict:
    if isinstance(cmd, Hold):
        return {"kind": "hold"}
    if isinstance(cmd, PlanarVelocity):
        return {"kind": "planar", "vx": cmd.vx, "vy": cmd.vy}
    if isinstance(cmd, AxialInsertion):
        return {"kind": "axial", "speed": cmd.speed}
    return {"kind": "zstep", "dz": cmd.dz}


def cmd_from_dict(d: dict) -> MotionCommand:
    kind = d["kind"]
    if kind == "hold":
        return Hold()
    if kind == "planar":
        return PlanarVelocity(d["vx"], d["vy"])
    if kind == "axial":
        return AxialInsertion(d["speed"])
    return ZStep(d["dz"])


class AutoPolicy:
    """Autonomous policy: the controller FSM behind the policy interface."""

    def __init__(self, cfg: ctl.ControllerConfig, target_px: tuple[float, float]):
        self.cfg = cfg
        self.state = ctl.set_target(ctl.ControllerState(), target_px, cfg)

    @property
    def phase(self) -> ControllerPhase:
        return self.state.phase

    @property
    def done(self) -> bool:
        return self.state.phase in ctl.TERMINAL_PHASES

    @property
    def verdict(self):
        return self.state.verdict

    @property
    def attempts(self):
        return self.state.attempts

    @property
    def navigation_s(self):
        return self.state.navigation_s

    @property
    def puncture_s(self):
        return self.state.puncture_s

    @property
    def abort_reason(self):
        return self.state.abort_reason

    @property
    def last_note(self):
        return self.state.last_note

    def needs(self) -> set:
        kind = ctl.percept_needed(self.state.phase)
        return set() if kind is None else {kind}

    def tick(self, percepts: Percepts, pose: Pose3, dt: float) -> MotionCommand:
        cmd, self.state = ctl.tick(self.state, self.cfg, percepts, pose, dt)
        return cmd

    def force_abort(self, reason: str) -> None:
        self.state = ctl.abort(self.state, reason)


@dataclass
class TickRecord:
    tick: int
    t: float
    phase: str
    cmd: dict
    percepts: dict
    pose: list
    digest: str

    def to_dict(self) -> dict:
        return {"kind": "tick", "tick": self.tick, "t": self.t, "phase": self.phase,
                "cmd": self.cmd, "percepts": self.percepts, "pose": self.pose,
                "digest": self.digest}


class TrialEngine:
    """One procedure from target selection to termination."""

    def __init__(self, scenario: Scenario, mode: str = "auto", seed: int = 0,
                 render_all: bool = False,
                 frame_hook: Optional[Callable[[int, Optional[MicroscopeFrame], Optional[BScanFrame]], None]] = None):
        if mode not in ("auto", "manual"):
            raise ValueError(f"mode must be auto|manual, got {mode!r}")
        self.scenario = scenario
        self.mode = mode
        self.seed = seed
        self.dt = scenario.dt_s
        self.render_all = render_all
        self.frame_hook = frame_hook

        self.world = scenario.build_world(seed=seed)
        mic = scenario.microscope
        tx, ty = scenario.resolve_target_mm()
        self.target_mm = (tx, ty)
        self.target_px = ((tx - mic.origin[0]) / mic.scale_mm_per_px,
                          (ty - mic.origin[1]) / mic.scale_mm_per_px)
        scan_len = scenario.bscan.size * scenario.bscan.scale_mm_per_px
        self.scan_target = scanline_through(self.target_mm, scenario.vein.axis_dir, scan_len)
        self._scan_len = scan_len

        cfg = replace(scenario.controller,
                      microscope_scale_mm_per_px=mic.scale_mm_per_px,
                      frame_width_px=mic.width, frame_height_px=mic.height,
                      insertion_angle_deg=scenario.needle.insertion_angle_deg)
        self.cfg = cfg
        self.percept_cfg = PerceptionConfig(insertion_azimuth_deg=scenario.needle.azimuth_deg)
        if mode == "auto":
            self.policy = AutoPolicy(cfg, self.target_px)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
            self.policy = ScriptedOperator(scenario.operator, cfg, self.target_px, rng)

        self.cache = RenderCache()
        self.records: list[TickRecord] = []
        self.claim_world: Optional[WorldState] = None
        self.last_microscope: Optional[MicroscopeFrame] = None
        self.last_bscan: Optional[BScanFrame] = None

    # -- per-tick pipeline ---------------------------------------------------

    def _scanline(self):
        """Depth scans follow the target once navigation hands over; before
        that a provisional line tracks the tip so the view is never empty."""
        if self.policy.phase in (ControllerPhase.IDLE, ControllerPhase.NAVIGATING):
            tip = self.world.needle.tip
            return scanline_through((tip.x, tip.y), self.scenario.vein.axis_dir, self._scan_len)
        return self.scan_target

    def tick_once(self, extra_cmd: Optional[MotionCommand] = None) -> TickRecord:
        """Run one control tick; ``extra_cmd`` (live teleop) overrides the
        policy command when given."""
        sc = self.scenario
        needs = self.policy.needs()
        percepts = Percepts()
        hasher = hashlib.blake2b(digest_size=8)
        psum: dict = {"failure": None}

        mic_frame = None
        if "tip" in needs or self.render_all:
            mic_frame = render_microscope(self.world, sc.microscope, self.cache)
            mic_frame = apply_artifacts(mic_frame, sc.artifacts)
            hasher.update(mic_frame.pixels.tobytes())
            self.last_microscope = mic_frame
        bscan_frame = None
        if needs & {"contact", "puncture"} or self.render_all:
            try:
                bscan_frame = render_bscan(self.world, self._scanline(), sc.bscan, self.cache)
                bscan_frame = apply_artifacts(bscan_frame, sc.artifacts)
                hasher.update(bscan_frame.pixels.tobytes())
                self.last_bscan = bscan_frame
            except ScanlineMissesROI as e:
                if needs & {"contact", "puncture"}:
                    percepts = replace(percepts, failure=type(e).__name__)

        if "tip" in needs:
            if mic_frame is None:
                percepts = replace(percepts, failure="NoFrame")
            else:
                try:
                    tip = detect_tip(mic_frame, self.percept_cfg)
                    percepts = replace(percepts, tip=tip)
                    psum["tip"] = [tip.tip_px[0], tip.tip_px[1]]
                    psum["tip_conf"] = tip.confidence
                except PerceptionError as e:
                    percepts = replace(percepts, failure=type(e).__name__)
        if "contact" in needs and percepts.failure is None and bscan_frame is not None:
            try:
                dec = classify_contact(bscan_frame, self.cfg.contact_threshold, self.percept_cfg)
                percepts = replace(percepts, contact=dec)
                psum["contact_p"] = dec.probability
                psum["contact_dec"] = dec.decision
            except PerceptionError as e:
                percepts = replace(percepts, failure=type(e).__name__)
        if "puncture" in needs and percepts.failure is None and bscan_frame is not None:
            try:
                dec = detect_puncture(bscan_frame, self.cfg.puncture_conf_min, self.percept_cfg)
                percepts = replace(percepts, puncture=dec)
                psum["punct_dec"] = dec.decision
                psum["punct_conf"] = dec.confidence
            except PerceptionError as e:
                percepts = replace(percepts, failure=type(e).__name__)
        psum["failure"] = percepts.failure

        if self.frame_hook is not None:
            self.frame_hook(self.world.tick, mic_frame, bscan_frame)

        pre_step = self.world
        pose = pre_step.needle.tip
        cmd = self.policy.tick(percepts, pose, self.dt)
        if extra_cmd is not None:
            cmd = extra_cmd
        try:
            self.world = step(self.world, cmd, self.dt)
        except (WorkspaceExceeded, CommandOutOfBounds) as e:
            self.policy.force_abort(f"motion_fault:{type(e).__name__}")
            cmd = Hold()
            self.world = step(self.world, cmd, self.dt)

        if self.claim_world is None and (self.policy.verdict == 1 or
                                         self.policy.phase == ControllerPhase.ABORTED):
            # the state the verdict (or abort) was judged on
            self.claim_world = pre_step

        rec = TickRecord(tick=pre_step.tick, t=pre_step.t, phase=self.policy.phase.value,
                         cmd=cmd_to_dict(cmd), percepts=psum,
                         pose=[pose.x, pose.y, pose.z], digest=hasher.hexdigest())
        self.records.append(rec)
        return rec

    def render_current(self) -> None:
        """Refresh both views from the current world without ticking; used
        by live sessions before Start and after termination."""
        sc = self.scenario
        mic = render_microscope(self.world, sc.microscope, self.cache)
        self.last_microscope = apply_artifacts(mic, sc.artifacts)
        try:
            b = render_bscan(self.world, self._scanline(), sc.bscan, self.cache)
            self.last_bscan = apply_artifacts(b, sc.artifacts)
        except ScanlineMissesROI:
            pass

    def run(self, budget: Optional[int] = None) -> None:
        """Drive to Done/Aborted.

        Raises:
            TickBudgetExceeded: the policy failed to terminate in bound.
        """
        if budget is None:
            budget = ctl.tick_bound(self.cfg, self.dt)
        n = 0
        while not self.policy.done:
            if n >= budget:
                raise TickBudgetExceeded(f"no termination within {budget} ticks")
            self.tick_once()
            n += 1
        if self.claim_world is None:
            self.claim_world = self.world
