"""Procedure state machine: target selection through full retraction.

The FSM is a pure transition function consuming percepts and kinematic
feedback and emitting motion commands; the session loop owns time and
injects dt. It never reads world state directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .errors import InvalidTarget, WrongPercept, WrongPhase
from .perception import ContactDecision, PunctureDecision, TipDetection
from .world import AxialInsertion, Hold, MotionCommand, PlanarVelocity, Pose3, ZStep

__all__ = [
    "ControllerPhase", "ControllerConfig", "ControllerState", "Percepts",
    "StopSignal", "set_target", "plan_navigation_step", "tick", "timers",
    "tick_bound", "abort", "percept_needed",
]


class ControllerPhase(Enum):
    IDLE = "Idle"
    NAVIGATING = "Navigating"
    CONTACT_SEEK = "ContactSeek"
    PUNCTURE_STROKE = "PunctureStroke"
    VERIFY_PUNCTURE = "VerifyPuncture"
    RETRACTING = "Retracting"
    FULL_RETRACT = "FullRetract"
    DONE = "Done"
    ABORTED = "Aborted"


TERMINAL_PHASES = (ControllerPhase.DONE, ControllerPhase.ABORTED)

# phases whose duration counts as puncture time (everything after navigation)
_PUNCTURE_TIMED = (
    ControllerPhase.CONTACT_SEEK, ControllerPhase.PUNCTURE_STROKE,
    ControllerPhase.VERIFY_PUNCTURE, ControllerPhase.RETRACTING,
    ControllerPhase.FULL_RETRACT,
)


@dataclass(frozen=True)
class ControllerConfig:
    stop_dist_px: float = 3.0
    nav_gain: float = 0.35                 # mm/s per px of tip-target error
    nav_speed_cap_mm_s: float = 1.0
    z_step_mm: float = 0.010
    insertion_speed_mm_s: float = 3.0      # must exceed the rupture threshold
    stroke_increment_mm: float = 0.05      # minimum advance between verifications
    retract_fraction: float = 0.4
    retract_speed_mm_s: float = 3.0
    max_puncture_attempts: int = 5
    max_seek_depth_mm: float = 1.5
    contact_threshold: float = 0.5
    puncture_conf_min: float = 0.5
    reacquire_limit: int = 50
    insertion_angle_deg: float = 70.0
    microscope_scale_mm_per_px: float = 0.0586
    frame_width_px: int = 512
    frame_height_px: int = 512

    def __post_init__(self):
        if self.stop_dist_px <= 0:
            raise ValueError("stop_dist_px must be positive")
        if not 0.0 < self.retract_fraction < 1.0:
            raise ValueError("retract_fraction must lie in (0, 1)")
        if self.max_puncture_attempts < 1:
            raise ValueError("max_puncture_attempts must be >= 1")


@dataclass(frozen=True)
class ControllerState:
    phase: ControllerPhase = ControllerPhase.IDLE
    target_px: Optional[tuple[float, float]] = None
    contact_pose: Optional[Pose3] = None
    stroke_depth_mm: float = 0.0           # commanded depth beyond contact
    stroke_this_attempt_mm: float = 0.0
    attempts: int = 0                      # failed verification count
    navigation_s: float = 0.0
    puncture_s: float = 0.0
    start_z: Optional[float] = None        # height to recover in full retract
    seek_depth_mm: float = 0.0
    retract_remaining_mm: float = 0.0
    reacquire_count: int = 0
    verdict: Optional[int] = None          # 1 once puncture is confirmed
    abort_reason: Optional[str] = None
    last_note: str = ""

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "target_px": None if self.target_px is None else list(self.target_px),
            "stroke_depth_mm": self.stroke_depth_mm,
            "attempts": self.attempts,
            "navigation_s": self.navigation_s,
            "puncture_s": self.puncture_s,
            "verdict": self.verdict,
            "abort_reason": self.abort_reason,
            "last_note": self.last_note,
        }


@dataclass(frozen=True)
class StopSignal:
    """Navigation finished: tip within the stop radius of the target."""
    distance_px: float


@dataclass(frozen=True)
class Percepts:
    """Per-tick perception bundle; ``failure`` carries the error name when
    the view needed by the current phase could not be acquired."""
    tip: Optional[TipDetection] = None
    contact: Optional[ContactDecision] = None
    puncture: Optional[PunctureDecision] = None
    failure: Optional[str] = None


def set_target(state: ControllerState, target_px: tuple[float, float],
               cfg: ControllerConfig) -> ControllerState:
    """Accept an operator target; legal from Idle, or during Navigating to
    re-target (which restarts the navigation clock).

    Raises:
        InvalidTarget: point outside frame bounds.
        WrongPhase: targeting after navigation has completed.
    """
    if state.phase not in (ControllerPhase.IDLE, ControllerPhase.NAVIGATING):
        raise WrongPhase(f"cannot set target in phase {state.phase.value}")
    u, v = target_px
    if not (0 <= u < cfg.frame_width_px and 0 <= v < cfg.frame_height_px):
        raise InvalidTarget(f"target {target_px} outside {cfg.frame_width_px}x{cfg.frame_height_px}")
    return replace(state, phase=ControllerPhase.NAVIGATING, target_px=(float(u), float(v)),
                   navigation_s=0.0, last_note="target set")


def plan_navigation_step(tip_px: tuple[float, float], target_px: tuple[float, float],
                         cfg: ControllerConfig) -> PlanarVelocity | StopSignal:
    """Velocity vector from the detected tip toward the target; stop once the
    Euclidean error is below the stop radius (default 3 px)."""
    du = target_px[0] - tip_px[0]
    dv = target_px[1] - tip_px[1]
    dist = math.hypot(du, dv)
    if dist < cfg.stop_dist_px:
        return StopSignal(distance_px=dist)
    speed = min(cfg.nav_gain * dist, cfg.nav_speed_cap_mm_s)
    return PlanarVelocity(speed * du / dist, speed * dv / dist)


def abort(state: ControllerState, reason: str) -> ControllerState:
    return replace(state, phase=ControllerPhase.ABORTED, abort_reason=reason,
                   verdict=state.verdict if state.verdict is not None else 0,
                   last_note=f"aborted: {reason}")


def percept_needed(phase: ControllerPhase) -> Optional[str]:
    return {
        ControllerPhase.NAVIGATING: "tip",
        ControllerPhase.CONTACT_SEEK: "contact",
        ControllerPhase.VERIFY_PUNCTURE: "puncture",
    }.get(phase)


def tick(state: ControllerState, cfg: ControllerConfig, percepts: Percepts,
         pose: Pose3, dt: float) -> tuple[MotionCommand, ControllerState]:
    """One control tick: consume percepts, emit a motion command, advance.

    Raises:
        WrongPercept: the bundle lacks the percept this phase consumes.
    """
    phase = state.phase

    if phase in TERMINAL_PHASES:
        return Hold(), state

    # timers accumulate on every tick spent inside a timed phase
    if phase == ControllerPhase.NAVIGATING:
        state = replace(state, navigation_s=state.navigation_s + dt)
    elif phase in _PUNCTURE_TIMED:
        state = replace(state, puncture_s=state.puncture_s + dt)

    needed = percept_needed(phase)
    if needed is not None:
        if percepts.failure is not None:
            count = state.reacquire_count + 1
            if count >= cfg.reacquire_limit:
                return Hold(), abort(replace(state, reacquire_count=count), "perception_lost")
            return Hold(), replace(state, reacquire_count=count,
                                   last_note=f"reacquire ({percepts.failure})")
        if getattr(percepts, needed) is None:
            raise WrongPercept(f"phase {phase.value} needs a {needed} percept")
        state = replace(state, reacquire_count=0)

    if phase == ControllerPhase.IDLE:
        return Hold(), state

    if phase == ControllerPhase.NAVIGATING:
        plan = plan_navigation_step(percepts.tip.tip_px, state.target_px, cfg)
        if isinstance(plan, StopSignal):
            # navigation clock stops here; the hold tick is not navigation time
            return Hold(), replace(state, phase=ControllerPhase.CONTACT_SEEK,
                                   navigation_s=state.navigation_s - dt,
                                   start_z=pose.z, seek_depth_mm=0.0,
                                   last_note=f"reached target ({plan.distance_px:.2f} px)")
        return plan, state

    if phase == ControllerPhase.CONTACT_SEEK:
        if percepts.contact.decision == 1:
            return Hold(), replace(state, phase=ControllerPhase.PUNCTURE_STROKE,
                                   contact_pose=pose, stroke_depth_mm=0.0,
                                   stroke_this_attempt_mm=0.0,
                                   last_note="contact confirmed")
        if state.seek_depth_mm + cfg.z_step_mm > cfg.max_seek_depth_mm:
            return Hold(), abort(state, "seek_depth_exceeded")
        return (ZStep(-cfg.z_step_mm),
                replace(state, seek_depth_mm=state.seek_depth_mm + cfg.z_step_mm))

    if phase == ControllerPhase.PUNCTURE_STROKE:
        advance = cfg.insertion_speed_mm_s * dt
        depth = state.stroke_this_attempt_mm + advance
        nxt = replace(state, stroke_depth_mm=state.stroke_depth_mm + advance,
                      stroke_this_attempt_mm=depth)
        if depth >= cfg.stroke_increment_mm - 1e-12:
            nxt = replace(nxt, phase=ControllerPhase.VERIFY_PUNCTURE,
                          last_note=f"stroke to {nxt.stroke_depth_mm:.3f} mm")
        return AxialInsertion(cfg.insertion_speed_mm_s), nxt

    if phase == ControllerPhase.VERIFY_PUNCTURE:
        dec = percepts.puncture
        if dec.decision == 1 and dec.confidence >= cfg.puncture_conf_min:
            return Hold(), replace(state, phase=ControllerPhase.FULL_RETRACT, verdict=1,
                                   last_note=f"puncture confirmed (conf {dec.confidence:.2f})")
        retract = cfg.retract_fraction * state.stroke_depth_mm
        return Hold(), replace(state, phase=ControllerPhase.RETRACTING,
                               attempts=state.attempts + 1,
                               retract_remaining_mm=retract,
                               last_note=f"no puncture, retracting {retract:.3f} mm")

    if phase == ControllerPhase.RETRACTING:
        remaining = state.retract_remaining_mm
        if remaining > 1e-12:
            speed = min(remaining / dt, cfg.retract_speed_mm_s)
            travel = speed * dt
            return (AxialInsertion(-speed),
                    replace(state, retract_remaining_mm=remaining - travel,
                            stroke_depth_mm=state.stroke_depth_mm - travel))
        if state.attempts < cfg.max_puncture_attempts:
            return Hold(), replace(state, phase=ControllerPhase.PUNCTURE_STROKE,
                                   stroke_this_attempt_mm=0.0,
                                   last_note=f"reattempt {state.attempts + 1}")
        return Hold(), abort(state, "attempts_exhausted")

    if phase == ControllerPhase.FULL_RETRACT:
        target_z = state.start_z if state.start_z is not None else pose.z
        deficit = target_z - pose.z
        if deficit <= 1e-9:
            return Hold(), replace(state, phase=ControllerPhase.DONE,
                                   puncture_s=state.puncture_s - dt,
                                   last_note="procedure complete")
        axial = deficit / math.sin(math.radians(cfg.insertion_angle_deg))
        speed = min(axial / dt, cfg.retract_speed_mm_s)
        return AxialInsertion(-speed), state

    raise AssertionError(f"unhandled phase {phase}")


def timers(state: ControllerState) -> dict[str, float]:
    return {"navigation_s": state.navigation_s, "puncture_s": state.puncture_s}


def tick_bound(cfg: ControllerConfig, dt: float) -> int:
    """Sound liveness bound: productive ticks for every phase, each possibly
    preceded by a full run of re-acquisition holds."""
    diag_px = math.hypot(cfg.frame_width_px, cfg.frame_height_px)
    travel_px_per_tick = cfg.nav_speed_cap_mm_s * dt / cfg.microscope_scale_mm_per_px
    nav = math.ceil(diag_px / travel_px_per_tick) + 1
    seek = math.ceil(cfg.max_seek_depth_mm / cfg.z_step_mm) + 1
    stroke = math.ceil(cfg.stroke_increment_mm / (cfg.insertion_speed_mm_s * dt)) + 1
    max_depth = cfg.max_puncture_attempts * max(cfg.stroke_increment_mm,
                                                cfg.insertion_speed_mm_s * dt)
    retract = math.ceil(max_depth / (cfg.retract_speed_mm_s * dt)) + 2
    per_attempt = stroke + 1 + retract + 1
    full = math.ceil((cfg.max_seek_depth_mm + max_depth)
                     / (cfg.retract_speed_mm_s * dt * math.sin(math.radians(cfg.insertion_angle_deg)))) + 2
    productive = nav + seek + cfg.max_puncture_attempts * per_attempt + full + 10
    return productive * (cfg.reacquire_limit + 1)
