"""Scripted keyboard operator: the manual-teleoperation baseline.

Mirrors the autonomous procedure flow but through a human model: discrete
key steps, reaction latency between observations (keys repeat at tick rate
while held), tremor jitter on every commanded pose, and occasional
over/undershoot per keypress. It consumes the same percepts a human would
read off the two displays.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .controller import ControllerConfig, ControllerPhase, Percepts
from .scenario import OperatorModel
from .world import AxialInsertion, Hold, MotionCommand, PlanarVelocity, Pose3, ZStep

__all__ = ["ScriptedOperator"]


class ScriptedOperator:
    """Keyboard pilot for one trial. Same outward interface as the
    autonomous policy: feed percepts + pose, receive motion commands."""

    def __init__(self, model: OperatorModel, cfg: ControllerConfig,
                 target_px: tuple[float, float], rng: np.random.Generator):
        self.m = model
        self.cfg = cfg
        self.target_px = target_px
        self.rng = rng
        self.phase = ControllerPhase.NAVIGATING
        self.navigation_s = 0.0
        self.puncture_s = 0.0
        self.attempts = 0
        self.verdict: Optional[int] = None
        self.abort_reason: Optional[str] = None
        self.stroke_depth_mm = 0.0
        self.stroke_this_mm = 0.0
        self.retract_remaining_mm = 0.0
        self.seek_depth_mm = 0.0
        self.start_z: Optional[float] = None
        self.reacquire = 0
        self._since_replan = math.inf  # observe immediately on the first tick
        self._intent: Optional[str] = None
        self._nav_axis: tuple[float, float] = (1.0, 0.0)
        self.last_note = "manual start"

    # -- helpers ------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.phase in (ControllerPhase.DONE, ControllerPhase.ABORTED)

    def needs(self) -> set:
        kind = {
            ControllerPhase.NAVIGATING: "tip",
            ControllerPhase.CONTACT_SEEK: "contact",
            ControllerPhase.VERIFY_PUNCTURE: "puncture",
        }.get(self.phase)
        return set() if kind is None else {kind}

    def _jitter(self, n: int) -> np.ndarray:
        sigma_mm = self.m.tremor_rms_um / 1000.0 / math.sqrt(max(n, 1))
        return self.rng.normal(0.0, sigma_mm, size=n)

    def _key_step(self) -> float:
        step = self.m.key_step_mm
        if self.m.decision_noise > 0 and self.rng.random() < self.m.decision_noise:
            step *= 1.5 if self.rng.random() < 0.5 else 0.5
        return step

    def _abort(self, reason: str):
        self.phase = ControllerPhase.ABORTED
        self.abort_reason = reason
        if self.verdict is None:
            self.verdict = 0
        self.last_note = f"aborted: {reason}"

    def force_abort(self, reason: str) -> None:
        self._abort(reason)

    # -- control ------------------------------------------------------------

    def tick(self, percepts: Percepts, pose: Pose3, dt: float) -> MotionCommand:
        if self.done:
            return Hold()
        if self.phase == ControllerPhase.NAVIGATING:
            self.navigation_s += dt
        else:
            self.puncture_s += dt

        self._since_replan += dt
        if self._since_replan >= self.m.reaction_latency_s:
            self._since_replan = 0.0
            self._replan(percepts, pose)
            if self.done:
                return Hold()
        return self._execute(pose, dt)

    def _replan(self, percepts: Percepts, pose: Pose3) -> None:
        needed = self.needs()
        if needed is not None:
            if percepts.failure is not None:
                self.reacquire += 1
                self._intent = None
                if self.reacquire >= self.cfg.reacquire_limit:
                    self._abort("perception_lost")
                return
            self.reacquire = 0

        if self.phase == ControllerPhase.NAVIGATING:
            tip = percepts.tip.tip_px
            du, dv = self.target_px[0] - tip[0], self.target_px[1] - tip[1]
            if math.hypot(du, dv) < self.cfg.stop_dist_px:
                self.phase = ControllerPhase.CONTACT_SEEK
                self.navigation_s -= self._since_replan  # clock stopped at the look
                self.start_z = pose.z
                self.seek_depth_mm = 0.0
                self._intent = "seek"
                self.last_note = "target reached"
                return
            # dominant-axis key, like holding one arrow
            if abs(du) >= abs(dv):
                self._nav_axis = (math.copysign(1.0, du), 0.0)
            else:
                self._nav_axis = (0.0, math.copysign(1.0, dv))
            self._intent = "nav"
        elif self.phase == ControllerPhase.CONTACT_SEEK:
            if percepts.contact.decision == 1:
                self.phase = ControllerPhase.PUNCTURE_STROKE
                self.stroke_depth_mm = 0.0
                self.stroke_this_mm = 0.0
                self._intent = "stroke"
                self.last_note = "contact seen"
            else:
                self._intent = "seek"
        elif self.phase == ControllerPhase.VERIFY_PUNCTURE:
            dec = percepts.puncture
            if dec.decision == 1 and dec.confidence >= self.cfg.puncture_conf_min:
                self.phase = ControllerPhase.FULL_RETRACT
                self.verdict = 1
                self._intent = "full_retract"
                self.last_note = "puncture seen"
            else:
                self.attempts += 1
                self.retract_remaining_mm = self.cfg.retract_fraction * self.stroke_depth_mm
                self.phase = ControllerPhase.RETRACTING
                self._intent = "retract"
                self.last_note = "no puncture, backing off"
        # stroke / retract phases replan implicitly during execution

    def _execute(self, pose: Pose3, dt: float) -> MotionCommand:
        cfg = self.cfg
        if self._intent == "nav":
            step = self._key_step()
            jx, jy = self._jitter(2)
            vx = (self._nav_axis[0] * step + jx) / dt
            vy = (self._nav_axis[1] * step + jy) / dt
            cap = 0.99 * 5.0
            speed = math.hypot(vx, vy)
            if speed > cap:
                vx, vy = vx * cap / speed, vy * cap / speed
            return PlanarVelocity(vx, vy)

        if self._intent == "seek":
            net_descent = (self.start_z - pose.z) if self.start_z is not None else 0.0
            if net_descent + self.m.key_step_mm > cfg.max_seek_depth_mm:
                self._abort("seek_depth_exceeded")
                return Hold()
            (jz,) = self._jitter(1)
            dz = float(np.clip(-self._key_step() + jz, -0.099, 0.099))
            self.seek_depth_mm = max(self.seek_depth_mm, net_descent)
            return ZStep(dz)

        if self._intent == "stroke":
            advance = cfg.insertion_speed_mm_s * dt
            self.stroke_depth_mm += advance
            self.stroke_this_mm += advance
            if self.stroke_this_mm >= cfg.stroke_increment_mm - 1e-12:
                self.phase = ControllerPhase.VERIFY_PUNCTURE
                self._intent = None
                self._since_replan = 0.0  # needs a fresh look before judging
            return AxialInsertion(cfg.insertion_speed_mm_s)

        if self._intent == "retract":
            if self.retract_remaining_mm <= 1e-12:
                if self.attempts < cfg.max_puncture_attempts:
                    self.phase = ControllerPhase.PUNCTURE_STROKE
                    self.stroke_this_mm = 0.0
                    self._intent = "stroke"
                else:
                    self._abort("attempts_exhausted")
                return Hold()
            step = min(self.retract_remaining_mm, self.m.key_step_mm)
            self.retract_remaining_mm -= step
            self.stroke_depth_mm -= step
            (j,) = self._jitter(1)
            speed = (step + j) / dt
            return AxialInsertion(float(np.clip(-speed, -4.95, -0.01)))

        if self._intent == "full_retract":
            target_z = self.start_z if self.start_z is not None else pose.z
            if pose.z >= target_z - 1e-6:
                self.phase = ControllerPhase.DONE
                self._intent = None
                self.last_note = "manual procedure complete"
                return Hold()
            axial = (target_z - pose.z) / math.sin(math.radians(cfg.insertion_angle_deg))
            (j,) = self._jitter(1)
            speed = (min(axial, self.m.key_step_mm * 2) + j) / dt
            return AxialInsertion(float(np.clip(-speed, -4.95, -0.01)))

        return Hold()
