"""Controller FSM: transition table, safety/liveness fuzz, timing."""
import json
import math

import numpy as np
import pytest

from cannusim.controller import (
    ControllerConfig, ControllerPhase, ControllerState, Percepts, StopSignal,
    plan_navigation_step, set_target, tick, tick_bound, timers,
)
from cannusim.errors import InvalidTarget, WrongPercept, WrongPhase
from cannusim.perception import ContactDecision, PunctureDecision, TipDetection
from cannusim.world import AxialInsertion, Hold, PlanarVelocity, Pose3, ZStep

CFG = ControllerConfig()
DT = 0.1


def tip_at(u, v):
    return TipDetection(tip_px=(u, v), bbox=(int(u) - 25, int(v) - 25, 50, 50), confidence=0.9)


def contact(decision, p=None):
    return ContactDecision(probability=p if p is not None else float(decision), decision=decision,
                           threshold_used=0.5)


def puncture(decision, conf=0.9):
    return PunctureDecision(bbox=(0, 0, 4, 4), decision=decision, confidence=conf)


# --- set_target -----------------------------------------------------------------

def test_set_target_from_idle():
    s = set_target(ControllerState(), (100.0, 200.0), CFG)
    assert s.phase == ControllerPhase.NAVIGATING
    assert s.target_px == (100.0, 200.0)


def test_set_target_out_of_bounds():
    with pytest.raises(InvalidTarget):
        set_target(ControllerState(), (-5.0, 10.0), CFG)


def test_set_target_wrong_phase():
    s = ControllerState(phase=ControllerPhase.PUNCTURE_STROKE)
    with pytest.raises(WrongPhase):
        set_target(s, (10.0, 10.0), CFG)


def test_retarget_during_navigation_restarts_clock():
    s = set_target(ControllerState(), (100.0, 100.0), CFG)
    _, s = tick(s, CFG, Percepts(tip=tip_at(0, 0)), Pose3(0, 0, 3), DT)
    assert s.navigation_s > 0.0
    s2 = set_target(s, (200.0, 200.0), CFG)
    assert s2.phase == ControllerPhase.NAVIGATING
    assert s2.navigation_s == 0.0


# --- navigation planning -----------------------------------------------------------

def test_plan_stop_at_zero_distance():
    assert isinstance(plan_navigation_step((100, 100), (100, 100), CFG), StopSignal)


def test_plan_345_triangle():
    cfg = ControllerConfig(nav_gain=100.0, nav_speed_cap_mm_s=1.0)
    cmd = plan_navigation_step((0.0, 0.0), (3.0, 4.0), cfg)
    assert isinstance(cmd, PlanarVelocity)
    assert cmd.vx == pytest.approx(0.6, abs=1e-12)
    assert cmd.vy == pytest.approx(0.8, abs=1e-12)


def test_plan_stop_within_three_px():
    plan = plan_navigation_step((97.9, 100.0), (100.0, 100.0), CFG)
    assert isinstance(plan, StopSignal)
    assert plan.distance_px == pytest.approx(2.1, abs=1e-9)


# --- transition table ----------------------------------------------------------------

def seek_state():
    return ControllerState(phase=ControllerPhase.CONTACT_SEEK, target_px=(100.0, 100.0),
                           start_z=3.0)


def test_contact_seek_descends_on_no_contact():
    cmd, s = tick(seek_state(), CFG, Percepts(contact=contact(0)), Pose3(1, 0, 2.5), DT)
    assert cmd == ZStep(-0.010)
    assert s.phase == ControllerPhase.CONTACT_SEEK


def test_contact_seek_advances_on_contact():
    cmd, s = tick(seek_state(), CFG, Percepts(contact=contact(1)), Pose3(1, 0, 2.0), DT)
    assert isinstance(cmd, Hold)
    assert s.phase == ControllerPhase.PUNCTURE_STROKE
    assert s.contact_pose == Pose3(1, 0, 2.0)


def test_contact_seek_aborts_past_depth_cap():
    s = ControllerState(phase=ControllerPhase.CONTACT_SEEK, seek_depth_mm=1.499, start_z=3.0)
    _, s2 = tick(s, CFG, Percepts(contact=contact(0)), Pose3(1, 0, 1.5), DT)
    assert s2.phase == ControllerPhase.ABORTED
    assert s2.abort_reason == "seek_depth_exceeded"


def test_verify_failure_retracts_two_fifths():
    s = ControllerState(phase=ControllerPhase.VERIFY_PUNCTURE, stroke_depth_mm=0.5,
                        contact_pose=Pose3(1, 0, 2.0), start_z=3.0)
    cmd, s2 = tick(s, CFG, Percepts(puncture=puncture(0)), Pose3(1, 0, 1.5), DT)
    assert isinstance(cmd, Hold)
    assert s2.phase == ControllerPhase.RETRACTING
    assert s2.retract_remaining_mm == pytest.approx(0.2, abs=1e-12)
    assert s2.attempts == 1
    # drive the retraction to completion: exactly 0.2 mm back, depth 0.3 left
    cmd, s3 = tick(s2, CFG, Percepts(), Pose3(1, 0, 1.5), DT)
    assert isinstance(cmd, AxialInsertion) and cmd.speed < 0
    assert abs(cmd.speed) * DT == pytest.approx(0.2, abs=1e-12)
    assert s3.stroke_depth_mm == pytest.approx(0.3, abs=1e-9)
    cmd, s4 = tick(s3, CFG, Percepts(), Pose3(1, 0, 1.7), DT)
    assert s4.phase == ControllerPhase.PUNCTURE_STROKE


def test_verify_success_goes_full_retract():
    s = ControllerState(phase=ControllerPhase.VERIFY_PUNCTURE, stroke_depth_mm=0.3,
                        start_z=3.0)
    cmd, s2 = tick(s, CFG, Percepts(puncture=puncture(1)), Pose3(1, 0, 1.7), DT)
    assert s2.phase == ControllerPhase.FULL_RETRACT
    assert s2.verdict == 1


def test_low_confidence_puncture_treated_as_no_detection():
    s = ControllerState(phase=ControllerPhase.VERIFY_PUNCTURE, stroke_depth_mm=0.3,
                        start_z=3.0)
    _, s2 = tick(s, CFG, Percepts(puncture=puncture(1, conf=0.2)), Pose3(1, 0, 1.7), DT)
    assert s2.phase == ControllerPhase.RETRACTING


def test_wrong_percept_raises():
    s = set_target(ControllerState(), (100.0, 100.0), CFG)
    with pytest.raises(WrongPercept):
        tick(s, CFG, Percepts(contact=contact(1)), Pose3(0, 0, 3), DT)


def test_reacquire_aborts_after_limit():
    s = set_target(ControllerState(), (100.0, 100.0), CFG)
    for i in range(CFG.reacquire_limit):
        cmd, s = tick(s, CFG, Percepts(failure="NoNeedleDetected"), Pose3(0, 0, 3), DT)
        assert isinstance(cmd, Hold)
    assert s.phase == ControllerPhase.ABORTED
    assert s.abort_reason == "perception_lost"


def test_retraction_arithmetic_randomized():
    rng = np.random.default_rng(3)
    for _ in range(200):
        depth = float(rng.uniform(0.05, 1.2))
        s = ControllerState(phase=ControllerPhase.VERIFY_PUNCTURE, stroke_depth_mm=depth,
                            start_z=3.0)
        _, s = tick(s, CFG, Percepts(puncture=puncture(0)), Pose3(1, 0, 1.5), DT)
        retracted = 0.0
        for _ in range(100):
            if s.phase != ControllerPhase.RETRACTING or s.retract_remaining_mm <= 1e-12:
                break
            cmd, s = tick(s, CFG, Percepts(), Pose3(1, 0, 1.5), DT)
            retracted += abs(cmd.speed) * DT
        assert retracted == pytest.approx(0.4 * depth, abs=1e-9)
        assert s.stroke_depth_mm == pytest.approx(0.6 * depth, abs=1e-9)


# --- timers ------------------------------------------------------------------------

def test_navigation_timer_counts_ticks():
    s = set_target(ControllerState(), (500.0, 500.0), CFG)
    for _ in range(120):
        _, s = tick(s, CFG, Percepts(tip=tip_at(0.0, 0.0)), Pose3(0, 0, 3), DT)
    assert s.phase == ControllerPhase.NAVIGATING
    assert timers(s)["navigation_s"] == pytest.approx(12.0)


def test_recorded_times_survive_serialization():
    payload = {"navigation_s": 36.74, "puncture_s": 26.97}
    assert json.loads(json.dumps(payload)) == payload


# --- closed-loop navigation contraction -----------------------------------------------

def simulate_navigation(start_px, target_px, cfg=CFG, dt=DT):
    """Exact tip feedback: pose integrates commands, tip = exact projection."""
    scale = cfg.microscope_scale_mm_per_px
    pose = Pose3(start_px[0] * scale, start_px[1] * scale, 3.0)
    s = set_target(ControllerState(), target_px, cfg)
    dists = [math.hypot(target_px[0] - start_px[0], target_px[1] - start_px[1])]
    for n in range(10000):
        u, v = pose.x / scale, pose.y / scale
        cmd, s = tick(s, cfg, Percepts(tip=tip_at(u, v)), pose, dt)
        if s.phase != ControllerPhase.NAVIGATING:
            break
        if isinstance(cmd, PlanarVelocity):
            pose = Pose3(pose.x + cmd.vx * dt, pose.y + cmd.vy * dt, pose.z)
        dists.append(math.hypot(target_px[0] - pose.x / scale, target_px[1] - pose.y / scale))
    return dists, s


def test_navigation_strictly_decreasing_and_bounded():
    cfg = CFG
    for start, target in [((20.0, 30.0), (400.0, 450.0)), ((500.0, 10.0), (40.0, 80.0)),
                          ((256.0, 256.0), (260.0, 258.0))]:
        dists, s = simulate_navigation(start, target, cfg)
        assert s.phase == ControllerPhase.CONTACT_SEEK
        assert dists[-1] < cfg.stop_dist_px
        for a, b in zip(dists, dists[1:]):
            assert b < a, f"distance not strictly decreasing: {a} -> {b}"
        step_px = cfg.nav_speed_cap_mm_s * DT / cfg.microscope_scale_mm_per_px
        assert len(dists) - 1 <= math.ceil(dists[0] / step_px) + 1


# --- safety & liveness fuzz -------------------------------------------------------------

def fuzz_run(seed, cfg, dt=DT):
    """Random classifier outcomes and perception dropouts; tip feedback stays
    kinematically anchored so navigation can converge."""
    rng = np.random.default_rng(seed)
    scale = cfg.microscope_scale_mm_per_px
    pose = Pose3(float(rng.uniform(0, cfg.frame_width_px) * scale),
                 float(rng.uniform(0, cfg.frame_height_px) * scale), 3.0)
    target = (float(rng.uniform(0, cfg.frame_width_px)), float(rng.uniform(0, cfg.frame_height_px)))
    s = set_target(ControllerState(), target, cfg)
    contact_seen = False
    n_ticks = 0
    insertion_axis = (math.cos(math.radians(70)), 0.0, -math.sin(math.radians(70)))
    bound = tick_bound(cfg, dt)
    while s.phase not in (ControllerPhase.DONE, ControllerPhase.ABORTED):
        n_ticks += 1
        assert n_ticks <= bound, f"liveness bound exceeded ({bound})"
        if rng.random() < 0.08:
            percepts = Percepts(failure="NoNeedleDetected")
        else:
            u, v = pose.x / scale + rng.normal(0, 0.2), pose.y / scale + rng.normal(0, 0.2)
            c = int(rng.random() < 0.4)
            percepts = Percepts(tip=tip_at(u, v), contact=contact(c),
                                puncture=puncture(int(rng.random() < 0.5),
                                                  conf=float(rng.uniform(0, 1))))
            if c == 1 and s.phase == ControllerPhase.CONTACT_SEEK:
                contact_seen = True
        cmd, s = tick(s, cfg, percepts, pose, dt)
        assert s.attempts <= cfg.max_puncture_attempts
        if isinstance(cmd, AxialInsertion) and cmd.speed > 0:
            assert contact_seen, f"seed {seed}: insertion before confirmed contact"
        # integrate the command so feedback stays consistent
        if isinstance(cmd, PlanarVelocity):
            pose = Pose3(pose.x + cmd.vx * dt, pose.y + cmd.vy * dt, pose.z)
        elif isinstance(cmd, AxialInsertion):
            pose = Pose3(pose.x + cmd.speed * dt * insertion_axis[0],
                         pose.y + cmd.speed * dt * insertion_axis[1],
                         pose.z + cmd.speed * dt * insertion_axis[2])
        elif isinstance(cmd, ZStep):
            pose = Pose3(pose.x, pose.y, pose.z + cmd.dz)
    return s, n_ticks


FUZZ_CFG = ControllerConfig(frame_width_px=128, frame_height_px=128,
                            max_seek_depth_mm=0.4, reacquire_limit=50)


def test_fsm_safety_and_liveness_fuzz():
    terminal = {"Done": 0, "Aborted": 0}
    for seed in range(1000):
        s, _ = fuzz_run(seed, FUZZ_CFG)
        terminal[s.phase.value] += 1
    assert terminal["Done"] + terminal["Aborted"] == 1000
    assert terminal["Done"] > 0 and terminal["Aborted"] > 0


def test_tick_bound_is_finite_and_positive():
    assert 0 < tick_bound(CFG, DT) < 10_000_000
