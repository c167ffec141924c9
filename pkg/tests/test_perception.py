"""Perception layer: tip detection, contact/puncture classifiers, metrics."""
import math
from dataclasses import replace

import numpy as np
import pytest

from cannusim.errors import EmptySampleSet, NeedleNotInScan, NoNeedleDetected
from cannusim.imaging import (ArtifactConfig, RenderCache, render_bscan,
                              render_microscope, scanline_through)
from cannusim.perception import (
    LabeledSample, classify_contact, detect_puncture, detect_tip,
    evaluate_classifier, gap_to_probability,
)
from cannusim.world import (
    AxialInsertion, NeedleModel, Phase, Pose3, TissuePhase, WorldState, ZStep,
    evaluate_tissue_state, step, vein_preset,
)

SCAN = scanline_through((1.5, 0.0), (0.0, 1.0), 224 * 0.0357)


def make_world(tip=(0.0, 0.0, 5.0), seed=11):
    w = WorldState(t=0.0, tick=0, needle=NeedleModel(tip=Pose3(*tip)),
                   vein=vein_preset("embryo"), tissue=TissuePhase(), rng_seed=seed)
    return replace(w, tissue=evaluate_tissue_state(w))


# --- tip detection ------------------------------------------------------------

def test_render_then_detect_round_trip():
    worst = 0.0
    for x in np.linspace(-6, 6, 5):
        for y in np.linspace(-6, 6, 5):
            w = make_world(tip=(float(x), float(y), 5.0))
            frame = render_microscope(w)
            det = detect_tip(frame)
            u, v = frame.mm_to_px(x, y)
            err = math.hypot(det.tip_px[0] - u, det.tip_px[1] - v)
            worst = max(worst, err)
    assert worst <= 1.0, f"worst tip detection error {worst:.3f} px"


def test_bbox_is_50px_and_contains_tip():
    w = make_world(tip=(0.0, 0.0, 5.0))
    det = detect_tip(render_microscope(w))
    u0, v0, bw, bh = det.bbox
    assert (bw, bh) == (50, 50)
    assert u0 <= det.tip_px[0] <= u0 + bw
    assert v0 <= det.tip_px[1] <= v0 + bh


def test_bbox_clipped_at_frame_edge():
    w = make_world(tip=(-14.5, -14.5, 5.0))
    det = detect_tip(render_microscope(w))
    u0, v0, bw, bh = det.bbox
    assert u0 >= 0 and v0 >= 0
    assert u0 <= det.tip_px[0] <= u0 + bw


def test_blank_frame_raises_no_needle():
    w = make_world(tip=(40.0, 40.0, 5.0))
    w = replace(w, config=replace(w.config, workspace_half_extent_mm=60.0))
    with pytest.raises(NoNeedleDetected):
        detect_tip(render_microscope(w))


def test_occluded_tip_degrades_confidence():
    w = make_world(tip=(0.0, 0.0, 5.0))
    frame = render_microscope(w)
    u, v = frame.mm_to_px(0.0, 0.0)
    rect = (int(u) - 25, int(v) - 25, 50, 50)
    corrupted = render_microscope(w)
    from cannusim.imaging import apply_artifacts
    corrupted = apply_artifacts(corrupted, ArtifactConfig(occlusion=rect))
    try:
        det = detect_tip(corrupted)
        assert det.confidence < 0.3
    except NoNeedleDetected:
        pass


def test_confidence_nonincreasing_under_occlusion_sweep():
    from cannusim.imaging import apply_artifacts
    w = make_world(tip=(0.0, 0.0, 5.0))
    frame = render_microscope(w)
    u, v = frame.mm_to_px(0.0, 0.0)
    confs = []
    # 50x50 occluder slides in from ahead of the tip until it covers it
    for offset in (60, 30, 10, 0, -15):
        rect = (int(u) + offset - 25, int(v) - 25, 50, 50)
        f = apply_artifacts(frame, ArtifactConfig(occlusion=rect))
        try:
            confs.append(detect_tip(f).confidence)
        except NoNeedleDetected:
            confs.append(0.0)
    assert confs[0] > 0.5
    for a, b in zip(confs, confs[1:]):
        assert b <= a + 0.02, f"confidence increased along occlusion sweep: {confs}"
    assert confs[-1] < 0.3


# --- contact classification -----------------------------------------------------

def test_gap_probability_formula():
    assert gap_to_probability(10.0) == pytest.approx(1 / (1 + math.exp(5.0)), abs=1e-12)
    assert gap_to_probability(10.0) < 0.01
    assert gap_to_probability(0.0) == 0.5
    assert gap_to_probability(-4.0) == pytest.approx(0.8807970779778823, abs=1e-12)


def test_probability_monotone_in_gap():
    gaps = np.linspace(-12, 12, 49)
    ps = [gap_to_probability(float(g)) for g in gaps]
    assert all(a >= b for a, b in zip(ps, ps[1:]))


def test_contact_far_above_wall():
    w = make_world(tip=(1.5, 0.0, 2.0 + 0.357))  # 10 px above
    dec = classify_contact(render_bscan(w, SCAN))
    assert dec.probability < 0.01
    assert dec.decision == 0


def test_contact_past_wall():
    # tip 4 px through the (ruptured) wall; the ridge elsewhere marks the
    # reference row, so the measured gap is -4
    w = make_world(tip=(1.5, 0.0, 2.0 - 4 * 0.0357))
    w = replace(w, tissue=TissuePhase(phase=Phase.PUNCTURED,
                                      contact_pose=Pose3(1.5, 0.0, 2.0),
                                      rupture_xy=(1.5, 0.0)))
    dec = classify_contact(render_bscan(w, SCAN))
    assert dec.probability == pytest.approx(0.88, abs=0.05)
    assert dec.decision == 1


def test_contact_stays_on_while_wall_deforms():
    w = make_world(tip=(1.5, 0.0, 2.0 - 4 * 0.0357))  # deformed, dent tracks tip
    dec = classify_contact(render_bscan(w, SCAN))
    assert dec.decision == 1


def test_contact_probability_increases_during_descent():
    cache = RenderCache()
    ps = []
    for z in np.linspace(2.25, 1.95, 16):
        w = make_world(tip=(1.5, 0.0, float(z)))
        ps.append(classify_contact(render_bscan(w, SCAN, cache=cache)).probability)
    for a, b in zip(ps, ps[1:]):
        assert b >= a - 0.02, f"probability not monotone along descent: {ps}"
    assert ps[0] < 0.05 and ps[-1] > 0.5


def test_needle_not_in_scan_is_an_error():
    w = make_world(tip=(1.5, 0.0, 9.0))
    w = replace(w, config=replace(w.config, workspace_half_extent_mm=20.0))
    with pytest.raises(NeedleNotInScan):
        classify_contact(render_bscan(w, SCAN))


# --- puncture detection -----------------------------------------------------------

def drive_to_puncture(seed=5):
    """Slow seek to the wall, then one fast axial stroke."""
    w = make_world(tip=(1.5, 0.0, 2.08), seed=seed)
    states = [w]
    contact_at = None
    for _ in range(200):
        if w.tissue.phase >= Phase.PUNCTURED:
            break
        if contact_at is None and w.tissue.phase >= Phase.CONTACT:
            contact_at = len(states) - 1
        if contact_at is not None and len(states) - 1 >= contact_at + 5:
            w = step(w, AxialInsertion(3.0), 0.1)
        else:
            w = step(w, ZStep(-0.01), 0.1)
        states.append(w)
    assert states[-1].tissue.phase == Phase.PUNCTURED
    return states


def test_puncture_decision_deformed_vs_punctured():
    states = drive_to_puncture()
    cache = RenderCache()
    deformed = next(s for s in states if s.tissue.phase == Phase.DEFORMED)
    punctured = states[-1]
    d0 = detect_puncture(render_bscan(deformed, SCAN, cache=cache))
    assert d0.decision == 0
    d1 = detect_puncture(render_bscan(punctured, SCAN, cache=cache))
    assert d1.decision == 1
    assert d1.confidence >= 0.5


def test_perception_tracks_world_oracle_within_one_tick():
    states = drive_to_puncture()
    cache = RenderCache()
    contact_dec, puncture_dec = [], []
    for s in states:
        frame = render_bscan(s, SCAN, cache=cache)
        contact_dec.append(classify_contact(frame).decision)
        puncture_dec.append(detect_puncture(frame).decision)

    world_contact = next(i for i, s in enumerate(states) if s.tissue.phase >= Phase.CONTACT)
    perc_contact = contact_dec.index(1)
    assert abs(world_contact - perc_contact) <= 1

    world_punct = next(i for i, s in enumerate(states) if s.tissue.phase >= Phase.PUNCTURED)
    perc_punct = puncture_dec.index(1)
    assert abs(world_punct - perc_punct) <= 1

    for i, (s, c, p) in enumerate(zip(states, contact_dec, puncture_dec)):
        if abs(i - world_contact) > 1:
            assert c == int(s.tissue.phase >= Phase.CONTACT), f"contact disagrees at {i}"
        if abs(i - world_punct) > 1:
            assert p == int(s.tissue.phase >= Phase.PUNCTURED), f"puncture disagrees at {i}"


def test_noise_sweep_on_punctured_render_records_flips():
    from cannusim.imaging import apply_artifacts
    punctured = drive_to_puncture()[-1]
    frame = render_bscan(punctured, SCAN)
    flips = 0
    for seed in range(20):
        cfg = ArtifactConfig(brightness_pct=-15, exposure_pct=-10,
                             noise_frac=0.001, occlusion_prob=0.3, seed=seed)
        try:
            dec = detect_puncture(apply_artifacts(frame, cfg))
            flips += dec.decision == 0 or dec.confidence < 0.5
        except NeedleNotInScan:
            flips += 1
    # heavy corruption is allowed to flip decisions; it must never crash
    assert 0 <= flips <= 20


# --- classifier metrics --------------------------------------------------------

def test_metrics_fixture_reproduces_report_table():
    samples = ([LabeledSample(i, 0, 0) for i in range(9)]          # TN
               + [LabeledSample(i, 0, 1) for i in range(9, 12)]    # FP
               + [LabeledSample(i, 1, 0) for i in range(12, 13)]   # FN
               + [LabeledSample(i, 1, 1) for i in range(13, 27)])  # TP
    m = evaluate_classifier(samples)
    assert m.precision[0] == pytest.approx(0.90, abs=0.005)
    assert m.precision[1] == pytest.approx(0.82, abs=0.005)
    assert m.recall[0] == pytest.approx(0.75, abs=0.005)
    assert m.recall[1] == pytest.approx(0.93, abs=0.005)
    assert m.f1[0] == pytest.approx(0.82, abs=0.005)
    assert m.f1[1] == pytest.approx(0.87, abs=0.005)
    assert m.support == (12, 15)
    assert m.accuracy == pytest.approx(0.85, abs=0.005)
    assert m.division_flags == ()


def test_metrics_all_correct():
    samples = [LabeledSample(i, i % 2, i % 2) for i in range(10)]
    m = evaluate_classifier(samples)
    assert m.precision == (1.0, 1.0) and m.recall == (1.0, 1.0)
    assert m.f1 == (1.0, 1.0) and m.accuracy == 1.0


def test_metrics_degenerate_all_predicted_one():
    # no true positives: class-1 precision is a plain 0; the empty
    # denominators (class-0 precision, class-1 recall) are the flagged ones
    samples = [LabeledSample(i, 0, 1) for i in range(8)]
    m = evaluate_classifier(samples)
    assert m.precision[1] == 0.0
    assert "precision_class0" in m.division_flags
    assert "recall_class1" in m.division_flags
    assert m.accuracy == 0.0


def test_metrics_empty_rejected():
    with pytest.raises(EmptySampleSet):
        evaluate_classifier([])
