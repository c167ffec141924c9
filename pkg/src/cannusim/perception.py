"""Image-only perception: tip detection, contact and puncture classification.

These functions consume frames and nothing else. Intensity thresholds are
expressed relative to the renderer palette and rescaled by a gain estimate
from the frame median, so uniform brightness/exposure changes mostly cancel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptySampleSet, NeedleNotInScan, NoNeedleDetected
from .imaging import (BG_MEAN, BScanFrame, MicroscopeFrame, RIDGE_INTENSITY,
                      TIP_INTENSITY)

__all__ = [
    "TipDetection", "ContactDecision", "PunctureDecision", "LabeledSample",
    "MetricsTable", "PerceptionConfig", "detect_tip", "classify_contact",
    "detect_puncture", "gap_to_probability", "evaluate_classifier",
]


@dataclass(frozen=True)
class PerceptionConfig:
    """Tuning constants; azimuth comes from the fixed needle mount."""
    insertion_azimuth_deg: float = 0.0
    min_component_area: int = 10
    blob_min_area: int = 3
    contact_steepness: float = 0.5        # logistic slope, 1/px
    ridge_band_halfwidth_px: int = 5      # contains the deepest elastic dent
    gap_min_columns: int = 3
    gap_search_halfwidth_px: int = 20


@dataclass(frozen=True)
class TipDetection:
    tip_px: tuple[float, float]
    bbox: tuple[int, int, int, int]  # (u0, v0, w, h), 50x50 clipped at edges
    confidence: float


@dataclass(frozen=True)
class ContactDecision:
    probability: float
    decision: int
    threshold_used: float


@dataclass(frozen=True)
class PunctureDecision:
    bbox: tuple[int, int, int, int]
    decision: int
    confidence: float


@dataclass(frozen=True)
class LabeledSample:
    frame_id: int
    true_label: int
    predicted_label: int
    confidence: float = 1.0


def _frame_median(pixels: np.ndarray) -> float:
    # background dominates every frame; a subsampled median is plenty
    return float(np.median(pixels[::4, ::4]))


def _gain(pixels: np.ndarray) -> float:
    return float(np.clip(_frame_median(pixels) / BG_MEAN, 0.5, 2.0))


def _largest_component(mask: np.ndarray, min_area: int):
    # label only the occupied bounding box; the rest of the frame is empty
    rows = mask.any(axis=1)
    if not rows.any():
        return None
    cols = mask.any(axis=0)
    r0, r1 = int(np.argmax(rows)), len(rows) - int(np.argmax(rows[::-1]))
    c0, c1 = int(np.argmax(cols)), len(cols) - int(np.argmax(cols[::-1]))
    sub = mask[r0:r1, c0:c1]
    labels, n = ndimage.label(sub)
    if n == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    if areas[best - 1] < min_area:
        return None
    out = np.zeros_like(mask)
    out[r0:r1, c0:c1] = labels == best
    return out


def _clipped_box(cu: float, cv: float, side: int, w: int, h: int) -> tuple[int, int, int, int]:
    u0 = int(round(cu)) - side // 2
    v0 = int(round(cv)) - side // 2
    u0 = max(0, min(u0, w - 1))
    v0 = max(0, min(v0, h - 1))
    return (u0, v0, min(side, w - u0), min(side, h - v0))


# --- planar tip detection -----------------------------------------------------

def detect_tip(frame: MicroscopeFrame, cfg: PerceptionConfig = PerceptionConfig()) -> TipDetection:
    """Locate the needle tip: threshold at the needle band, take the largest
    component, walk to its most advanced pixel along the insertion azimuth,
    then refine to sub-pixel with an intensity-weighted centroid.

    Raises:
        NoNeedleDetected: no needle-class component of sufficient area.
    """
    img = frame.pixels
    h, w = img.shape
    g = _gain(img)
    needle_thresh = float(np.clip(150.0 * g, 110.0, 205.0))
    comp = _largest_component(img >= needle_thresh, cfg.min_component_area)
    if comp is None:
        raise NoNeedleDetected("no needle-class component above minimum area")

    vs, us = np.nonzero(comp)
    az = math.radians(cfg.insertion_azimuth_deg)
    ax, ay = math.cos(az), math.sin(az)
    adv = us * ax + vs * ay
    best = adv.max()
    ties = np.nonzero(adv >= best - 1e-9)[0]
    if len(ties) > 1:
        cu0, cv0 = us.mean(), vs.mean()
        d2 = (us[ties] - cu0) ** 2 + (vs[ties] - cv0) ** 2
        pick = ties[int(np.argmin(d2))]
    else:
        pick = ties[0]
    eu, ev = int(us[pick]), int(vs[pick])

    # Sub-pixel refinement: the specular tip blob is the brightest mass near
    # the extremal pixel; restricting weights to tip-class pixels removes the
    # shaft's backward pull.
    tip_thresh = min(235.0 * g, 245.0)
    u_lo, u_hi = max(0, eu - 3), min(w, eu + 4)
    v_lo, v_hi = max(0, ev - 3), min(h, ev + 4)
    win = img[v_lo:v_hi, u_lo:u_hi].astype(np.float64)
    wv, wu = np.nonzero(win >= tip_thresh)
    if len(wu) >= 2:
        weights = win[wv, wu]
    else:  # degraded frame: fall back to needle-class weighting in a 5x5
        u_lo, u_hi = max(0, eu - 2), min(w, eu + 3)
        v_lo, v_hi = max(0, ev - 2), min(h, ev + 3)
        win = img[v_lo:v_hi, u_lo:u_hi].astype(np.float64)
        wv, wu = np.nonzero(win >= needle_thresh)
        weights = win[wv, wu] - needle_thresh + 1.0
    cu = float((wu * weights).sum() / weights.sum()) + u_lo
    cv = float((wv * weights).sum() / weights.sum()) + v_lo

    # Confidence: presence of the tip blob, scaled by component contrast.
    t_lo, t_hi = max(0, int(round(cv)) - 3), min(h, int(round(cv)) + 4)
    s_lo, s_hi = max(0, int(round(cu)) - 3), min(w, int(round(cu)) + 4)
    core = int((img[t_lo:t_hi, s_lo:s_hi] >= tip_thresh).sum())
    comp_mean = float(img[vs, us].mean())
    bg_med = _frame_median(img)
    contrast = float(np.clip((comp_mean - bg_med) / 180.0, 0.0, 1.0))
    confidence = min(1.0, core / 5.0) * contrast

    return TipDetection(tip_px=(cu, cv), bbox=_clipped_box(cu, cv, 50, w, h),
                        confidence=confidence)


# --- depth-scan analysis shared by contact and puncture -------------------------

def _first_run_rows(mask: np.ndarray, vals: np.ndarray, max_run: int = 8) -> np.ndarray:
    """Per column: intensity-weighted centroid row of the shallowest
    contiguous run of >= 2 masked rows (nan where none)."""
    h, w = mask.shape
    pair = mask[:-1] & mask[1:]
    exists = pair.any(axis=0)
    r0 = np.argmax(pair, axis=0)
    offs = np.arange(max_run)
    rows_idx = np.minimum(r0[None, :] + offs[:, None], h - 1)
    cols_idx = np.broadcast_to(np.arange(w)[None, :], rows_idx.shape)
    contig = np.cumprod(mask[rows_idx, cols_idx], axis=0).astype(bool)
    wgt = vals[rows_idx, cols_idx] * contig
    wsum = wgt.sum(axis=0)
    centroid = (wgt * rows_idx).sum(axis=0) / np.where(wsum > 0, wsum, 1.0)
    return np.where(exists & (wsum > 0), centroid, np.nan)


@dataclass
class _ScanAnalysis:
    gain: float
    blob_centroid: tuple[float, float]
    blob_bbox: tuple[int, int, int, int]
    blob_mask: np.ndarray
    blob_mean: float
    ridge_row: float                 # global top-wall row (median across columns)
    ridge_ref: float                 # typical ridge peak intensity
    ridge_cols: np.ndarray           # columns with any ridge run
    col_first_run_row: np.ndarray    # per-column centroid of shallowest run (nan if none)
    wall_candidates: np.ndarray      # non-needle intensities (blob region zeroed)


def _analyze_scan(frame: BScanFrame, cfg: PerceptionConfig) -> _ScanAnalysis:
    img = frame.pixels
    h, w = img.shape
    g = _gain(img)

    blob_thresh = min(230.0 * g, 242.0)
    blob = _largest_component(img >= blob_thresh, cfg.blob_min_area)
    if blob is None:
        raise NeedleNotInScan("no needle cross-section in the depth scan")
    bv, bu = np.nonzero(blob)
    bw = img[bv, bu].astype(np.float64)
    u_b = float((bu * bw).sum() / bw.sum())
    v_b = float((bv * bw).sum() / bw.sum())
    bbox = (int(bu.min()), int(bv.min()), int(bu.max() - bu.min() + 1), int(bv.max() - bv.min() + 1))
    blob_mean = float(bw.mean())

    # intensities with the needle blob (and its AA fringe) blanked out, so
    # nothing needle-shaped can be mistaken for wall tissue
    wall_candidates = img.astype(np.float64)
    u0, v0, rw, rh = bbox
    wall_candidates[max(0, v0 - 1):v0 + rh + 1, max(0, u0 - 1):u0 + rw + 1] = 0.0

    ridge_lo = 120.0 * g
    ridge_hi = min(228.0 * g, 242.0)
    ridge_mask = (wall_candidates >= ridge_lo) & (wall_candidates <= ridge_hi)
    col_row = _first_run_rows(ridge_mask, wall_candidates)
    ridge_cols = np.nonzero(~np.isnan(col_row))[0]
    if len(ridge_cols) == 0:
        raise NeedleNotInScan("no wall ridge visible in the depth scan")
    # shallow quartile: columns whose first run is the bottom wall (torn or
    # shadowed top) must not drag the top-wall estimate down
    ridge_row = float(np.percentile(col_row[ridge_cols], 25))
    peaks = [float(wall_candidates[ridge_mask[:, c], c].max()) for c in ridge_cols]
    ridge_ref = float(np.median(peaks))

    return _ScanAnalysis(gain=g, blob_centroid=(u_b, v_b), blob_bbox=bbox,
                         blob_mask=blob, blob_mean=blob_mean, ridge_row=ridge_row,
                         ridge_ref=ridge_ref, ridge_cols=ridge_cols,
                         col_first_run_row=col_row, wall_candidates=wall_candidates)


def gap_to_probability(gap_px: float, steepness: float = 0.5) -> float:
    """Contact probability from the signed blob-to-ridge gap (positive =
    blob above the wall): 0.5 at zero gap, saturating within ~10 px."""
    return 1.0 / (1.0 + math.exp(steepness * gap_px))


def classify_contact(frame: BScanFrame, threshold: float = 0.5,
                     cfg: PerceptionConfig = PerceptionConfig()) -> ContactDecision:
    """Needle-wall contact from the depth scan.

    Raises:
        NeedleNotInScan: needle blob (or any wall ridge) not found.
    """
    scan = _analyze_scan(frame, cfg)
    gap = scan.ridge_row - scan.blob_centroid[1]
    p = gap_to_probability(gap, cfg.contact_steepness)
    return ContactDecision(probability=p, decision=int(p >= threshold),
                           threshold_used=threshold)


def detect_puncture(frame: BScanFrame, conf_min: float = 0.5,
                    cfg: PerceptionConfig = PerceptionConfig()) -> PunctureDecision:
    """Puncture recognition: the blob must sit clearly below the top wall
    row and the wall must show a torn gap near the blob column.

    Raises:
        NeedleNotInScan: needle blob (or any wall ridge) not found.
    """
    img = frame.pixels
    h, w = img.shape
    scan = _analyze_scan(frame, cfg)
    u_b, v_b = scan.blob_centroid
    below = v_b >= scan.ridge_row + 2.0

    band_lo = max(0, int(math.floor(scan.ridge_row)) - cfg.ridge_band_halfwidth_px)
    band_hi = min(h, int(math.ceil(scan.ridge_row)) + cfg.ridge_band_halfwidth_px + 1)
    band = scan.wall_candidates[band_lo:band_hi, :]

    # a column shows wall if anything near ridge strength survives in the
    # band; columns hidden behind the needle blob itself are "covered", not
    # missing (an intact dented wall sits right under the tip)
    has_ridge = (band >= 0.5 * scan.ridge_ref).any(axis=0)
    covered = scan.blob_mask[band_lo:band_hi, :].any(axis=0)
    span_lo, span_hi = int(scan.ridge_cols.min()), int(scan.ridge_cols.max())
    missing = ~has_ridge & ~covered
    missing[:span_lo] = False
    missing[span_hi + 1:] = False

    gap_found = False
    gap_len = 0
    gap_intensity = 0.0
    c = span_lo
    while c <= span_hi:
        if missing[c]:
            start = c
            while c <= span_hi and missing[c]:
                c += 1
            length = c - start
            center = (start + c - 1) / 2.0
            if (length >= cfg.gap_min_columns
                    and abs(center - u_b) <= cfg.gap_search_halfwidth_px):
                gap_found = True
                gap_len = max(gap_len, length)
                gap_intensity = max(gap_intensity, float(band[:, start:c].max()))
        else:
            c += 1

    decision = int(below and gap_found)
    bg_med = _frame_median(img)
    blob_contrast = float(np.clip((scan.blob_mean - bg_med) / (TIP_INTENSITY - BG_MEAN), 0.0, 1.0))
    if decision:
        # how far below the 50%-drop criterion the torn region sits, and how
        # much of a full-width tear is visible
        gap_depth = 1.0 - float(np.clip(gap_intensity / max(0.5 * scan.ridge_ref, 1.0), 0.0, 1.0))
        coverage = min(1.0, gap_len / 10.0)
        confidence = float(np.clip(0.5 * blob_contrast + 0.5 * coverage * gap_depth, 0.0, 1.0))
    else:
        confidence = blob_contrast
    # a gain estimate far from the nominal palette means the frame is off
    # the calibrated imaging distribution; trust drops accordingly
    confidence *= max(0.4, 1.0 - 1.5 * abs(1.0 - scan.gain))
    return PunctureDecision(bbox=scan.blob_bbox, decision=decision, confidence=confidence)


# --- classifier evaluation -------------------------------------------------------

@dataclass(frozen=True)
class MetricsTable:
    """Per-class precision/recall/F1/support plus overall accuracy."""
    precision: tuple[float, float]
    recall: tuple[float, float]
    f1: tuple[float, float]
    support: tuple[int, int]
    accuracy: float
    division_flags: tuple[str, ...] = ()

    def rows(self) -> list[list]:
        return [
            ["Precision", self.precision[0], self.precision[1]],
            ["Recall", self.recall[0], self.recall[1]],
            ["F1-score", self.f1[0], self.f1[1]],
            ["Support", self.support[0], self.support[1]],
            ["Accuracy", self.accuracy, ""],
        ]

    def to_dict(self) -> dict:
        return {
            "precision": {"class0": self.precision[0], "class1": self.precision[1]},
            "recall": {"class0": self.recall[0], "class1": self.recall[1]},
            "f1": {"class0": self.f1[0], "class1": self.f1[1]},
            "support": {"class0": self.support[0], "class1": self.support[1]},
            "accuracy": self.accuracy,
            "division_flags": list(self.division_flags),
        }


def evaluate_classifier(samples: list[LabeledSample]) -> MetricsTable:
    """Counts-based binary classification metrics; division by zero yields
    0 and is flagged.

    Raises:
        EmptySampleSet: no samples given.
    """
    if not samples:
        raise EmptySampleSet("no samples to evaluate")
    for s in samples:
        if s.true_label not in (0, 1) or s.predicted_label not in (0, 1):
            raise ValueError(f"labels must be binary, got {s}")

    tp = sum(1 for s in samples if s.predicted_label == 1 and s.true_label == 1)
    tn = sum(1 for s in samples if s.predicted_label == 0 and s.true_label == 0)
    fp = sum(1 for s in samples if s.predicted_label == 1 and s.true_label == 0)
    fn = sum(1 for s in samples if s.predicted_label == 0 and s.true_label == 1)

    flags = []

    def safe_div(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    p0 = safe_div(tn, tn + fn, "precision_class0")
    p1 = safe_div(tp, tp + fp, "precision_class1")
    r0 = safe_div(tn, tn + fp, "recall_class0")
    r1 = safe_div(tp, tp + fn, "recall_class1")
    f0 = safe_div(2 * p0 * r0, p0 + r0, "f1_class0")
    f1 = safe_div(2 * p1 * r1, p1 + r1, "f1_class1")

    return MetricsTable(
        precision=(p0, p1), recall=(r0, r1), f1=(f0, f1),
        support=(tn + fp, tp + fn),
        accuracy=(tp + tn) / len(samples),
        division_flags=tuple(flags),
    )
