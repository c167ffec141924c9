"""Render ground truth into the two image modalities perception may see.

The planar microscope view is an orthographic top-down projection; the
depth scan is a vertical slice through a configurable scanline. Frames
carry their own scale metadata so downstream consumers never need the
world state. All rendering is deterministic per (world, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import OutOfBounds, ScanlineMissesROI, ScenarioInvalid
from .world import WorldState, Phase

__all__ = [
    "MicroscopeFrame", "BScanFrame", "Scanline", "MicroscopeConfig",
    "BScanConfig", "ArtifactConfig", "RenderCache", "render_microscope",
    "render_bscan", "apply_artifacts", "scanline_through", "write_pgm",
    "write_png",
]

# Fixed intensity palette: perception relies on this contrast ordering.
BG_MEAN = 30.0
BG_SIGMA = 10.0
BG_CLIP = 75.0
VEIN_INTENSITY = 90.0
RIDGE_INTENSITY = 180.0
SHAFT_INTENSITY = 210.0
TIP_INTENSITY = 250.0
SHADOW_FLOOR = 15.0
SHADOW_GAIN = 0.25

MIC_TIP_RADIUS_PX = 1.8
BSCAN_BLOB_RADIUS_PX = 2.2
SHAFT_WIDTH_MM = 0.30


@dataclass(frozen=True)
class MicroscopeConfig:
    width: int = 512
    height: int = 512
    scale_mm_per_px: float = 0.0586
    origin: tuple[float, float] = (-15.0, -15.0)  # XOY of pixel (0, 0)


@dataclass(frozen=True)
class BScanConfig:
    size: int = 224
    scale_mm_per_px: float = 0.0357
    z_top_mm: Optional[float] = None  # None: auto-center the vein depth


@dataclass(frozen=True)
class Scanline:
    """Directed segment in XOY defining the vertical slice plane.

    Column u of the scan maps to ``start + u * scale * direction``.
    """
    start: tuple[float, float]
    direction: tuple[float, float]

    def __post_init__(self):
        n = math.hypot(*self.direction)
        if n == 0:
            raise ValueError("scanline direction must be nonzero")
        if not math.isclose(n, 1.0, abs_tol=1e-9):
            object.__setattr__(self, "direction", (self.direction[0] / n, self.direction[1] / n))

    def project(self, x: float, y: float) -> tuple[float, float]:
        """(along, perpendicular) coordinates of an XOY point, in mm."""
        px, py = x - self.start[0], y - self.start[1]
        dx, dy = self.direction
        return (px * dx + py * dy, px * dy - py * dx)


def scanline_through(point_xy: tuple[float, float], vein_axis_dir: tuple[float, float],
                     length_mm: float) -> Scanline:
    """Scanline perpendicular to the vein axis, centered on a target point."""
    dx, dy = vein_axis_dir
    perp = (-dy, dx)
    start = (point_xy[0] - perp[0] * length_mm / 2.0, point_xy[1] - perp[1] * length_mm / 2.0)
    return Scanline(start=start, direction=perp)


@dataclass(frozen=True)
class MicroscopeFrame:
    pixels: np.ndarray  # (H, W) uint8
    scale_mm_per_px: float
    origin: tuple[float, float]
    t: float
    frame_id: int = 0

    def mm_to_px(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.origin[0]) / self.scale_mm_per_px,
                (y - self.origin[1]) / self.scale_mm_per_px)

    def px_to_mm(self, u: float, v: float) -> tuple[float, float]:
        h, w = self.pixels.shape
        if not (0 <= u < w and 0 <= v < h):
            raise OutOfBounds(f"pixel ({u}, {v}) outside {w}x{h} frame")
        return (self.origin[0] + u * self.scale_mm_per_px,
                self.origin[1] + v * self.scale_mm_per_px)


@dataclass(frozen=True)
class BScanFrame:
    pixels: np.ndarray  # (H, W) uint8, rows index depth (z decreasing downward)
    scale_mm_per_px: float
    scanline: Scanline
    z_top_mm: float
    t: float
    frame_id: int = 0

    def mm_to_px(self, along_mm: float, z_mm: float) -> tuple[float, float]:
        return (along_mm / self.scale_mm_per_px,
                (self.z_top_mm - z_mm) / self.scale_mm_per_px)

    def px_to_mm(self, u: float, v: float) -> tuple[float, float]:
        h, w = self.pixels.shape
        if not (0 <= u < w and 0 <= v < h):
            raise OutOfBounds(f"pixel ({u}, {v}) outside {w}x{h} frame")
        return (u * self.scale_mm_per_px, self.z_top_mm - v * self.scale_mm_per_px)

    def px_to_xy(self, u: float) -> tuple[float, float]:
        s = u * self.scale_mm_per_px
        return (self.scanline.start[0] + s * self.scanline.direction[0],
                self.scanline.start[1] + s * self.scanline.direction[1])


SPECKLE_POOL_SIZE = 32


@dataclass
class RenderCache:
    """Per-trial cache: static planar base and the depth-scan speckle pool."""
    microscope_base: Optional[np.ndarray] = None
    bscan_speckle_pool: Optional[np.ndarray] = None


def _bscan_speckle(seed: int, tick: int, n: int,
                   cache: Optional[RenderCache] = None) -> np.ndarray:
    """Depth-scan speckle decorrelates between acquisitions: slice choice
    cycles a seeded pool, so renders depend only on (seed, tick)."""
    k = tick % SPECKLE_POOL_SIZE

    def make(slice_idx: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(slice_idx,)))
        return np.clip(rng.normal(BG_MEAN, BG_SIGMA, (n, n)), 0.0, BG_CLIP).astype(np.float32)

    if cache is None:
        return make(k)
    if cache.bscan_speckle_pool is None:
        cache.bscan_speckle_pool = np.stack([make(i) for i in range(SPECKLE_POOL_SIZE)])
    return cache.bscan_speckle_pool[k]


def _speckle(shape: tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    return np.clip(rng.normal(BG_MEAN, BG_SIGMA, shape), 0.0, BG_CLIP).astype(np.float32)


def _draw_band(img: np.ndarray, dist_px: np.ndarray, halfwidth_px: float, intensity: float) -> None:
    """Composite an anti-aliased band given per-pixel distance to its centerline."""
    cov = np.clip(halfwidth_px + 0.5 - dist_px, 0.0, 1.0)
    np.maximum(img, intensity * cov, out=img)


def _draw_capsule(img: np.ndarray, p0: tuple[float, float], p1: tuple[float, float],
                  radius_px: float, intensity: float) -> None:
    """Anti-aliased thick segment from p0 to p1 (pixel coords, (u, v))."""
    h, w = img.shape
    pad = int(math.ceil(radius_px)) + 2
    u_lo = max(0, int(math.floor(min(p0[0], p1[0]))) - pad)
    u_hi = min(w, int(math.ceil(max(p0[0], p1[0]))) + pad + 1)
    v_lo = max(0, int(math.floor(min(p0[1], p1[1]))) - pad)
    v_hi = min(h, int(math.ceil(max(p0[1], p1[1]))) + pad + 1)
    if u_lo >= u_hi or v_lo >= v_hi:
        return
    uu, vv = np.meshgrid(np.arange(u_lo, u_hi, dtype=np.float32),
                         np.arange(v_lo, v_hi, dtype=np.float32))
    ax, ay = p0
    bx, by = p1
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom == 0:
        t = np.zeros_like(uu)
    else:
        t = np.clip(((uu - ax) * abx + (vv - ay) * aby) / denom, 0.0, 1.0)
    dist = np.hypot(uu - (ax + t * abx), vv - (ay + t * aby))
    sub = img[v_lo:v_hi, u_lo:u_hi]
    _draw_band(sub, dist, radius_px, intensity)


def _draw_disc(img: np.ndarray, center: tuple[float, float], radius_px: float, intensity: float) -> None:
    _draw_capsule(img, center, center, radius_px, intensity)


def render_microscope(world: WorldState, cfg: MicroscopeConfig = MicroscopeConfig(),
                      cache: Optional[RenderCache] = None) -> MicroscopeFrame:
    """Top-down projection: speckle background, vein band, needle shaft,
    and a bright specular blob at the tip."""
    scale = cfg.scale_mm_per_px
    ox, oy = cfg.origin

    base = cache.microscope_base if cache is not None else None
    if base is None:
        base = _speckle((cfg.height, cfg.width), world.rng_seed)
        # vein band of width diameter/scale centered on the axis
        uu, vv = np.meshgrid(np.arange(cfg.width, dtype=np.float32),
                             np.arange(cfg.height, dtype=np.float32))
        xs = ox + uu * scale
        ys = oy + vv * scale
        ax, ay = world.vein.axis_point
        dx, dy = world.vein.axis_dir
        dist_mm = np.abs((xs - ax) * dy - (ys - ay) * dx)
        _draw_band(base, dist_mm / scale, world.vein.diameter_mm / 2.0 / scale, VEIN_INTENSITY)
        if cache is not None:
            cache.microscope_base = base

    img = base.copy()
    tip = world.needle.tip
    tip_px = ((tip.x - ox) / scale, (tip.y - oy) / scale)
    entry_xy = world.needle.entry_point_xy()
    entry_px = ((entry_xy[0] - ox) / scale, (entry_xy[1] - oy) / scale)
    _draw_capsule(img, entry_px, tip_px, SHAFT_WIDTH_MM / 2.0 / scale, SHAFT_INTENSITY)
    _draw_disc(img, tip_px, MIC_TIP_RADIUS_PX, TIP_INTENSITY)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return MicroscopeFrame(pixels=pixels, scale_mm_per_px=scale, origin=cfg.origin,
                           t=world.t, frame_id=world.tick)


def render_bscan(world: WorldState, scanline: Scanline,
                 cfg: BScanConfig = BScanConfig(),
                 cache: Optional[RenderCache] = None) -> BScanFrame:
    """Vertical slice: two bright wall ridges (the top one dented by the
    current deflection, torn open once ruptured), the needle cross-section
    as a bright blob, and an attenuation shadow beneath it.

    Raises:
        ScanlineMissesROI: needle tip farther than half the frame width
            from the scanline segment.
    """
    n = cfg.size
    scale = cfg.scale_mm_per_px
    vein = world.vein
    z_top = cfg.z_top_mm if cfg.z_top_mm is not None else vein.depth_z + n * scale / 2.0

    tip = world.needle.tip
    s_tip, perp_tip = scanline.project(tip.x, tip.y)
    half_width_mm = n * scale / 2.0
    s_clamped = min(max(s_tip, 0.0), n * scale)
    dist_to_segment = math.hypot(s_tip - s_clamped, perp_tip)
    if dist_to_segment > half_width_mm:
        raise ScanlineMissesROI(
            f"tip {dist_to_segment:.2f} mm from scanline (> {half_width_mm:.2f} mm)")

    img = _bscan_speckle(world.rng_seed + 1, world.tick, n, cache).copy()

    # per-column geometry along the scanline
    s_cols = np.arange(n, dtype=np.float64) * scale
    col_x = scanline.start[0] + s_cols * scanline.direction[0]
    col_y = scanline.start[1] + s_cols * scanline.direction[1]
    ax, ay = vein.axis_point
    dx, dy = vein.axis_dir
    lat = np.abs((col_x - ax) * dy - (col_y - ay) * dx)
    in_band = lat <= vein.diameter_mm / 2.0

    rows = np.arange(n, dtype=np.float64)

    def ridge_rows(z_wall: np.ndarray) -> np.ndarray:
        ridge_c = (z_top - z_wall) / scale
        # axial point spread: even a thin wall images at least ~3 px thick
        half = max(vein.wall_thickness_mm / 2.0 / scale, 1.5)
        return np.clip(half + 0.5 - np.abs(rows[:, None] - ridge_c[None, :]), 0.0, 1.0)

    # a tear cannot be wider than the vessel allows
    gap_mm = min(world.config.rupture_gap_mm, max(0.12, 0.5 * vein.diameter_mm))

    def gap_mask(rupture_xy) -> np.ndarray:
        if rupture_xy is None:
            return np.zeros(n, dtype=bool)
        s_r, perp_r = scanline.project(*rupture_xy)
        if abs(perp_r) > gap_mm / 2.0:
            return np.zeros(n, dtype=bool)
        return np.abs(s_cols - s_r) <= gap_mm / 2.0

    # top wall: dented by the local elastic deflection around the tip
    z_wall_top = np.full(n, vein.depth_z)
    if world.tissue.deflection_mm > 0.0:
        sigma = world.config.dent_sigma_mm
        z_wall_top = z_wall_top - world.tissue.deflection_mm * np.exp(
            -((s_cols - s_tip) ** 2) / (2.0 * sigma * sigma))
    top_cov = ridge_rows(z_wall_top)
    top_cols = in_band & ~gap_mask(world.tissue.rupture_xy)
    np.maximum(img, RIDGE_INTENSITY * top_cov * top_cols[None, :], out=img)

    # bottom wall: held static by the stabilizer
    z_wall_bot = np.full(n, vein.lumen_bottom_z)
    bot_cov = ridge_rows(z_wall_bot)
    bot_cols = in_band & ~gap_mask(world.tissue.rupture2_xy)
    np.maximum(img, RIDGE_INTENSITY * bot_cov * bot_cols[None, :], out=img)

    # needle cross-section blob + attenuation shadow beneath it
    u_tip = s_tip / scale
    v_tip = (z_top - tip.z) / scale
    _draw_disc(img, (u_tip, v_tip), BSCAN_BLOB_RADIUS_PX, TIP_INTENSITY)
    u_lo = max(0, int(math.floor(u_tip - BSCAN_BLOB_RADIUS_PX - 0.5)))
    u_hi = min(n, int(math.ceil(u_tip + BSCAN_BLOB_RADIUS_PX + 0.5)) + 1)
    v_lo = int(math.ceil(v_tip + BSCAN_BLOB_RADIUS_PX + 1.0))
    if v_lo < n and u_lo < u_hi:
        sub = img[max(0, v_lo):, u_lo:u_hi]
        np.copyto(sub, SHADOW_FLOOR + (sub - SHADOW_FLOOR) * SHADOW_GAIN)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return BScanFrame(pixels=pixels, scale_mm_per_px=scale, scanline=scanline,
                      z_top_mm=z_top, t=world.t, frame_id=world.tick)


# --- artifact corruption ----------------------------------------------------

@dataclass(frozen=True)
class ArtifactConfig:
    """Imaging corruption knobs; ranges are enforced at construction."""
    brightness_pct: float = 0.0      # [-15, +15]
    exposure_pct: float = 0.0        # [-10, +10]
    noise_frac: float = 0.0          # [0, 0.001] fraction of pixels -> salt
    hflip: bool = False
    occlusion: Optional[tuple[int, int, int, int]] = None  # (u, v, w, h) px
    occlusion_prob: float = 0.0      # per-frame chance of a random occlusion event
    occlusion_size_px: int = 50
    seed: int = 0

    def __post_init__(self):
        if not -15.0 <= self.brightness_pct <= 15.0:
            raise ScenarioInvalid(f"brightness_pct {self.brightness_pct} outside [-15, 15]")
        if not -10.0 <= self.exposure_pct <= 10.0:
            raise ScenarioInvalid(f"exposure_pct {self.exposure_pct} outside [-10, 10]")
        if not 0.0 <= self.noise_frac <= 0.001:
            raise ScenarioInvalid(f"noise_frac {self.noise_frac} outside [0, 0.001]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ScenarioInvalid(f"occlusion_prob {self.occlusion_prob} outside [0, 1]")

    @property
    def is_identity(self) -> bool:
        return (self.brightness_pct == 0.0 and self.exposure_pct == 0.0
                and self.noise_frac == 0.0 and not self.hflip
                and self.occlusion is None and self.occlusion_prob == 0.0)


def _occlude(img: np.ndarray, rect: tuple[int, int, int, int]) -> None:
    u, v, rw, rh = rect
    h, w = img.shape
    u0, v0 = max(0, u), max(0, v)
    u1, v1 = min(w, u + rw), min(h, v + rh)
    if u0 < u1 and v0 < v1:
        img[v0:v1, u0:u1] = int(BG_MEAN)


def apply_artifacts(frame, cfg: ArtifactConfig):
    """Corrupt a frame: brightness, then exposure (gamma-like), then salt
    noise, then optional flip/occlusion. Deterministic per (cfg.seed,
    frame_id); an all-zero config returns the frame unchanged."""
    if cfg.is_identity:
        return frame

    img = frame.pixels.astype(np.float64)
    if cfg.brightness_pct != 0.0:
        img = img * (1.0 + cfg.brightness_pct / 100.0)
    if cfg.exposure_pct != 0.0:
        gamma = 1.0 / (1.0 + cfg.exposure_pct / 100.0)
        img = 255.0 * np.power(np.clip(img, 0.0, 255.0) / 255.0, gamma)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(frame.frame_id,)))
    if cfg.noise_frac > 0.0:
        n_pix = img.size
        n_salt = int(n_pix * cfg.noise_frac)
        if n_salt > 0:
            idx = rng.choice(n_pix, size=n_salt, replace=False)
            img.flat[idx] = 255
    if cfg.hflip:
        img = img[:, ::-1].copy()
    if cfg.occlusion is not None:
        _occlude(img, cfg.occlusion)
    if cfg.occlusion_prob > 0.0 and rng.random() < cfg.occlusion_prob:
        h, w = img.shape
        sz = cfg.occlusion_size_px
        rect = (int(rng.integers(0, max(1, w - sz))), int(rng.integers(0, max(1, h - sz))), sz, sz)
        _occlude(img, rect)

    return _with_pixels(frame, img)


def _with_pixels(frame, pixels: np.ndarray):
    if isinstance(frame, MicroscopeFrame):
        return MicroscopeFrame(pixels=pixels, scale_mm_per_px=frame.scale_mm_per_px,
                               origin=frame.origin, t=frame.t, frame_id=frame.frame_id)
    return BScanFrame(pixels=pixels, scale_mm_per_px=frame.scale_mm_per_px,
                      scanline=frame.scanline, z_top_mm=frame.z_top_mm,
                      t=frame.t, frame_id=frame.frame_id)


# --- file dumps --------------------------------------------------------------

def write_pgm(pixels: np.ndarray, path) -> None:
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pixels.astype(np.uint8).tobytes())


def write_png(pixels: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)
