"""Ground-truth world model: needle, vein, and their interaction over time.

All lengths are millimeters in the robot task frame. The XOY plane coincides
with the top-down image plane; z increases upward, so insertion moves in -z.
States are immutable values: :func:`step` returns a new state.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

from .errors import AlreadyInjected, CommandOutOfBounds, WorkspaceExceeded

__all__ = [
    "Pose3", "NeedleModel", "VeinModel", "Phase", "TissuePhase", "WorldConfig",
    "WorldState", "Hold", "PlanarVelocity", "AxialInsertion", "ZStep",
    "MotionCommand", "VerdictGroundTruth", "VEIN_PRESETS", "vein_preset",
    "step", "evaluate_tissue_state", "inject_air",
]


@dataclass(frozen=True)
class Pose3:
    """Point in the task frame (mm)."""
    x: float
    y: float
    z: float

    def distance_to(self, other: "Pose3") -> float:
        return math.dist((self.x, self.y, self.z), (other.x, other.y, other.z))

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite pose {self}")


@dataclass(frozen=True)
class NeedleModel:
    """Rigid needle with a fixed oblique insertion axis.

    The axis makes ``insertion_angle_deg`` with the vein plane and points
    along ``azimuth_deg`` in XOY; positive axial speed descends.
    """
    tip: Pose3
    insertion_angle_deg: float = 70.0
    azimuth_deg: float = 0.0
    tip_diameter_um: float = 100.0
    shaft_length_mm: float = 8.0

    def __post_init__(self):
        if not 0.0 < self.insertion_angle_deg < 90.0:
            raise ValueError(f"insertion angle {self.insertion_angle_deg} outside (0, 90)")
        if self.tip_diameter_um <= 0:
            raise ValueError("tip diameter must be positive")

    @property
    def insertion_axis(self) -> tuple[float, float, float]:
        """Unit vector of positive (descending) axial motion."""
        ang = math.radians(self.insertion_angle_deg)
        az = math.radians(self.azimuth_deg)
        return (math.cos(ang) * math.cos(az), math.cos(ang) * math.sin(az), -math.sin(ang))

    def entry_point_xy(self) -> tuple[float, float]:
        """XOY projection of the shaft's far (upper) end."""
        ux, uy, _ = self.insertion_axis
        return (self.tip.x - self.shaft_length_mm * ux, self.tip.y - self.shaft_length_mm * uy)


@dataclass(frozen=True)
class VeinModel:
    """Straight vein along an XOY line at fixed depth.

    The undeformed top wall surface sits at z = ``depth_z``; the lumen spans
    ``diameter_mm`` below it. Laterally the vein occupies a band of width
    ``diameter_mm`` centered on the axis.
    """
    axis_point: tuple[float, float]
    axis_dir: tuple[float, float]
    depth_z: float
    diameter_mm: float
    wall_thickness_mm: float = 0.10
    max_deflection_mm: float = 0.15
    puncture_velocity_mm_s: float = 2.0

    def __post_init__(self):
        if self.diameter_mm <= 0 or self.wall_thickness_mm <= 0:
            raise ValueError("vein dimensions must be positive")
        if self.max_deflection_mm < 0 or self.puncture_velocity_mm_s <= 0:
            raise ValueError("bad vein elasticity parameters")
        n = math.hypot(*self.axis_dir)
        if not math.isclose(n, 1.0, abs_tol=1e-9):
            object.__setattr__(self, "axis_dir", (self.axis_dir[0] / n, self.axis_dir[1] / n))

    def lateral_distance(self, x: float, y: float) -> float:
        """Perpendicular XOY distance from (x, y) to the vein axis line."""
        px, py = x - self.axis_point[0], y - self.axis_point[1]
        return abs(px * self.axis_dir[1] - py * self.axis_dir[0])

    def in_band(self, x: float, y: float) -> bool:
        return self.lateral_distance(x, y) <= self.diameter_mm / 2.0

    @property
    def lumen_bottom_z(self) -> float:
        return self.depth_z - self.diameter_mm


VEIN_PRESETS = {
    # Chorioallantoic surrogate vessel vs. the thin retinal-scale target.
    "embryo": dict(diameter_mm=1.27, wall_thickness_mm=0.10,
                   max_deflection_mm=0.15, puncture_velocity_mm_s=2.0),
    "target": dict(diameter_mm=0.35, wall_thickness_mm=0.06,
                   max_deflection_mm=0.08, puncture_velocity_mm_s=2.0),
}


def vein_preset(name: str, axis_point=(1.5, 0.0), axis_dir=(0.0, 1.0), depth_z=2.0, **overrides) -> VeinModel:
    if name not in VEIN_PRESETS:
        raise ValueError(f"unknown vein preset {name!r} (have {sorted(VEIN_PRESETS)})")
    params = dict(VEIN_PRESETS[name])
    params.update(overrides)
    return VeinModel(axis_point=tuple(axis_point), axis_dir=tuple(axis_dir), depth_z=depth_z, **params)


class Phase(IntEnum):
    FREE = 0
    CONTACT = 1
    DEFORMED = 2
    PUNCTURED = 3
    DOUBLE_PUNCTURED = 4


@dataclass(frozen=True)
class TissuePhase:
    """Interaction phase plus the kinematic history it depends on.

    ``contact_pose`` is the tip pose at first wall contact of the current
    engagement; ``rupture_xy``/``rupture2_xy`` mark permanent wall holes.
    Ruptured walls stay ruptured: PUNCTURED and DOUBLE_PUNCTURED are
    absorbing phases.
    """
    phase: Phase = Phase.FREE
    deflection_mm: float = 0.0
    depth_beyond_contact_mm: float = 0.0
    contact_pose: Optional[Pose3] = None
    rupture_xy: Optional[tuple[float, float]] = None
    rupture2_xy: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class WorldConfig:
    """Physics constants and safety limits."""
    v_max_mm_s: float = 5.0
    z_step_cap_mm: float = 0.1
    workspace_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    workspace_half_extent_mm: float = 10.0
    contact_tol_mm: float = 0.005      # below one depth-scan pixel (35.7 um)
    dent_sigma_mm: float = 0.25        # lateral extent of the elastic dent
    rupture_gap_mm: float = 0.30       # torn-wall gap width, wider than the tip


@dataclass(frozen=True)
class Hold:
    pass


@dataclass(frozen=True)
class PlanarVelocity:
    vx: float
    vy: float


@dataclass(frozen=True)
class AxialInsertion:
    """Speed along the insertion axis; positive descends, negative retracts."""
    speed: float


@dataclass(frozen=True)
class ZStep:
    dz: float


MotionCommand = Hold | PlanarVelocity | AxialInsertion | ZStep


@dataclass(frozen=True)
class WorldState:
    """Single source of truth for one trial."""
    t: float
    tick: int
    needle: NeedleModel
    vein: VeinModel
    tissue: TissuePhase
    config: WorldConfig = field(default_factory=WorldConfig)
    air_injected: bool = False
    rng_seed: int = 0
    tip_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def tip_speed_mm_s(self) -> float:
        return math.hypot(*self.tip_velocity)

    # -- serialization (exact float round trip via repr-based json) --------

    def to_dict(self) -> dict:
        n, v, ts = self.needle, self.vein, self.tissue
        return {
            "t": self.t,
            "tick": self.tick,
            "needle": {
                "tip": [n.tip.x, n.tip.y, n.tip.z],
                "insertion_angle_deg": n.insertion_angle_deg,
                "azimuth_deg": n.azimuth_deg,
                "tip_diameter_um": n.tip_diameter_um,
                "shaft_length_mm": n.shaft_length_mm,
            },
            "vein": {
                "axis_point": list(v.axis_point),
                "axis_dir": list(v.axis_dir),
                "depth_z": v.depth_z,
                "diameter_mm": v.diameter_mm,
                "wall_thickness_mm": v.wall_thickness_mm,
                "max_deflection_mm": v.max_deflection_mm,
                "puncture_velocity_mm_s": v.puncture_velocity_mm_s,
            },
            "tissue": {
                "phase": ts.phase.name,
                "deflection_mm": ts.deflection_mm,
                "depth_beyond_contact_mm": ts.depth_beyond_contact_mm,
                "contact_pose": None if ts.contact_pose is None
                                else [ts.contact_pose.x, ts.contact_pose.y, ts.contact_pose.z],
                "rupture_xy": None if ts.rupture_xy is None else list(ts.rupture_xy),
                "rupture2_xy": None if ts.rupture2_xy is None else list(ts.rupture2_xy),
            },
            "config": {
                "v_max_mm_s": self.config.v_max_mm_s,
                "z_step_cap_mm": self.config.z_step_cap_mm,
                "workspace_center": list(self.config.workspace_center),
                "workspace_half_extent_mm": self.config.workspace_half_extent_mm,
                "contact_tol_mm": self.config.contact_tol_mm,
                "dent_sigma_mm": self.config.dent_sigma_mm,
                "rupture_gap_mm": self.config.rupture_gap_mm,
            },
            "air_injected": self.air_injected,
            "rng_seed": self.rng_seed,
            "tip_velocity": list(self.tip_velocity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        nd, vd, td, cd = d["needle"], d["vein"], d["tissue"], d["config"]
        return cls(
            t=d["t"],
            tick=d["tick"],
            needle=NeedleModel(
                tip=Pose3(*nd["tip"]),
                insertion_angle_deg=nd["insertion_angle_deg"],
                azimuth_deg=nd["azimuth_deg"],
                tip_diameter_um=nd["tip_diameter_um"],
                shaft_length_mm=nd["shaft_length_mm"],
            ),
            vein=VeinModel(
                axis_point=tuple(vd["axis_point"]),
                axis_dir=tuple(vd["axis_dir"]),
                depth_z=vd["depth_z"],
                diameter_mm=vd["diameter_mm"],
                wall_thickness_mm=vd["wall_thickness_mm"],
                max_deflection_mm=vd["max_deflection_mm"],
                puncture_velocity_mm_s=vd["puncture_velocity_mm_s"],
            ),
            tissue=TissuePhase(
                phase=Phase[td["phase"]],
                deflection_mm=td["deflection_mm"],
                depth_beyond_contact_mm=td["depth_beyond_contact_mm"],
                contact_pose=None if td["contact_pose"] is None else Pose3(*td["contact_pose"]),
                rupture_xy=None if td["rupture_xy"] is None else tuple(td["rupture_xy"]),
                rupture2_xy=None if td["rupture2_xy"] is None else tuple(td["rupture2_xy"]),
            ),
            config=WorldConfig(
                v_max_mm_s=cd["v_max_mm_s"],
                z_step_cap_mm=cd["z_step_cap_mm"],
                workspace_center=tuple(cd["workspace_center"]),
                workspace_half_extent_mm=cd["workspace_half_extent_mm"],
                contact_tol_mm=cd["contact_tol_mm"],
                dent_sigma_mm=cd["dent_sigma_mm"],
                rupture_gap_mm=cd["rupture_gap_mm"],
            ),
            air_injected=d["air_injected"],
            rng_seed=d["rng_seed"],
            tip_velocity=tuple(d["tip_velocity"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "WorldState":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class VerdictGroundTruth:
    """End-of-trial air-injection outcome."""
    success: bool
    reason: str  # Success | TipNotInLumen | NoPuncture | DoublePuncture


def evaluate_tissue_state(world: WorldState) -> TissuePhase:
    """Classify the needle-vein interaction for the current tip pose.

    Pure in (geometry, history): consumes the previous :class:`TissuePhase`
    carried in ``world.tissue`` plus the tip velocity recorded by ``step``.
    Total: never raises.
    """
    vein = world.vein
    tip = world.needle.tip
    prev = world.tissue
    eps = world.config.contact_tol_mm

    in_band = vein.in_band(tip.x, tip.y)
    penetration = vein.depth_z - tip.z if in_band else -math.inf

    # Ruptured walls stay ruptured regardless of later motion.
    if prev.phase == Phase.DOUBLE_PUNCTURED or (
            prev.phase == Phase.PUNCTURED and in_band and tip.z <= vein.lumen_bottom_z):
        rupture2 = prev.rupture2_xy or (tip.x, tip.y)
        return replace(prev, phase=Phase.DOUBLE_PUNCTURED, deflection_mm=0.0,
                       depth_beyond_contact_mm=_depth_beyond(prev, tip),
                       rupture2_xy=rupture2)
    if prev.phase == Phase.PUNCTURED:
        return replace(prev, deflection_mm=0.0, depth_beyond_contact_mm=_depth_beyond(prev, tip))

    if penetration < -eps or not in_band:
        # Clear of the wall: elastic recovery, contact history resets.
        return TissuePhase()

    contact_pose = prev.contact_pose if prev.contact_pose is not None else tip

    if penetration <= 0.0:
        return TissuePhase(phase=Phase.CONTACT, deflection_mm=0.0,
                           depth_beyond_contact_mm=_depth_beyond_pose(contact_pose, tip),
                           contact_pose=contact_pose)

    vz = world.tip_velocity[2]
    descending = vz < 0.0
    if (penetration > vein.max_deflection_mm
            and world.tip_speed_mm_s >= vein.puncture_velocity_mm_s
            and descending):
        return TissuePhase(phase=Phase.PUNCTURED, deflection_mm=0.0,
                           depth_beyond_contact_mm=_depth_beyond_pose(contact_pose, tip),
                           contact_pose=contact_pose, rupture_xy=(tip.x, tip.y))

    deflection = min(penetration, vein.max_deflection_mm)
    return TissuePhase(phase=Phase.DEFORMED, deflection_mm=deflection,
                       depth_beyond_contact_mm=_depth_beyond_pose(contact_pose, tip),
                       contact_pose=contact_pose)


def _depth_beyond_pose(contact_pose: Pose3, tip: Pose3) -> float:
    return contact_pose.distance_to(tip)


def _depth_beyond(prev: TissuePhase, tip: Pose3) -> float:
    if prev.contact_pose is None:
        return prev.depth_beyond_contact_mm
    return _depth_beyond_pose(prev.contact_pose, tip)


def _validate_command(cmd: MotionCommand, cfg: WorldConfig) -> None:
    if isinstance(cmd, PlanarVelocity):
        if math.hypot(cmd.vx, cmd.vy) > cfg.v_max_mm_s * (1 + 1e-12):
            raise CommandOutOfBounds(f"planar speed {math.hypot(cmd.vx, cmd.vy):.3f} > v_max {cfg.v_max_mm_s}")
    elif isinstance(cmd, AxialInsertion):
        if abs(cmd.speed) > cfg.v_max_mm_s * (1 + 1e-12):
            raise CommandOutOfBounds(f"axial speed {cmd.speed:.3f} > v_max {cfg.v_max_mm_s}")
    elif isinstance(cmd, ZStep):
        if abs(cmd.dz) > cfg.z_step_cap_mm * (1 + 1e-12):
            raise CommandOutOfBounds(f"|dz| {abs(cmd.dz):.4f} > step cap {cfg.z_step_cap_mm}")
    elif not isinstance(cmd, Hold):
        raise CommandOutOfBounds(f"unknown command {cmd!r}")


def step(world: WorldState, cmd: MotionCommand, dt: float) -> WorldState:
    """Advance the world one control tick under a motion command.

    Explicit Euler, single substep. Deterministic for fixed inputs.

    Raises:
        CommandOutOfBounds: speed/step caps exceeded.
        WorkspaceExceeded: the commanded pose leaves the workspace box.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _validate_command(cmd, world.config)

    tip = world.needle.tip
    if isinstance(cmd, Hold):
        dx = dy = dz = 0.0
    elif isinstance(cmd, PlanarVelocity):
        dx, dy, dz = cmd.vx * dt, cmd.vy * dt, 0.0
    elif isinstance(cmd, AxialInsertion):
        ux, uy, uz = world.needle.insertion_axis
        dx, dy, dz = cmd.speed * dt * ux, cmd.speed * dt * uy, cmd.speed * dt * uz
    else:  # ZStep
        dx, dy, dz = 0.0, 0.0, cmd.dz

    new_tip = Pose3(tip.x + dx, tip.y + dy, tip.z + dz)
    cx, cy, cz = world.config.workspace_center
    h = world.config.workspace_half_extent_mm
    if not (abs(new_tip.x - cx) <= h and abs(new_tip.y - cy) <= h and abs(new_tip.z - cz) <= h):
        raise WorkspaceExceeded(f"tip {new_tip} outside +/-{h} mm box around {world.config.workspace_center}")

    moved = replace(
        world,
        t=world.t + dt,
        tick=world.tick + 1,
        needle=replace(world.needle, tip=new_tip),
        tip_velocity=(dx / dt, dy / dt, dz / dt),
    )
    return replace(moved, tissue=evaluate_tissue_state(moved))


def inject_air(world: WorldState) -> tuple[WorldState, VerdictGroundTruth]:
    """Score the trial: air injected through the needle inflates the vein
    only when exactly one wall is breached and the tip sits in the lumen.

    Raises:
        AlreadyInjected: called twice on the same trial state.
    """
    if world.air_injected:
        raise AlreadyInjected("air already injected for this trial")
    marked = replace(world, air_injected=True)

    phase = world.tissue.phase
    if phase == Phase.DOUBLE_PUNCTURED:
        return marked, VerdictGroundTruth(False, "DoublePuncture")
    if phase != Phase.PUNCTURED:
        return marked, VerdictGroundTruth(False, "NoPuncture")
    tip = world.needle.tip
    vein = world.vein
    inside = (vein.in_band(tip.x, tip.y)
              and vein.lumen_bottom_z < tip.z < vein.depth_z)
    if not inside:
        return marked, VerdictGroundTruth(False, "TipNotInLumen")
    return marked, VerdictGroundTruth(True, "Success")
