"""Synthetic planar worlds and spinning-LiDAR scans with ground truth."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyScan
from .geometry import Pose, rot_z, so3_exp
from .io import Frame, write_scan_bin, write_trajectory


@dataclass
class Plane:
    """Rectangle with center, unit normal, in-plane axis ``u`` and half extents ``(a, b)``."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_extents: tuple

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        if min(self.half_extents) <= 0:
            raise ConfigError("plane extents must be > 0")

    @property
    def v_axis(self):
        return np.cross(self.normal, self.u_axis)


def box_room(size=(10.0, 10.0, 3.0), origin=(-4.75, -4.75, -1.25), clip=(-3.5, 3.5)):
    """Floor, ceiling and four walls of an axis-aligned room.

    Horizontal panel extents are clipped to ``clip`` (in x and y), leaving open
    corners. With the defaults every face lies in its own 4 m grid cell, so no
    voxel ever mixes two faces and noiseless data has an exactly zero-cost
    optimum. ``clip=None`` keeps closed corners.
    """
    sx, sy, sz = size
    ox, oy, oz = origin
    lo_x, hi_x, lo_y, hi_y = ox, ox + sx, oy, oy + sy
    if clip is not None:
        lo_x, hi_x = max(lo_x, clip[0]), min(hi_x, clip[1])
        lo_y, hi_y = max(lo_y, clip[0]), min(hi_y, clip[1])
    cx, cy, cz = (lo_x + hi_x) / 2, (lo_y + hi_y) / 2, oz + sz / 2
    ax, ay = (hi_x - lo_x) / 2, (hi_y - lo_y) / 2
    ex, ey, ez = np.eye(3)
    return [
        Plane((cx, cy, oz), ez, ex, (ax, ay)),
        Plane((cx, cy, oz + sz), -ez, ex, (ax, ay)),
        Plane((ox, cy, cz), ex, ey, (ay, sz / 2)),
        Plane((ox + sx, cy, cz), -ex, ey, (ay, sz / 2)),
        Plane((cx, oy, cz), ey, ex, (ax, sz / 2)),
        Plane((cx, oy + sy, cz), -ey, ex, (ax, sz / 2)),
    ]


def ring_corridor(inner=7.75, outer=16.25, floor=-1.25, height=3.0, inner_clip=3.9,
                  outer_clip=15.5, margin=0.75):
    """Square corridor around a central block, with floor and ceiling strips.

    Walls sit at ``+-inner`` and ``+-outer``; floor and ceiling stop ``margin``
    short of them and the wall panels stop at ``+-inner_clip`` /
    ``+-outer_clip``. With the defaults no 4 m grid cell holds two faces that
    cannot be told apart by splitting. With a short sensor range each scan sees
    only a stretch of corridor, so a loop meets its start again only when it
    closes.
    """
    ex, ey, ez = np.eye(3)
    cz = floor + height / 2
    planes = []
    for sign in (1.0, -1.0):
        planes += [
            Plane((sign * inner, 0, cz), sign * ex, ey, (inner_clip, height / 2)),
            Plane((0, sign * inner, cz), sign * ey, ex, (inner_clip, height / 2)),
            Plane((sign * outer, 0, cz), -sign * ex, ey, (outer_clip, height / 2)),
            Plane((0, sign * outer, cz), -sign * ey, ex, (outer_clip, height / 2)),
        ]
    lo, hi = inner + margin, outer - margin
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    for z, n in ((floor, ez), (floor + height, -ez)):
        for sign in (1.0, -1.0):
            planes.append(Plane((sign * mid, 0, z), n, ex, (half, hi)))
            planes.append(Plane((0, sign * mid, z), n, ex, (lo, half)))
    return planes


@dataclass
class SensorSpec:
    azimuth_rays: int = 180
    elevation_rays: int = 16
    elevation_min_deg: float = -50.0
    elevation_max_deg: float = 50.0
    min_range: float = 0.3
    max_range: float = 40.0
    noise: float = 0.0

    def directions(self):
        az = np.linspace(0.0, 2 * np.pi, self.azimuth_rays, endpoint=False)
        el = np.radians(np.linspace(self.elevation_min_deg, self.elevation_max_deg,
                                    self.elevation_rays))
        A, E = np.meshgrid(az, el, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)],
                        axis=-1).reshape(-1, 3)


@dataclass
class TrajectorySpec:
    kind: str = "loop"           # loop | line | figure-eight
    frames: int = 125
    step: float = 0.15
    radius: float = 3.0
    center: tuple = (0.25, 0.25, 0.0)
    wobble: float = 1.0          # scale of the small height / roll / pitch oscillation


@dataclass
class PerturbationSpec:
    sigma_rot_deg: float = 0.0
    sigma_t: float = 0.0
    drift_rot_deg: float = 0.0   # per-frame random-walk std
    drift_t: float = 0.0


@dataclass
class SceneSpec:
    planes: list = field(default_factory=box_room)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    seed: int = 0


@dataclass
class SynthData:
    frames: list            # local points, poses = perturbed (the refinement input)
    ground_truth: list
    perturbed: list
    end_gap: float = 0.0

    def frames_at(self, poses):
        return [f.with_pose(p) for f, p in zip(self.frames, poses)]


def trajectory_poses(spec: TrajectorySpec):
    n = spec.frames
    c = np.asarray(spec.center, dtype=float)
    k = np.arange(n)
    s = spec.wobble
    if spec.kind == "loop":
        ang = k * spec.step / spec.radius
        pos = np.stack([c[0] + spec.radius * np.cos(ang), c[1] + spec.radius * np.sin(ang),
                        c[2] + 0.1 * s * np.sin(3 * ang)], axis=1)
        yaw = ang + np.pi / 2
    elif spec.kind == "figure-eight":
        ang = k * spec.step / spec.radius
        pos = np.stack([c[0] + spec.radius * np.sin(ang),
                        c[1] + spec.radius * np.sin(ang) * np.cos(ang),
                        c[2] + 0.1 * s * np.sin(2 * ang)], axis=1)
        vel = np.stack([np.cos(ang), np.cos(2 * ang)], axis=1)
        yaw = np.arctan2(vel[:, 1], vel[:, 0])
        ang = np.unwrap(yaw)
    elif spec.kind == "line":
        ang = k * spec.step
        pos = np.stack([c[0] + ang, np.full(n, c[1]), c[2] + 0.05 * s * np.sin(ang)], axis=1)
        yaw = np.zeros(n)
    else:
        raise ConfigError(f"unknown trajectory kind {spec.kind!r}")
    roll = 0.03 * s * np.sin(5 * ang)
    pitch = 0.03 * s * np.cos(4 * ang)
    poses = []
    for i in range(n):
        R = rot_z(yaw[i]) @ so3_exp(np.array([roll[i], pitch[i], 0.0]))
        poses.append(Pose(R, pos[i]))
    return poses


def cast_scan(pose: Pose, planes, sensor: SensorSpec, rng):
    """Nearest ray-plane intersections from ``pose``, as local points."""
    dirs = sensor.directions()
    dg = dirs @ pose.rotation.T
    o = pose.translation
    best = np.full(len(dirs), np.inf)
    for pl in planes:
        denom = dg @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = ((pl.center - o) @ pl.normal) / denom
        hit = o + dist[:, None] * dg
        rel = hit - pl.center
        inside = ((np.abs(rel @ pl.u_axis) <= pl.half_extents[0])
                  & (np.abs(rel @ pl.v_axis) <= pl.half_extents[1]))
        ok = (np.abs(denom) > 1e-9) & (dist > sensor.min_range) & (dist < sensor.max_range) & inside
        best = np.where(ok & (dist < best), dist, best)
    hit_mask = np.isfinite(best)
    pts = dirs[hit_mask] * best[hit_mask, None]
    if sensor.noise > 0:
        pts = pts + rng.normal(scale=sensor.noise, size=pts.shape)
    return pts


def perturb(ground_truth, spec: PerturbationSpec, rng):
    """Odometry-style drift (random walk on relative motions) plus white pose noise."""
    rot_sd = np.radians(spec.drift_rot_deg)
    drifted = [ground_truth[0]]
    for k in range(1, len(ground_truth)):
        step = ground_truth[k - 1].relative(ground_truth[k])
        noise = np.concatenate([rng.normal(scale=rot_sd, size=3),
                                rng.normal(scale=spec.drift_t, size=3)])
        drifted.append(drifted[-1].compose(step).compose(Pose.exp(noise)))
    white_rot = np.radians(spec.sigma_rot_deg)
    out = []
    for p in drifted:
        noise = np.concatenate([rng.normal(scale=white_rot, size=3),
                                rng.normal(scale=spec.sigma_t, size=3)])
        out.append(p.compose(Pose.exp(noise)))
    gap = float(np.linalg.norm(drifted[-1].translation - ground_truth[-1].translation))
    return out, gap


def generate(spec: SceneSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    gt = trajectory_poses(spec.trajectory)
    clouds = []
    for i, pose in enumerate(gt):
        pts = cast_scan(pose, spec.planes, spec.sensor, rng)
        if len(pts) == 0:
            raise EmptyScan(f"synthetic pose {i} sees no plane")
        clouds.append(pts)
    perturbed, gap = perturb(gt, spec.perturbation, rng)
    frames = [Frame(i, pts, p) for i, (pts, p) in enumerate(zip(clouds, perturbed))]
    return SynthData(frames, gt, perturbed, gap)


def save(data: SynthData, out_dir):
    """Write ``scans/*.bin``, ``poses.txt`` (perturbed) and ``ground_truth.txt``."""
    scan_dir = os.path.join(out_dir, "scans")
    os.makedirs(scan_dir, exist_ok=True)
    for f in data.frames:
        write_scan_bin(f.points, os.path.join(scan_dir, f"{f.index:06d}.bin"))
    write_trajectory(data.perturbed, os.path.join(out_dir, "poses.txt"))
    write_trajectory(data.ground_truth, os.path.join(out_dir, "ground_truth.txt"))


def _floats(val, n=None):
    vals = [float(x) for x in val.replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {val!r}")
    return vals


def parse_scene_spec(text: str) -> SceneSpec:
    """Scene description from ``key = value`` lines.

    ``plane = cx cy cz nx ny nz ux uy uz a b`` may repeat; when any plane is
    given, ``scene`` defaults to an empty world instead of the box room.
    """
    spec = SceneSpec()
    planes, room_size, room_origin, scene = [], (10.0, 10.0, 3.0), (-4.75, -4.75, -1.25), None
    tr, se, pe = spec.trajectory, spec.sensor, spec.perturbation
    setters = {
        "trajectory": lambda v: setattr(tr, "kind", v),
        "frames": lambda v: setattr(tr, "frames", int(v)),
        "step": lambda v: setattr(tr, "step", float(v)),
        "radius": lambda v: setattr(tr, "radius", float(v)),
        "center": lambda v: setattr(tr, "center", tuple(_floats(v, 3))),
        "wobble": lambda v: setattr(tr, "wobble", float(v)),
        "azimuth_rays": lambda v: setattr(se, "azimuth_rays", int(v)),
        "elevation_rays": lambda v: setattr(se, "elevation_rays", int(v)),
        "elevation_min_deg": lambda v: setattr(se, "elevation_min_deg", float(v)),
        "elevation_max_deg": lambda v: setattr(se, "elevation_max_deg", float(v)),
        "min_range": lambda v: setattr(se, "min_range", float(v)),
        "max_range": lambda v: setattr(se, "max_range", float(v)),
        "noise": lambda v: setattr(se, "noise", float(v)),
        "sigma_rot_deg": lambda v: setattr(pe, "sigma_rot_deg", float(v)),
        "sigma_t": lambda v: setattr(pe, "sigma_t", float(v)),
        "drift_rot_deg": lambda v: setattr(pe, "drift_rot_deg", float(v)),
        "drift_t": lambda v: setattr(pe, "drift_t", float(v)),
        "seed": lambda v: setattr(spec, "seed", int(v)),
    }
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key == "plane":
                v = _floats(val, 11)
                planes.append(Plane(v[0:3], v[3:6], v[6:9], (v[9], v[10])))
            elif key == "scene":
                scene = val
            elif key == "room_size":
                room_size = tuple(_floats(val, 3))
            elif key == "room_origin":
                room_origin = tuple(_floats(val, 3))
            elif key in setters:
                setters[key](val)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if scene is None:
        scene = "none" if planes else "box_room"
    if scene == "box_room":
        planes = box_room(room_size, room_origin) + planes
    elif scene == "ring_corridor":
        planes = ring_corridor() + planes
    elif scene != "none":
        raise ConfigError(f"unknown scene {scene!r}")
    if not planes:
        raise ConfigError("scene has no planes")
    spec.planes = planes
    return spec
