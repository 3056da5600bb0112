"""Synthetic solid-state LiDAR: raycast scenes of boxes and rectangles.

Rays sit on a regular (alpha, theta) lattice matching
:mod:`solidslam.features`: the sensor-frame direction of a ray is
``(1, tan(alpha), tan(theta))`` normalised. Range noise is Gaussian and
seeded per frame, so a dataset is reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import se3
from .config import Config, ExtractionParams, save_config
from .dataio import GROUNDTRUTH_NAME, SENSOR_NAME, Trajectory, frame_name, write_pointcloud, write_trajectory
from .exceptions import InsufficientOverlap, ValidationError
from .features import SensorSpec
from .se3 import Pose

AXES = "xyz"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= p <= hi``."""

    id: str
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ValidationError(f"box {self.id!r} needs lo < hi on every axis", "scene")
        object.__setattr__(self, "lo", tuple(lo.tolist()))
        object.__setattr__(self, "hi", tuple(hi.tolist()))

    @property
    def size(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)

    def intersect(self, o, D):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / D
            t2 = (hi - o) / D
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        return np.where(hit, t_near, np.inf)

    def distance_to_surface(self, P):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        outside = np.maximum(np.maximum(lo - P, P - hi), 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        d_in = np.minimum(P - lo, hi - P).min(axis=1)
        return np.where((outside > 0).any(axis=1), d_out, np.abs(d_in))

    def to_dict(self):
        return {"type": "box", "id": self.id, "min": list(self.lo), "max": list(self.hi)}


@dataclass(frozen=True)
class Rect:
    """Finite plane ``p[axis] == offset`` bounded on the two other axes."""

    id: str
    axis: int
    offset: float
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValidationError(f"plane {self.id!r}: axis must be 0, 1 or 2", "scene")
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (2,) or hi.shape != (2,) or not np.all(hi > lo):
            raise ValidationError(f"plane {self.id!r} needs positive extent", "scene")
        object.__setattr__(self, "lo", tuple(lo.tolist()))
        object.__setattr__(self, "hi", tuple(hi.tolist()))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def others(self):
        return [a for a in range(3) if a != self.axis]

    def intersect(self, o, D):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o[self.axis]) / D[:, self.axis]
        t = np.where(np.isfinite(t) & (t > 0), t, np.inf)
        a, b = self.others
        pa = o[a] + t * D[:, a]
        pb = o[b] + t * D[:, b]
        inside = (pa >= self.lo[0]) & (pa <= self.hi[0]) & (pb >= self.lo[1]) & (pb <= self.hi[1])
        return np.where(inside, t, np.inf)

    def distance_to_surface(self, P):
        a, b = self.others
        da = np.maximum(np.maximum(self.lo[0] - P[:, a], P[:, a] - self.hi[0]), 0)
        db = np.maximum(np.maximum(self.lo[1] - P[:, b], P[:, b] - self.hi[1]), 0)
        return np.sqrt((P[:, self.axis] - self.offset) ** 2 + da**2 + db**2)

    def to_dict(self):
        return {
            "type": "plane",
            "id": self.id,
            "axis": AXES[self.axis],
            "offset": self.offset,
            "min": list(self.lo),
            "max": list(self.hi),
        }


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        ids = [p.id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValidationError("primitive ids must be unique", "scene")

    @property
    def boxes(self):
        return [p for p in self.primitives if isinstance(p, Box)]

    def __getitem__(self, key):
        for p in self.primitives:
            if p.id == key:
                return p
        raise KeyError(key)

    def distance_to_surface(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        if not self.primitives:
            return np.full(len(P), np.inf)
        return np.min([p.distance_to_surface(P) for p in self.primitives], axis=0)

    def transformed(self, T: Pose) -> "Scene":
        """Scene moved by ``T``; the rotation must map axes onto axes."""
        R = np.round(T.rotation)
        if np.abs(R - T.rotation).max() > 1e-9 or not np.allclose(np.abs(R).sum(axis=0), 1):
            raise ValidationError("only axis-permuting rotations keep primitives axis-aligned", "scene")
        out = []
        for p in self.primitives:
            if isinstance(p, Box):
                a = R @ np.asarray(p.lo) + T.translation
                b = R @ np.asarray(p.hi) + T.translation
                out.append(Box(p.id, np.minimum(a, b), np.maximum(a, b)))
            else:
                corners = []
                for u in (p.lo[0], p.hi[0]):
                    for v in (p.lo[1], p.hi[1]):
                        c = np.zeros(3)
                        c[p.axis] = p.offset
                        c[p.others[0]], c[p.others[1]] = u, v
                        corners.append(R @ c + T.translation)
                corners = np.array(corners)
                axis = int(np.argmax(np.abs(R[:, p.axis])))
                others = [a for a in range(3) if a != axis]
                out.append(
                    Rect(p.id, axis, corners[0, axis], corners[:, others].min(axis=0), corners[:, others].max(axis=0))
                )
        return Scene(tuple(out))

    def to_dict(self):
        return {"primitives": [p.to_dict() for p in self.primitives]}


def scene_from_dict(data) -> Scene:
    prims = []
    try:
        for item in data["primitives"]:
            kind = item["type"]
            if kind == "box":
                prims.append(Box(str(item["id"]), item["min"], item["max"]))
            elif kind == "plane":
                axis = item["axis"]
                axis = AXES.index(axis) if isinstance(axis, str) else int(axis)
                prims.append(Rect(str(item["id"]), axis, item["offset"], item["min"], item["max"]))
            else:
                raise ValidationError(f"unknown primitive type {kind!r}", "scene")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed scene: {exc!r}", "scene") from None
    return Scene(tuple(prims))


def load_scene(path) -> Scene:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read scene: {exc}", "scene") from None
    return scene_from_dict(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


ROOM_SIZE = (4.0, 4.0, 2.5)
BOX_A = ("machine_a", (1.15, 1.85, 1.2))
BOX_B = ("machine_b", (1.16, 1.95, 1.2))


def room_scene() -> Scene:
    """4 x 4 x 2.5 m room (floor at z = 0, centred on x = y = 0) with two boxes."""
    sx, sy, sz = ROOM_SIZE
    hx, hy = sx / 2, sy / 2
    prims = [
        Rect("floor", 2, 0.0, (-hx, -hy), (hx, hy)),
        Rect("ceiling", 2, sz, (-hx, -hy), (hx, hy)),
        Rect("wall_x_neg", 0, -hx, (-hy, 0.0), (hy, sz)),
        Rect("wall_x_pos", 0, hx, (-hy, 0.0), (hy, sz)),
        Rect("wall_y_neg", 1, -hy, (-hx, 0.0), (hx, sz)),
        Rect("wall_y_pos", 1, hy, (-hx, 0.0), (hx, sz)),
    ]
    (name_a, (ax, ay, az)), (name_b, (bx, by, bz)) = BOX_A, BOX_B
    a_lo = np.array([-1.53, -0.02 - ay / 2, 0.0])
    b_lo = np.array([0.41, 0.03 - by / 2, 0.0])
    prims.append(Box(name_a, a_lo, a_lo + [ax, ay, az]))
    prims.append(Box(name_b, b_lo, b_lo + [bx, by, bz]))
    return Scene(tuple(prims))


@dataclass(frozen=True)
class ScanSpec:
    """Ray lattice, range noise and seed for the simulator.

    ``sensor`` supplies the FoV and range limits; the lattice spacing is the
    FoV span divided by the ray count.
    """

    sensor: SensorSpec = field(default_factory=lambda: sim_sensor(160, 126))
    rays_vertical: int = 160
    rays_horizontal: int = 126
    noise_sigma: float = 0.014
    seed: int = 0

    def __post_init__(self):
        if self.rays_vertical < 2 or self.rays_horizontal < 2:
            raise ValidationError("need at least 2 rays per axis", "rays")
        if not self.noise_sigma >= 0:
            raise ValidationError("must be >= 0", "noise_sigma")

    def alphas(self) -> np.ndarray:
        return _lattice(self.sensor.alpha_min, self.sensor.alpha_max, self.rays_vertical)

    def thetas(self) -> np.ndarray:
        return _lattice(self.sensor.theta_min, self.sensor.theta_max, self.rays_horizontal)

    def directions(self) -> np.ndarray:
        """Unit sensor-frame ray directions, alpha-major order."""
        A, Th = np.meshgrid(self.alphas(), self.thetas(), indexing="ij")
        D = np.stack([np.ones_like(A), np.tan(A), np.tan(Th)], axis=-1).reshape(-1, 3)
        return D / np.linalg.norm(D, axis=1, keepdims=True)

    def matched_sensor(self) -> SensorSpec:
        s = self.sensor
        return SensorSpec(
            s.alpha_min, s.alpha_max, s.theta_min, s.theta_max,
            (s.alpha_max - s.alpha_min) / self.rays_vertical,
            (s.theta_max - s.theta_min) / self.rays_horizontal,
            s.range_min, s.range_max,
        )


def _lattice(lo, hi, n):
    # cell-centred; exactly symmetric about the FoV centre
    res = (hi - lo) / n
    return 0.5 * (lo + hi) + (np.arange(n) - (n - 1) / 2) * res


def sim_sensor(rays_vertical: int, rays_horizontal: int, base: SensorSpec | None = None) -> SensorSpec:
    """Copy of ``base`` whose resolution matches a lattice of the given size."""
    s = base or SensorSpec()
    return SensorSpec(
        s.alpha_min, s.alpha_max, s.theta_min, s.theta_max,
        (s.alpha_max - s.alpha_min) / rays_vertical,
        (s.theta_max - s.theta_min) / rays_horizontal,
        s.range_min, s.range_max,
    )


def raycast_ranges(scene: Scene, pose: Pose, directions) -> np.ndarray:
    """Noise-free range along each sensor-frame unit direction (inf on a miss)."""
    D = np.asarray(directions, dtype=float) @ pose.rotation.T
    o = pose.translation
    best = np.full(len(D), np.inf)
    for prim in scene.primitives:
        np.minimum(best, prim.intersect(o, D), out=best)
    return best


def raycast_scan(scene: Scene, pose: Pose, spec: ScanSpec | None = None, frame: int = 0) -> np.ndarray:
    """Sensor-frame point cloud seen from ``pose``; misses and out-of-range returns are dropped."""
    spec = spec or ScanSpec()
    D = spec.directions()
    r = raycast_ranges(scene, pose, D)
    hit = np.isfinite(r)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, frame])
        r = r + rng.normal(0.0, spec.noise_sigma, size=r.shape)
    keep = hit & (r >= spec.sensor.range_min) & (r <= spec.sensor.range_max)
    return D[keep] * r[keep, None]


def sample_trajectory(waypoints: Trajectory, rate: float) -> Trajectory:
    """Resample ``waypoints`` at ``rate`` Hz (linear translation, slerp rotation)."""
    if len(waypoints) == 0:
        raise ValidationError("no waypoints", "trajectory")
    if not rate > 0:
        raise ValidationError("must be > 0", "rate")
    t0, t1 = waypoints.timestamps[0], waypoints.timestamps[-1]
    count = int(math.floor((t1 - t0) * rate + 1e-6)) + 1
    times = t0 + np.arange(count) / rate
    poses = []
    wt = waypoints.timestamps
    for t in times:
        k = int(np.searchsorted(wt, t, side="right")) - 1
        k = min(max(k, 0), len(wt) - 1)
        if k == len(wt) - 1 or abs(t - wt[k]) < 1e-12:
            poses.append(waypoints.poses[k])
            continue
        s = (t - wt[k]) / (wt[k + 1] - wt[k])
        poses.append(se3.interpolate(waypoints.poses[k], waypoints.poses[k + 1], s))
    return Trajectory(times, poses)


def simulate(scene: Scene, waypoints: Trajectory, rate: float = 30.0, spec: ScanSpec | None = None):
    """In-memory sequence: list of (cloud, timestamp) and the ground-truth trajectory."""
    spec = spec or ScanSpec()
    gt = sample_trajectory(waypoints, rate)
    frames = [(raycast_scan(scene, T, spec, k), t) for k, (t, T) in enumerate(gt)]
    return frames, gt


def dataset_config(spec: ScanSpec) -> Config:
    """Config matching the simulated sensor; smoothness window sized to the grid."""
    return Config(sensor=spec.matched_sensor(), extraction=ExtractionParams())


def generate_sequence(
    scene: Scene,
    waypoints: Trajectory,
    rate: float,
    spec: ScanSpec | None,
    out_dir,
) -> Path:
    """Write one ASCII frame per sampled pose plus ``groundtruth.txt`` and ``sensor.ini``."""
    spec = spec or ScanSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = sample_trajectory(waypoints, rate)
    width = max(6, len(str(len(gt))))
    for k, (t, T) in enumerate(gt):
        write_pointcloud(out / frame_name(k, width), raycast_scan(scene, T, spec, k), t)
    write_trajectory(gt, out / GROUNDTRUTH_NAME)
    save_config(dataset_config(spec), out / SENSOR_NAME)
    return out


# -- reference trajectories ----------------------------------------------------


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Sensor pose at ``position`` with its x axis pointing at ``target``, z roughly up."""
    p = np.asarray(position, float)
    x = np.asarray(target, float) - p
    x /= np.linalg.norm(x)
    y = np.cross(up, x)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return Pose(np.column_stack([x, y, z]), p)


def loop_trajectory(duration: float = 10.0, rate: float = 30.0) -> Trajectory:
    """Closed orbit above the room looking down at its centre.

    Sampled at ``rate`` over ``[0, duration)``; the next sample would repeat
    the first pose.
    """
    n = int(round(duration * rate))
    times = np.arange(n) / rate
    poses = []
    for t in times:
        phase = 2 * np.pi * t / duration
        pos = np.array([1.0 * np.cos(phase), 1.0 * np.sin(phase), 2.0 + 0.1 * np.sin(2 * phase)])
        target = np.array([0.25 * np.cos(phase + np.pi), 0.25 * np.sin(phase + np.pi), 0.6])
        poses.append(look_at(pos, target))
    return Trajectory(times, poses)


def perimeter_trajectory(
    duration: float = 10.0,
    rate: float = 30.0,
    half_size: float = 1.72,
    height: float = 2.2,
    tilt_deg: float = 45.0,
    exponent: float = 4.0,
) -> Trajectory:
    """Survey lap close to the walls, tilted down and inward.

    The path is a superellipse ``|x|^e + |y|^e = half_size^e`` so it hugs a
    square room; from there the sensor sees the wall-facing sides of objects
    that a central orbit never observes.
    """
    n = int(round(duration * rate))
    times = np.arange(n) / rate
    offset = height * math.tan(math.radians(tilt_deg))
    poses = []
    for t in times:
        phase = 2 * np.pi * t / duration
        c, s = math.cos(phase), math.sin(phase)
        r = half_size / (abs(c) ** exponent + abs(s) ** exponent) ** (1 / exponent)
        pos = np.array([r * c, r * s, height])
        poses.append(look_at(pos, (pos[0] - offset * c, pos[1] - offset * s, 0.0)))
    return Trajectory(times, poses)


def rotation_trajectory(
    seed: int,
    duration: float = 4.0,
    rate: float = 30.0,
    peak_rate: float = 1.57,
    position=(0.0, -1.3, 1.6),
    target=(0.0, 0.6, 0.6),
) -> Trajectory:
    """Random hand-held style rotation that starts and ends at the same orientation.

    The rotation vector is a sum of random sine harmonics (3 to 6 half
    periods over the sequence) vanishing at both ends; its amplitude is
    scaled so the peak body angular rate equals ``peak_rate`` rad/s. The
    position stays fixed. Excursions stay within roughly 30 degrees, a
    shaken hand-held sensor rather than a sweep across the room.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * rate)) + 1
    times = np.arange(n) / rate
    harmonics = np.arange(3, 7)
    coeffs = rng.normal(size=(3, len(harmonics))) / harmonics
    base = look_at(position, target)
    s = times / duration
    shape = np.stack([np.sin(np.pi * np.outer(s, harmonics)) @ coeffs[a] for a in range(3)], axis=1)

    def build(scale):
        return [Pose(base.rotation @ se3.so3_exp(scale * w), base.translation) for w in shape]

    scale = 1.0
    for _ in range(20):
        poses = build(scale)
        peak = max(
            se3.rotation_angle(a.rotation.T @ b.rotation) * rate for a, b in zip(poses[:-1], poses[1:])
        )
        if abs(peak - peak_rate) < 1e-6:
            break
        scale *= peak_rate / peak
    return Trajectory(times, build(scale))


# -- evaluation ----------------------------------------------------------------


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01):
    """One-to-one nearest-timestamp pairs within ``max_dt`` as (est_idx, gt_idx) arrays."""
    if len(est) == 0 or len(gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    te, tg = est.timestamps, gt.timestamps
    pos = np.clip(np.searchsorted(tg, te), 1, max(len(tg) - 1, 1))
    cand = []
    for i, p in enumerate(pos):
        for j in {p - 1, min(p, len(tg) - 1)}:
            dt = abs(te[i] - tg[j])
            if dt <= max_dt:
                cand.append((dt, i, j))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for dt, i, j in cand:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    pairs.sort()
    if not pairs:
        return np.zeros(0, int), np.zeros(0, int)
    a = np.array(pairs)
    return a[:, 0], a[:, 1]


def align_rigid(src, dst) -> Pose:
    """Rotation and translation minimising ``sum |R src_i + t - dst_i|^2`` (Kabsch)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return Pose(R, mu_d - R @ mu_s)


@dataclass
class AteResult:
    rmse: float
    max: float
    count: int
    errors: np.ndarray
    alignment: Pose


def ate(estimated: Trajectory, ground_truth: Trajectory, max_dt: float = 0.01) -> AteResult:
    ie, ig = associate(estimated, ground_truth, max_dt)
    if len(ie) < 3:
        raise InsufficientOverlap(f"only {len(ie)} associated poses (need 3)")
    src = estimated.positions()[ie]
    dst = ground_truth.positions()[ig]
    G = align_rigid(src, dst)
    err = np.linalg.norm(se3.transform_points(G, src) - dst, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), float(err.max()), len(ie), err, G)


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory, max_dt: float = 0.01) -> float:
    """Translational RMSE after timestamp association and rigid alignment."""
    return ate(estimated, ground_truth, max_dt).rmse


def measure_box_footprint(cloud, box: Box, slab: float = 0.1, margin: float = 0.1, z_range=(0.15, 0.1)):
    """Side lengths (x, y) of ``box`` measured from an occupied-leaf cloud.

    ``box`` only selects the region: for each vertical face, points within
    ``slab`` of its plane, away from the face borders by ``margin`` and
    between ``z_range[0]`` above the floor and ``z_range[1]`` below the top,
    are averaged along the face normal. A side is the distance between the
    two opposite face estimates; NaN when a face has no points.
    Returns ``(sizes, counts)`` with counts per face ``[[x_lo, x_hi], [y_lo, y_hi]]``.
    """
    P = np.asarray(cloud, float).reshape(-1, 3)
    lo, hi = box.lo, box.hi
    P = P[(P[:, 2] > lo[2] + z_range[0]) & (P[:, 2] < hi[2] - z_range[1])]
    sizes, counts = np.full(2, np.nan), np.zeros((2, 2), int)
    for ax in (0, 1):
        other = 1 - ax
        inner = (P[:, other] > lo[other] + margin) & (P[:, other] < hi[other] - margin)
        faces = []
        for k, plane in enumerate((lo[ax], hi[ax])):
            sel = inner & (np.abs(P[:, ax] - plane) < slab)
            counts[ax, k] = int(sel.sum())
            faces.append(P[sel, ax].mean() if sel.any() else np.nan)
        sizes[ax] = faces[1] - faces[0]
    return sizes, counts
