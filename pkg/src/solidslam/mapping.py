"""Keyframe-gated occupancy mapping on an octree.

The octree is stored linearly: every node is identified by the Morton code
of its leaf-level integer coordinates shifted right by ``3 * level``. Each
level keeps a sorted array of the node keys that exist, and the leaf level
additionally stores log-odds occupancy. A lookup walks the levels from the
root down and stops at the first missing node, so its cost is bounded by the
tree depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import se3
from .exceptions import ValidationError
from .se3 import Pose
from .validation import check_cloud, check_positive, check_probability


def logit(p):
    return np.log(p) - np.log1p(-p)


def fuse_occupancy(p_prev, p_meas, prior=0.5, clamp=(0.12, 0.97)):
    """Recursive binary Bayes update of an occupancy probability.

    ``[1 + (1-p_meas)/p_meas * (1-p_prev)/p_prev * prior/(1-prior)]^-1``,
    clamped to ``clamp`` (pass ``None`` to skip clamping).
    """
    for name, v in (("p_prev", p_prev), ("p_meas", p_meas), ("prior", prior)):
        if not np.all((np.asarray(v) > 0) & (np.asarray(v) < 1)):
            raise ValidationError("must lie in (0, 1)", name)
    odds = ((1 - p_meas) / p_meas) * ((1 - p_prev) / p_prev) * (prior / (1 - prior))
    p = 1.0 / (1.0 + odds)
    if clamp is not None:
        p = np.clip(p, clamp[0], clamp[1])
    return float(p) if np.ndim(p) == 0 else p


@dataclass(frozen=True)
class KeyframePolicy:
    min_translation: float = 0.3
    min_rotation: float = math.radians(15.0)
    max_interval: float = 1.0

    def __post_init__(self):
        for key in ("min_translation", "min_rotation", "max_interval"):
            check_positive(getattr(self, key), key)


def is_keyframe(delta_pose: Pose, elapsed: float, policy: KeyframePolicy | None = None) -> bool:
    policy = policy or KeyframePolicy()
    return bool(
        np.linalg.norm(delta_pose.translation) >= policy.min_translation
        or delta_pose.angle() >= policy.min_rotation
        or elapsed >= policy.max_interval
    )


# -- Morton codes ------------------------------------------------------------


def _spread3(v):
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v):
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v.astype(np.int64)


def morton_encode(ijk) -> np.ndarray:
    ijk = np.asarray(ijk).reshape(-1, 3)
    code = _spread3(ijk[:, 0]) | (_spread3(ijk[:, 1]) << np.uint64(1)) | (_spread3(ijk[:, 2]) << np.uint64(2))
    return code.astype(np.int64)


def morton_decode(codes) -> np.ndarray:
    c = np.asarray(codes).astype(np.uint64).reshape(-1)
    return np.stack([_compact3(c), _compact3(c >> np.uint64(1)), _compact3(c >> np.uint64(2))], axis=1)


def _sorted_insert(keys, new):
    """Union of sorted unique ``keys`` with sorted unique ``new``; returns (keys, inserted mask)."""
    pos = np.searchsorted(keys, new)
    found = (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == new) if len(keys) else np.zeros(len(new), bool)
    return np.insert(keys, pos[~found], new[~found]), found, pos


class OccupancyOctree:
    """Probabilistic occupancy map with ``resolution``-sized leaves.

    Covers ``2**depth`` leaves per axis centred on the world origin. Leaf
    probabilities are kept as log-odds and clamped to ``[p_min, p_max]``;
    space that was never updated reads as ``prior``.
    """

    def __init__(self, resolution=0.05, prior=0.5, p_min=0.12, p_max=0.97, depth=16):
        check_positive(resolution, "resolution")
        check_probability(prior, "prior")
        check_probability(p_min, "p_min")
        check_probability(p_max, "p_max")
        if not p_min < prior < p_max:
            raise ValidationError("need p_min < prior < p_max", "prior")
        if not 1 <= depth <= 21:
            raise ValidationError("depth must be in [1, 21]", "depth")
        self.resolution = float(resolution)
        self.prior = float(prior)
        self.p_min = float(p_min)
        self.p_max = float(p_max)
        self.depth = int(depth)
        self._offset = 1 << (self.depth - 1)
        self._l_prior = float(logit(self.prior))
        self._l_min = float(logit(self.p_min))
        self._l_max = float(logit(self.p_max))
        self.leaf_keys = np.zeros(0, dtype=np.int64)
        self.leaf_logodds = np.zeros(0)
        # inner_keys[l - 1] holds the node keys at level l (1 = parents of leaves, depth = root).
        self.inner_keys = [np.zeros(0, dtype=np.int64) for _ in range(self.depth)]

    # coordinates <-> keys

    def grid_coords(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Integer leaf coordinates and an in-bounds mask."""
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        ijk = np.floor(P / self.resolution).astype(np.int64) + self._offset
        inside = ((ijk >= 0) & (ijk < (1 << self.depth))).all(axis=1)
        return ijk, inside

    def keys_for(self, points) -> tuple[np.ndarray, np.ndarray]:
        ijk, inside = self.grid_coords(points)
        keys = np.full(len(ijk), -1, dtype=np.int64)
        keys[inside] = morton_encode(ijk[inside])
        return keys, inside

    def key_centers(self, keys) -> np.ndarray:
        ijk = morton_decode(keys)
        return (ijk - self._offset + 0.5) * self.resolution

    # updates

    def update_keys(self, keys, logodds_delta) -> None:
        """Add ``logodds_delta`` to leaves ``keys`` (unique), creating them as needed."""
        keys = np.asarray(keys, dtype=np.int64)
        delta = np.broadcast_to(np.asarray(logodds_delta, dtype=float), keys.shape)
        order = np.argsort(keys, kind="stable")
        keys, delta = keys[order], delta[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise ValueError("update_keys requires unique keys")

        pos = np.searchsorted(self.leaf_keys, keys)
        if len(self.leaf_keys):
            found = (pos < len(self.leaf_keys)) & (
                self.leaf_keys[np.minimum(pos, len(self.leaf_keys) - 1)] == keys
            )
        else:
            found = np.zeros(len(keys), dtype=bool)
        vals = self.leaf_logodds
        vals[pos[found]] = np.clip(vals[pos[found]] + delta[found], self._l_min, self._l_max)
        fresh = np.clip(self._l_prior + delta[~found], self._l_min, self._l_max)
        self.leaf_keys = np.insert(self.leaf_keys, pos[~found], keys[~found])
        self.leaf_logodds = np.insert(vals, pos[~found], fresh)

        new_keys = keys[~found]
        for level in range(1, self.depth + 1):
            if len(new_keys) == 0:
                break
            parents = np.unique(new_keys >> (3 * level))
            self.inner_keys[level - 1], _, _ = _sorted_insert(self.inner_keys[level - 1], parents)

    def update_points(self, points, p_meas) -> int:
        keys, inside = self.keys_for(points)
        keys = np.unique(keys[inside])
        self.update_keys(keys, logit(p_meas) - self._l_prior)
        return len(keys)

    # queries

    def lookup_keys(self, keys) -> np.ndarray:
        """Log-odds for leaf ``keys``; walks root to leaf and falls back to the prior."""
        keys = np.asarray(keys, dtype=np.int64)
        out = np.full(len(keys), self._l_prior)
        alive = keys >= 0
        for level in range(self.depth, 0, -1):
            level_keys = self.inner_keys[level - 1]
            if not alive.any() or len(level_keys) == 0:
                return out
            k = keys[alive] >> (3 * level)
            pos = np.minimum(np.searchsorted(level_keys, k), len(level_keys) - 1)
            alive[alive] = level_keys[pos] == k
        if alive.any() and len(self.leaf_keys):
            k = keys[alive]
            pos = np.minimum(np.searchsorted(self.leaf_keys, k), len(self.leaf_keys) - 1)
            hit = self.leaf_keys[pos] == k
            idx = np.flatnonzero(alive)
            out[idx[hit]] = self.leaf_logodds[pos[hit]]
        return out

    def query(self, points) -> np.ndarray:
        """Occupancy probability of the leaf containing each point."""
        keys, _ = self.keys_for(points)
        l = self.lookup_keys(keys)
        return 1.0 / (1.0 + np.exp(-l))

    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.leaf_logodds))

    def export_occupied(self, threshold=0.6) -> np.ndarray:
        """Leaf centres with occupancy >= ``threshold``."""
        check_probability(threshold, "threshold")
        keep = self.leaf_logodds >= logit(threshold) - 1e-12
        return self.key_centers(self.leaf_keys[keep]).reshape(-1, 3)

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_keys)

    @property
    def node_count(self) -> int:
        return self.leaf_count + sum(len(k) for k in self.inner_keys)

    # ray casting

    def traverse(self, origin, endpoints) -> np.ndarray:
        """Integer leaf coordinates crossed by each origin->endpoint segment.

        Uses a voxel walk (one axis step at a time, always along the axis
        whose next boundary is closest). The endpoint's own leaf is not
        included.
        """
        o = np.asarray(origin, dtype=float).reshape(3) / self.resolution
        E = np.asarray(endpoints, dtype=float).reshape(-1, 3) / self.resolution
        n = len(E)
        if n == 0:
            return np.zeros((0, 3), dtype=np.int64)
        start = np.floor(o).astype(np.int64)
        end = np.floor(E).astype(np.int64)
        d = E - o
        step = np.sign(d).astype(np.int64)
        remaining = np.abs(end - start)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(d != 0, 1.0 / np.abs(d), np.inf)
            nxt = np.where(step > 0, start + 1 - o, o - start)
            t_max = np.where(d != 0, nxt * inv, np.inf)
        t_delta = inv
        cur = np.broadcast_to(start, (n, 3)).copy()

        visited = []
        active = np.flatnonzero(remaining.sum(axis=1) > 0)
        if len(active):
            visited.append(cur[active].copy())
        while len(active):
            tm = np.where(remaining[active] > 0, t_max[active], np.inf)
            axis = np.argmin(tm, axis=1)
            cur[active, axis] += step[active, axis]
            t_max[active, axis] += t_delta[active, axis]
            remaining[active, axis] -= 1
            active = active[remaining[active].sum(axis=1) > 0]
            if len(active):
                visited.append(cur[active].copy())
        if not visited:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate(visited) + self._offset


def integrate_scan(tree: OccupancyOctree, cloud, pose: Pose, model=(0.7, 0.4)) -> int:
    """Fuse one sensor-frame scan; returns the number of leaves updated.

    Endpoint leaves are fused with ``p_hit``, leaves crossed on the way with
    ``p_miss``. A leaf is updated at most once per scan and a hit takes
    precedence over a miss.
    """
    p_hit, p_miss = model
    P = check_cloud(cloud)
    if len(P) == 0:
        return 0
    W = se3.transform_points(pose, P)
    hit_keys, inside = tree.keys_for(W)
    hit_keys = np.unique(hit_keys[inside])

    ray_ijk = tree.traverse(pose.translation, W[inside])
    ok = ((ray_ijk >= 0) & (ray_ijk < (1 << tree.depth))).all(axis=1)
    miss_keys = np.unique(morton_encode(ray_ijk[ok]))
    miss_keys = miss_keys[~np.isin(miss_keys, hit_keys, assume_unique=True)]

    tree.update_keys(hit_keys, logit(p_hit) - tree._l_prior)
    tree.update_keys(miss_keys, logit(p_miss) - tree._l_prior)
    return len(hit_keys) + len(miss_keys)


def query(tree: OccupancyOctree, world_point) -> float:
    return float(tree.query(np.asarray(world_point, dtype=float).reshape(1, 3))[0])


def export_occupied(tree: OccupancyOctree, threshold=0.6) -> np.ndarray:
    return tree.export_occupied(threshold)


@dataclass(frozen=True)
class MappingParams:
    resolution: float = 0.05
    p_hit: float = 0.7
    p_miss: float = 0.4
    p_min: float = 0.12
    p_max: float = 0.97
    prior: float = 0.5
    min_translation: float = 0.3
    min_rotation: float = math.radians(15.0)
    max_interval: float = 1.0
    occupancy_threshold: float = 0.6

    def __post_init__(self):
        check_positive(self.resolution, "resolution")
        for key in ("p_hit", "p_miss", "p_min", "p_max", "prior", "occupancy_threshold"):
            check_probability(getattr(self, key), key)
        if not self.p_min < self.prior < self.p_max:
            raise ValidationError("need p_min < prior < p_max", "prior")
        KeyframePolicy(self.min_translation, self.min_rotation, self.max_interval)


class OccupancyMapper(BaseEstimator):
    """Accumulate keyframe scans into an :class:`OccupancyOctree`.

    ``partial_fit(cloud, pose, timestamp)`` integrates the scan only when the
    pose moved or turned enough, or enough time passed, since the last
    keyframe. Scans are thinned to one point per leaf (the centroid) before
    ray casting. ``predict`` returns occupancy probabilities for query points.
    """

    def __init__(
        self,
        resolution=0.05,
        p_hit=0.7,
        p_miss=0.4,
        p_min=0.12,
        p_max=0.97,
        prior=0.5,
        min_translation=0.3,
        min_rotation=math.radians(15.0),
        max_interval=1.0,
        occupancy_threshold=0.6,
    ):
        self.resolution = resolution
        self.p_hit = p_hit
        self.p_miss = p_miss
        self.p_min = p_min
        self.p_max = p_max
        self.prior = prior
        self.min_translation = min_translation
        self.min_rotation = min_rotation
        self.max_interval = max_interval
        self.occupancy_threshold = occupancy_threshold

    def _reset(self):
        params = MappingParams(**self.get_params())
        self.policy_ = KeyframePolicy(params.min_translation, params.min_rotation, params.max_interval)
        self.tree_ = OccupancyOctree(params.resolution, params.prior, params.p_min, params.p_max)
        self.keyframes_ = []
        self.n_updates_ = 0

    def fit(self, X, poses, timestamps=None):
        self._reset()
        if timestamps is None:
            timestamps = range(len(poses))
        for cloud, pose, t in zip(X, poses, timestamps):
            self.partial_fit(cloud, pose, t)
        return self

    def partial_fit(self, X, pose: Pose, timestamp: float = 0.0) -> bool:
        """Integrate ``X`` if it is a keyframe; returns whether it was."""
        if not hasattr(self, "tree_"):
            self._reset()
        if self.keyframes_:
            t_last, T_last = self.keyframes_[-1]
            delta = se3.compose(se3.inverse(T_last), pose)
            if not is_keyframe(delta, timestamp - t_last, self.policy_):
                return False
        P = check_cloud(X)
        if len(P):
            # one ray per world leaf, aimed at the centroid of the points inside it
            W = se3.transform_points(pose, P)
            keys, _ = self.tree_.keys_for(W)
            _, inv, cnt = np.unique(keys, return_inverse=True, return_counts=True)
            inv = inv.reshape(-1)
            W = np.stack([np.bincount(inv, weights=W[:, k]) for k in range(3)], axis=1) / cnt[:, None]
            P = se3.transform_points(se3.inverse(pose), W)
        self.n_updates_ += integrate_scan(self.tree_, P, pose, (self.p_hit, self.p_miss))
        self.keyframes_.append((timestamp, pose))
        return True

    def predict(self, X) -> np.ndarray:
        return self.tree_.query(check_cloud(X))

    def export_occupied(self, threshold=None) -> np.ndarray:
        return self.tree_.export_occupied(self.occupancy_threshold if threshold is None else threshold)
