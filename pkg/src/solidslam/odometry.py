"""Scan-to-map odometry: point-to-edge / point-to-plane Gauss-Newton on SE(3).

Each frame's edge and planar features are registered against a sliding
window of the previous ``window`` frames. Poses are updated on the left,
``T <- exp(d) T``, so every residual Jacobian is the residual gradient at the
transformed point times ``[I | -skew(T p)]`` (see :mod:`solidslam.se3`).
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from . import se3
from .exceptions import DegenerateEdge, DegeneratePlane, ValidationError
from .features import FeatureSet
from .se3 import Pose
from .validation import check_positive

logger = logging.getLogger(__name__)

EDGE_EPS = 1e-9
AREA_EPS = 1e-9
ON_LINE_EPS = 1e-12


# -- residuals ---------------------------------------------------------------


def edge_residual(p_hat, e1, e2) -> float:
    """Distance from ``p_hat`` to the line through ``e1`` and ``e2``."""
    p_hat, e1, e2 = (np.asarray(v, dtype=float) for v in (p_hat, e1, e2))
    d = np.linalg.norm(e1 - e2)
    if d < EDGE_EPS:
        raise DegenerateEdge(f"|e1 - e2| = {d:.3g}")
    return float(np.linalg.norm(np.cross(p_hat - e2, p_hat - e1)) / d)


def _plane_normal(s1, s2, s3):
    n = np.cross(s1 - s2, s1 - s3)
    norm = np.linalg.norm(n)
    if norm < EDGE_EPS:
        raise DegeneratePlane(f"cross-product norm {norm:.3g}")
    return n / norm


def plane_residual(p_hat, s1, s2, s3) -> float:
    """Unsigned distance from ``p_hat`` to the plane through ``s1, s2, s3``."""
    p_hat, s1, s2, s3 = (np.asarray(v, dtype=float) for v in (p_hat, s1, s2, s3))
    n = _plane_normal(s1, s2, s3)
    return float(abs((p_hat - s1) @ n))


def edge_jacobian(p_hat, e1, e2, J_p) -> np.ndarray:
    """1x6 row ``n^T skew((e1 - e2) / |e1 - e2|) J_p``.

    Returns a zero row when ``p_hat`` lies on the line, where the distance
    has no gradient.
    """
    p_hat, e1, e2 = (np.asarray(v, dtype=float) for v in (p_hat, e1, e2))
    d = e1 - e2
    dn = np.linalg.norm(d)
    if dn < EDGE_EPS:
        raise DegenerateEdge(f"|e1 - e2| = {dn:.3g}")
    c = np.cross(p_hat - e2, p_hat - e1)
    cn = np.linalg.norm(c)
    if cn / dn < ON_LINE_EPS:
        return np.zeros((1, 6))
    return ((c / cn) @ se3.skew(d / dn) @ J_p).reshape(1, 6)


def plane_jacobian(p_hat, s1, s2, s3, J_p) -> np.ndarray:
    """1x6 row ``sign((p_hat - s1) . n) n^T J_p``; in-plane points take the + sign."""
    p_hat, s1, s2, s3 = (np.asarray(v, dtype=float) for v in (p_hat, s1, s2, s3))
    n = _plane_normal(s1, s2, s3)
    sign = -1.0 if (p_hat - s1) @ n < 0 else 1.0
    return (sign * n @ J_p).reshape(1, 6)


# Batched forms used by the solver. Rows follow the [translation, rotation]
# Jacobian layout; with J_p = [I | -skew(q)], g^T J_p = [g, q x g].


def edge_terms(Q, E1, E2):
    """Residuals (n,) and Jacobian rows (n, 6) for transformed points ``Q``."""
    d = E1 - E2
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    c = np.cross(Q - E2, Q - E1)
    cn = np.linalg.norm(c, axis=1)
    r = cn / np.linalg.norm(d, axis=1)
    safe = r >= ON_LINE_EPS
    n = np.zeros_like(c)
    n[safe] = c[safe] / cn[safe, None]
    g = np.cross(n, u)
    return r, np.hstack([g, np.cross(Q, g)])


def plane_terms(Q, S1, S2, S3):
    n = np.cross(S1 - S2, S1 - S3)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    sd = np.einsum("ij,ij->i", Q - S1, n)
    g = np.where(sd[:, None] < 0, -n, n)
    return np.abs(sd), np.hstack([g, np.cross(Q, g)])


def edge_residuals(Q, E1, E2):
    d = np.linalg.norm(E1 - E2, axis=1)
    return np.linalg.norm(np.cross(Q - E2, Q - E1), axis=1) / d


def plane_residuals(Q, S1, S2, S3):
    n = np.cross(S1 - S2, S1 - S3)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return np.abs(np.einsum("ij,ij->i", Q - S1, n))


# -- local map ---------------------------------------------------------------


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Centroid of the points in each occupied voxel; ``voxel <= 0`` is a no-op."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if voxel <= 0 or len(P) == 0:
        return P.copy()
    keys = np.floor(P / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.stack([np.bincount(inv, weights=P[:, k]) for k in range(3)], axis=1)
    return out / counts[:, None]


@dataclass
class Correspondence:
    kind: str  # "edge" or "plane"
    source: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.kind not in ("edge", "plane"):
            raise ValueError(f"unknown correspondence kind {self.kind!r}")
        self.source = np.asarray(self.source, dtype=float).reshape(3)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if len(self.targets) != (2 if self.kind == "edge" else 3):
            raise ValueError(f"{self.kind} correspondence needs {2 if self.kind == 'edge' else 3} targets")


@dataclass
class _WindowEntry:
    features: FeatureSet
    pose: Pose
    edges: np.ndarray
    planars: np.ndarray


class LocalMap:
    """Sliding window of feature frames in the map frame with K-D tree indices.

    Treat instances as read-only snapshots; :func:`update_local_map` returns a
    new map.
    """

    def __init__(self, window: int = 10, edge_voxel: float = 0.05, plane_voxel: float = 0.10):
        check_positive(window, "window", integer=True)
        self.window_size = window
        self.edge_voxel = edge_voxel
        self.plane_voxel = plane_voxel
        self.window: deque = deque()
        self.edge_points = np.zeros((0, 3))
        self.plane_points = np.zeros((0, 3))
        self.edge_index = None
        self.plane_index = None

    def __len__(self):
        return len(self.window)

    @property
    def empty(self) -> bool:
        return len(self.edge_points) == 0 and len(self.plane_points) == 0

    def _rebuild(self):
        if self.window:
            edges = np.concatenate([w.edges for w in self.window])
            planars = np.concatenate([w.planars for w in self.window])
        else:
            edges = planars = np.zeros((0, 3))
        self.edge_points = voxel_downsample(edges, self.edge_voxel)
        self.plane_points = voxel_downsample(planars, self.plane_voxel)
        self.edge_index = cKDTree(self.edge_points) if len(self.edge_points) else None
        self.plane_index = cKDTree(self.plane_points) if len(self.plane_points) else None

    def copy(self) -> "LocalMap":
        out = LocalMap(self.window_size, self.edge_voxel, self.plane_voxel)
        out.window = deque(self.window)
        out.edge_points, out.plane_points = self.edge_points, self.plane_points
        out.edge_index, out.plane_index = self.edge_index, self.plane_index
        return out

    @classmethod
    def from_points(cls, edges, planars, **kwargs) -> "LocalMap":
        """Map holding exactly the given map-frame points (one frame at identity)."""
        kwargs.setdefault("edge_voxel", 0.0)
        kwargs.setdefault("plane_voxel", 0.0)
        m = cls(**kwargs)
        return update_local_map(m, FeatureSet(edges, planars), Pose.identity())


def update_local_map(local_map: LocalMap, features: FeatureSet, pose: Pose) -> LocalMap:
    """Append ``features`` placed at ``pose``; evict the oldest frame past the window size."""
    out = local_map.copy()
    out.window.append(
        _WindowEntry(
            features,
            pose,
            se3.transform_points(pose, features.edges),
            se3.transform_points(pose, features.planars),
        )
    )
    while len(out.window) > out.window_size:
        out.window.popleft()
    out._rebuild()
    return out


def _query(index, points, Q, k, max_dist):
    """k nearest map points within max_dist; returns (valid mask, (n, k, 3) targets)."""
    n = len(Q)
    if index is None or len(points) < k or n == 0:
        return np.zeros(n, dtype=bool), np.zeros((n, k, 3))
    dist, idx = index.query(Q, k=k, distance_upper_bound=max_dist)
    valid = np.isfinite(dist).all(axis=1)
    idx = np.where(valid[:, None], idx, 0)
    return valid, points[idx]


def associate_edges(Q, local_map: LocalMap, max_dist: float):
    valid, T = _query(local_map.edge_index, local_map.edge_points, Q, 2, max_dist)
    if valid.any():
        valid &= np.linalg.norm(T[:, 0] - T[:, 1], axis=1) >= EDGE_EPS
    return valid, T


def associate_planes(Q, local_map: LocalMap, max_dist: float):
    valid, T = _query(local_map.plane_index, local_map.plane_points, Q, 3, max_dist)
    if valid.any():
        area = 0.5 * np.linalg.norm(np.cross(T[:, 0] - T[:, 1], T[:, 0] - T[:, 2]), axis=1)
        valid &= area > AREA_EPS
    return valid, T


def find_edge_correspondence(p_hat, local_map: LocalMap, max_dist: float = 1.0):
    """Two nearest map edge points within ``max_dist`` of ``p_hat``, or None."""
    p = np.asarray(p_hat, dtype=float).reshape(1, 3)
    valid, T = associate_edges(p, local_map, max_dist)
    if not valid[0]:
        return None
    return Correspondence("edge", p[0], T[0])


def find_plane_correspondence(p_hat, local_map: LocalMap, max_dist: float = 1.0):
    """Three nearest, non-collinear map planar points within ``max_dist``, or None."""
    p = np.asarray(p_hat, dtype=float).reshape(1, 3)
    valid, T = associate_planes(p, local_map, max_dist)
    if not valid[0]:
        return None
    return Correspondence("plane", p[0], T[0])


# -- pose estimation ---------------------------------------------------------


def predict_initial_pose(T_prev: Pose | None = None, T_prev2: Pose | None = None) -> Pose:
    """Constant-velocity guess ``T_prev T_prev2^-1 T_prev``.

    With no history this is the identity; with one pose it is that pose.
    """
    if T_prev is None:
        return Pose.identity()
    if T_prev2 is None:
        return T_prev
    return se3.compose(se3.compose(T_prev, se3.inverse(T_prev2)), T_prev)


@dataclass(frozen=True)
class OdometryParams:
    window: int = 10
    edge_max_dist: float = 1.0
    plane_max_dist: float = 1.0
    eps: float = 1e-3
    max_iter: int = 10
    edge_voxel: float = 0.05
    plane_voxel: float = 0.10
    min_correspondences: int = 10
    max_condition: float = 1e12

    def __post_init__(self):
        check_positive(self.window, "window", integer=True)
        check_positive(self.max_iter, "max_iter", integer=True)
        check_positive(self.min_correspondences, "min_correspondences", integer=True)
        for key in ("edge_max_dist", "plane_max_dist", "eps", "max_condition"):
            check_positive(getattr(self, key), key)
        for key in ("edge_voxel", "plane_voxel"):
            check_positive(getattr(self, key), key, allow_zero=True)


@dataclass
class Diagnostics:
    frame_index: int = 0
    iterations: int = 0
    cost: float = 0.0
    edge_inliers: int = 0
    plane_inliers: int = 0
    converged: bool = False
    low_confidence: bool = False
    reason: str = ""
    elapsed_ms: float = 0.0
    halvings: int = 0
    costs: list = field(default_factory=list)

    def log_line(self) -> str:
        return (
            f"frame={self.frame_index} iterations={self.iterations} cost={self.cost:.6g} "
            f"edge_inliers={self.edge_inliers} plane_inliers={self.plane_inliers} "
            f"low_confidence={int(self.low_confidence)} elapsed_ms={self.elapsed_ms:.2f}"
        )


class _Problem:
    """Correspondences frozen for one Gauss-Newton step."""

    def __init__(self, edges, E, planars, S):
        self.edges, self.E = edges, E
        self.planars, self.S = planars, S

    def __len__(self):
        return len(self.edges) + len(self.planars)

    def linearize(self, T: Pose):
        Qe = se3.transform_points(T, self.edges)
        Qs = se3.transform_points(T, self.planars)
        re, Je = edge_terms(Qe, self.E[:, 0], self.E[:, 1])
        rs, Js = plane_terms(Qs, self.S[:, 0], self.S[:, 1], self.S[:, 2])
        return np.concatenate([re, rs]), np.vstack([Je, Js])

    def cost(self, T: Pose) -> float:
        Qe = se3.transform_points(T, self.edges)
        Qs = se3.transform_points(T, self.planars)
        re = edge_residuals(Qe, self.E[:, 0], self.E[:, 1])
        rs = plane_residuals(Qs, self.S[:, 0], self.S[:, 1], self.S[:, 2])
        return 0.5 * float(re @ re + rs @ rs)


def _associate(features: FeatureSet, local_map: LocalMap, T: Pose, params: OdometryParams):
    Qe = se3.transform_points(T, features.edges)
    Qs = se3.transform_points(T, features.planars)
    ve, E = associate_edges(Qe, local_map, params.edge_max_dist)
    vs, S = associate_planes(Qs, local_map, params.plane_max_dist)
    return _Problem(features.edges[ve], E[ve], features.planars[vs], S[vs])


def estimate_pose(
    features: FeatureSet,
    local_map: LocalMap,
    T_init: Pose | None = None,
    params: OdometryParams | None = None,
) -> tuple[Pose, Diagnostics]:
    """Register ``features`` against ``local_map`` starting from ``T_init``.

    One Gauss-Newton step is taken per re-association. A step that raises the
    cost of its own correspondence set is halved up to five times. Fewer than
    ``min_correspondences`` matches, or a normal matrix with condition number
    above ``max_condition``, returns ``T_init`` flagged ``low_confidence``.
    """
    params = params or OdometryParams()
    T_init = T_init if T_init is not None else Pose.identity()
    diag = Diagnostics(frame_index=features.frame_index)
    start = time.perf_counter()
    T = T_init

    def bail(reason):
        diag.low_confidence = True
        diag.reason = reason
        diag.elapsed_ms = (time.perf_counter() - start) * 1e3
        return T_init, diag

    if local_map.empty:
        return bail("empty map")

    for it in range(params.max_iter):
        problem = _associate(features, local_map, T, params)
        diag.edge_inliers, diag.plane_inliers = len(problem.edges), len(problem.planars)
        if len(problem) < params.min_correspondences:
            return bail(f"{len(problem)} correspondences")
        r, J = problem.linearize(T)
        H = J.T @ J
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > params.max_condition:
            return bail(f"condition number {cond:.3g}")
        delta = np.linalg.solve(H, -(J.T @ r))

        cost0 = 0.5 * float(r @ r)
        step = delta
        accepted = False
        for _ in range(6):
            candidate = se3.compose(se3.exp(se3.twist_from_jacobian_step(step)), T)
            if problem.cost(candidate) <= cost0:
                accepted = True
                break
            step = 0.5 * step
            diag.halvings += 1
        diag.iterations = it + 1
        if not accepted:
            diag.cost = cost0
            diag.costs.append(cost0)
            diag.converged = True
            break
        T = candidate
        diag.cost = problem.cost(T)
        diag.costs.append(diag.cost)
        if np.linalg.norm(step) < params.eps:
            diag.converged = True
            break

    diag.elapsed_ms = (time.perf_counter() - start) * 1e3
    return T, diag


class ScanToMapOdometry(BaseEstimator):
    """Incremental scan-to-map odometry over a stream of :class:`FeatureSet`.

    ``partial_fit`` consumes one frame; ``fit`` resets and consumes a sequence.
    After fitting, ``poses_`` holds one map-frame pose per frame and
    ``diagnostics_`` the per-frame solver report.
    """

    def __init__(
        self,
        window=10,
        edge_max_dist=1.0,
        plane_max_dist=1.0,
        eps=1e-3,
        max_iter=10,
        edge_voxel=0.05,
        plane_voxel=0.10,
        min_correspondences=10,
        max_condition=1e12,
    ):
        self.window = window
        self.edge_max_dist = edge_max_dist
        self.plane_max_dist = plane_max_dist
        self.eps = eps
        self.max_iter = max_iter
        self.edge_voxel = edge_voxel
        self.plane_voxel = plane_voxel
        self.min_correspondences = min_correspondences
        self.max_condition = max_condition

    def _reset(self):
        self.params_ = OdometryParams(**self.get_params())
        self.local_map_ = LocalMap(self.window, self.edge_voxel, self.plane_voxel)
        self.poses_ = []
        self.diagnostics_ = []

    def fit(self, X, y=None):
        self._reset()
        for features in X:
            self.partial_fit(features)
        return self

    def partial_fit(self, X: FeatureSet, y=None):
        if not hasattr(self, "poses_"):
            self._reset()
        prev = self.poses_[-1] if self.poses_ else None
        prev2 = self.poses_[-2] if len(self.poses_) > 1 else None
        T_init = predict_initial_pose(prev, prev2)
        if not self.poses_:
            pose, diag = T_init, Diagnostics(frame_index=X.frame_index, converged=True, reason="first frame")
        else:
            pose, diag = estimate_pose(X, self.local_map_, T_init, self.params_)
        logger.debug(diag.log_line())
        self.local_map_ = update_local_map(self.local_map_, X, pose)
        self.poses_.append(pose)
        self.diagnostics_.append(diag)
        return self

    def predict(self, X: FeatureSet, T_init: Pose | None = None) -> Pose:
        """Pose of ``X`` against the current map, without updating it."""
        if not hasattr(self, "poses_") or not self.poses_:
            return Pose.identity()
        if T_init is None:
            prev2 = self.poses_[-2] if len(self.poses_) > 1 else None
            T_init = predict_initial_pose(self.poses_[-1], prev2)
        return estimate_pose(X, self.local_map_, T_init, self.params_)[0]
