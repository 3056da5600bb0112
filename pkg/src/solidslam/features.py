"""Grid-based edge/planar feature extraction for pyramid-FoV scans.

Points are binned on two angles taken straight from the sensor's forward
axis ``x``::

    alpha = arctan(y / x)    # bound to the M "vertical" sectors
    theta = arctan(z / x)    # bound to the N "horizontal" sectors

Note that with the usual x-forward / z-up sensor frame ``alpha`` actually
sweeps left/right and ``theta`` up/down; the names are kept as they pair with
``M`` and ``N``. Each cell is reduced to the centroid of its points, and a
windowed sum of range differences (the local smoothness) decides whether the
centroid becomes an edge feature, a planar feature, or neither.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DegeneratePoint, InsufficientFeatures, ValidationError
from .validation import check_cloud, check_positive

MIN_EDGES = 10
MIN_PLANARS = 30


@dataclass(frozen=True)
class SensorSpec:
    """Field of view (rad), angular resolution (rad) and range limits (m).

    Defaults describe a 70 x 55 degree, 0.07 degree resolution sensor with a
    0.25-9 m range.
    """

    alpha_min: float = math.radians(-35.0)
    alpha_max: float = math.radians(35.0)
    theta_min: float = math.radians(-27.5)
    theta_max: float = math.radians(27.5)
    alpha_res: float = math.radians(0.07)
    theta_res: float = math.radians(0.07)
    range_min: float = 0.25
    range_max: float = 9.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ("alpha_min", "alpha_max", "theta_min", "theta_max"):
            v = getattr(self, key)
            if not np.isfinite(v) or abs(v) >= math.pi / 2:
                raise ValidationError(f"must lie strictly inside (-pi/2, pi/2), got {v!r}", key)
        if not self.alpha_min < self.alpha_max:
            raise ValidationError("alpha_min must be < alpha_max", "alpha_min")
        if not self.theta_min < self.theta_max:
            raise ValidationError("theta_min must be < theta_max", "theta_min")
        check_positive(self.alpha_res, "alpha_res")
        check_positive(self.theta_res, "theta_res")
        check_positive(self.range_min, "range_min")
        if not self.range_min < self.range_max:
            raise ValidationError("range_min must be < range_max", "range_max")


def grid_shape(spec: SensorSpec, max_cells: int | None = 200) -> tuple[int, int]:
    """Half the sensor's sample count along each angle, optionally capped."""
    M = math.floor((spec.alpha_max - spec.alpha_min) / (2 * spec.alpha_res) + 1e-9)
    N = math.floor((spec.theta_max - spec.theta_min) / (2 * spec.theta_res) + 1e-9)
    if max_cells is not None:
        M, N = min(M, max_cells), min(N, max_cells)
    return max(M, 1), max(N, 1)


@dataclass
class CellGrid:
    """Per-cell centroids of a projected scan.

    Empty cells have ``count == 0`` and NaN ``mean``; cells without a
    smoothness value (empty, or too sparse a neighbourhood) hold NaN.
    """

    mean: np.ndarray  # (M, N, 3)
    count: np.ndarray  # (M, N) int
    smoothness: np.ndarray | None = None  # (M, N)

    @property
    def M(self) -> int:
        return self.count.shape[0]

    @property
    def N(self) -> int:
        return self.count.shape[1]

    @property
    def occupied(self) -> np.ndarray:
        return self.count > 0

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.mean, axis=2)


@dataclass
class FeatureSet:
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    planars: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    frame_index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.edges = check_cloud(self.edges, name="edges")
        self.planars = check_cloud(self.planars, name="planars")

    def __len__(self):
        return len(self.edges) + len(self.planars)


def filter_range(cloud, spec: SensorSpec, margin: float = 0.02) -> np.ndarray:
    """Drop non-finite points and points outside ``[range_min, range_max * (1 - margin)]``."""
    P = check_cloud(cloud, allow_nonfinite=True)
    P = P[np.isfinite(P).all(axis=1)]
    r = np.linalg.norm(P, axis=1)
    keep = (r >= spec.range_min) & (r <= spec.range_max * (1.0 - margin))
    return P[keep]


def compute_angles(p) -> tuple[float, float]:
    x, y, z = np.asarray(p, dtype=float).reshape(3)
    if x == 0:
        raise DegeneratePoint(f"point {(x, y, z)} has x = 0")
    return float(np.arctan(y / x)), float(np.arctan(z / x))


def _sector_index(angle, lo, hi, count):
    # Cells are (lo + k w, lo + (k+1) w]; the lower bound itself belongs to cell 0.
    u = (angle - lo) * count / (hi - lo)
    nearest = np.rint(u)
    u = np.where(np.abs(u - nearest) < 1e-9, nearest, u)
    return np.clip(np.ceil(u).astype(np.int64) - 1, 0, count - 1)


def project_to_grid(cloud, spec: SensorSpec, shape: tuple[int, int] | None = None) -> CellGrid:
    """Bin forward-hemisphere points into the M x N angular grid and average each cell."""
    M, N = shape if shape is not None else grid_shape(spec)
    P = check_cloud(cloud)
    P = P[P[:, 0] > 0]
    alpha = np.arctan(P[:, 1] / P[:, 0])
    theta = np.arctan(P[:, 2] / P[:, 0])
    inside = (
        (alpha >= spec.alpha_min) & (alpha <= spec.alpha_max)
        & (theta >= spec.theta_min) & (theta <= spec.theta_max)
    )
    P, alpha, theta = P[inside], alpha[inside], theta[inside]
    m = _sector_index(alpha, spec.alpha_min, spec.alpha_max, M)
    n = _sector_index(theta, spec.theta_min, spec.theta_max, N)
    flat = m * N + n
    count = np.bincount(flat, minlength=M * N)
    sums = np.stack([np.bincount(flat, weights=P[:, k], minlength=M * N) for k in range(3)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = sums / count[:, None]
    mean[count == 0] = np.nan
    return CellGrid(mean.reshape(M, N, 3), count.reshape(M, N))


def compute_smoothness(grid: CellGrid, lam: int = 2, min_neighbors: float | None = None) -> CellGrid:
    """Fill ``grid.smoothness`` with the windowed range-difference sum over lam**2.

    The (2 lam + 1)^2 window is clipped at the grid border. A cell gets a value
    only when it is occupied and at least ``min_neighbors`` cells of its window
    (itself included) are occupied; the default is half the full window.
    """
    if isinstance(lam, bool) or not isinstance(lam, (int, np.integer)) or lam < 1:
        raise ValidationError(f"must be an integer >= 1, got {lam!r}", "lam")
    if min_neighbors is None:
        min_neighbors = (2 * lam + 1) ** 2 / 2
    occ = grid.occupied
    r = np.where(occ, grid.ranges, 0.0)
    kernel = np.ones((2 * lam + 1, 2 * lam + 1))
    window_sum = ndimage.correlate(r, kernel, mode="constant", cval=0.0)
    window_count = ndimage.correlate(occ.astype(float), kernel, mode="constant", cval=0.0)
    sigma = (window_sum - window_count * r) / lam**2
    valid = occ & (window_count >= min_neighbors)
    grid.smoothness = np.where(valid, sigma, np.nan)
    return grid


def classify_features(
    grid: CellGrid,
    sigma_edge: float = 0.05,
    sigma_plane: float = 0.01,
    max_edges: int = 150,
    max_planars: int = 400,
    *,
    frame_index: int = 0,
    timestamp: float = 0.0,
    warn: bool = True,
) -> FeatureSet:
    """Select sharp cells (sigma >= sigma_edge) as edges and flat cells (|sigma| <= sigma_plane) as planars.

    Edges are taken in order of decreasing sigma, planars in order of
    increasing |sigma|; ties keep row-major cell order.
    """
    if not sigma_plane < sigma_edge:
        raise ValidationError("sigma_plane must be < sigma_edge", "sigma_plane")
    if grid.smoothness is None:
        raise ValueError("compute_smoothness must run before classify_features")
    sigma = grid.smoothness.ravel()
    means = grid.mean.reshape(-1, 3)
    has = np.isfinite(sigma)

    edge_idx = np.flatnonzero(has & (sigma >= sigma_edge))
    edge_idx = edge_idx[np.argsort(-sigma[edge_idx], kind="stable")][:max_edges]
    plane_idx = np.flatnonzero(has & (np.abs(sigma) <= sigma_plane))
    plane_idx = plane_idx[np.argsort(np.abs(sigma[plane_idx]), kind="stable")][:max_planars]

    fs = FeatureSet(means[edge_idx], means[plane_idx], frame_index, timestamp)
    if warn and (len(fs.edges) < MIN_EDGES or len(fs.planars) < MIN_PLANARS):
        warnings.warn(
            f"frame {frame_index}: {len(fs.edges)} edges, {len(fs.planars)} planars",
            InsufficientFeatures,
            stacklevel=2,
        )
    return fs


class GridFeatureExtractor(TransformerMixin, BaseEstimator):
    """Turn a raw scan into a :class:`FeatureSet`.

    Stateless apart from the grid shape resolved in :meth:`fit`; ``transform``
    accepts a single (n, 3) cloud.
    """

    def __init__(
        self,
        sensor=None,
        lam=2,
        sigma_edge=0.05,
        sigma_plane=0.01,
        max_edges=150,
        max_planars=400,
        range_margin=0.02,
        max_cells=200,
        min_neighbors=None,
    ):
        self.sensor = sensor
        self.lam = lam
        self.sigma_edge = sigma_edge
        self.sigma_plane = sigma_plane
        self.max_edges = max_edges
        self.max_planars = max_planars
        self.range_margin = range_margin
        self.max_cells = max_cells
        self.min_neighbors = min_neighbors

    def fit(self, X=None, y=None):
        self.sensor_ = self.sensor if self.sensor is not None else SensorSpec()
        if not isinstance(self.sensor_, SensorSpec):
            raise ValidationError("sensor must be a SensorSpec", "sensor")
        check_positive(self.lam, "lam", integer=True)
        check_positive(self.max_edges, "max_edges", integer=True, allow_zero=True)
        check_positive(self.max_planars, "max_planars", integer=True, allow_zero=True)
        if not 0 <= self.range_margin < 1:
            raise ValidationError("must lie in [0, 1)", "range_margin")
        if not self.sigma_plane < self.sigma_edge:
            raise ValidationError("sigma_plane must be < sigma_edge", "sigma_plane")
        self.grid_shape_ = grid_shape(self.sensor_, self.max_cells)
        return self

    def _ensure_fitted(self):
        if not hasattr(self, "grid_shape_"):
            self.fit()

    def grid(self, X) -> CellGrid:
        """Range-filter, project and score ``X``; returns the scored grid."""
        self._ensure_fitted()
        P = filter_range(X, self.sensor_, self.range_margin)
        grid = project_to_grid(P, self.sensor_, self.grid_shape_)
        return compute_smoothness(grid, self.lam, self.min_neighbors)

    def transform(self, X, frame_index=0, timestamp=0.0, warn=True) -> FeatureSet:
        grid = self.grid(X)
        return classify_features(
            grid,
            self.sigma_edge,
            self.sigma_plane,
            self.max_edges,
            self.max_planars,
            frame_index=frame_index,
            timestamp=timestamp,
            warn=warn,
        )
