"""End-to-end estimator: features -> scan-to-map odometry -> keyframe occupancy map."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .config import Config
from .dataio import Trajectory
from .features import GridFeatureExtractor
from .mapping import OccupancyMapper
from .odometry import ScanToMapOdometry
from .validation import check_cloud

logger = logging.getLogger(__name__)


@dataclass
class RunReport:
    frames: int = 0
    keyframes: int = 0
    low_confidence: int = 0
    mean_latency_ms: float = 0.0
    max_latency_ms: float = 0.0
    trajectory_path: str = ""
    map_path: str = ""
    map_points: int = 0
    ate_rmse: float | None = None
    ate_max: float | None = None

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, float):
                v = f"{v:.6f}"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


class SolidStateSLAM(BaseEstimator):
    """Run extraction, odometry and mapping over a stream of scans.

    ``fit`` takes an iterable of ``(cloud, timestamp)`` pairs. Fitted
    attributes: ``trajectory_`` (:class:`Trajectory`), ``mapper_``,
    ``odometry_``, ``latencies_ms_`` and ``keyframe_flags_``.
    """

    def __init__(self, config=None, mapping=True):
        self.config = config
        self.mapping = mapping

    def _reset(self):
        cfg = self.config if self.config is not None else Config()
        self.config_ = cfg
        self.extractor_ = GridFeatureExtractor(sensor=cfg.sensor, **dataclasses.asdict(cfg.extraction)).fit()
        self.odometry_ = ScanToMapOdometry(**dataclasses.asdict(cfg.odometry))
        self.odometry_._reset()
        self.mapper_ = OccupancyMapper(**dataclasses.asdict(cfg.mapping))
        self.mapper_._reset()
        self.trajectory_ = Trajectory()
        self.latencies_ms_ = []
        self.keyframe_flags_ = []
        self.n_features_ = []

    def fit(self, X, y=None, max_frames=None):
        self._reset()
        for k, (cloud, timestamp) in enumerate(X):
            if max_frames is not None and k >= max_frames:
                break
            self.partial_fit(cloud, timestamp)
        return self

    def partial_fit(self, cloud, timestamp):
        if not hasattr(self, "trajectory_"):
            self._reset()
        start = time.perf_counter()
        P = check_cloud(cloud, allow_nonfinite=True)
        k = len(self.trajectory_)
        features = self.extractor_.transform(P, frame_index=k, timestamp=timestamp, warn=False)
        self.odometry_.partial_fit(features)
        pose = self.odometry_.poses_[-1]
        is_kf = False
        if self.mapping:
            sensor = self.extractor_.sensor_
            kept = P[np.isfinite(P).all(axis=1)]
            r = np.linalg.norm(kept, axis=1)
            kept = kept[(r >= sensor.range_min) & (r <= sensor.range_max * (1 - self.extractor_.range_margin))]
            is_kf = self.mapper_.partial_fit(kept, pose, timestamp)
        elapsed = (time.perf_counter() - start) * 1e3
        diag = self.odometry_.diagnostics_[-1]
        diag.elapsed_ms = elapsed
        logger.info("%s keyframe=%d", diag.log_line(), int(is_kf))
        self.trajectory_.append(timestamp, pose)
        self.latencies_ms_.append(elapsed)
        self.keyframe_flags_.append(is_kf)
        self.n_features_.append((len(features.edges), len(features.planars)))
        return self

    def predict(self, X):
        """Occupancy probability at world points ``X``."""
        return self.mapper_.predict(X)

    @property
    def low_confidence_count(self) -> int:
        return sum(d.low_confidence for d in self.odometry_.diagnostics_)

    def report(self) -> RunReport:
        lat = np.asarray(self.latencies_ms_) if self.latencies_ms_ else np.zeros(1)
        return RunReport(
            frames=len(self.trajectory_),
            keyframes=int(sum(self.keyframe_flags_)),
            low_confidence=self.low_confidence_count,
            mean_latency_ms=float(lat.mean()),
            max_latency_ms=float(lat.max()),
        )
