"""Dataset files: ASCII point clouds, trajectories and directory playback.

Trajectory lines are ``timestamp tx ty tz qx qy qz qw`` with a unit
quaternion stored scalar-last, the layout read by the usual SLAM
evaluation scripts.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import EmptyDataset, MissingHeader, ParseError, ValidationError
from .se3 import Pose
from .validation import check_cloud

logger = logging.getLogger(__name__)

FRAME_SUFFIX = ".pcd"
GROUNDTRUTH_NAME = "groundtruth.txt"
SENSOR_NAME = "sensor.ini"
_FRAME_RE = re.compile(r"^\d+\.pcd$")


@dataclass
class Trajectory:
    """Timestamped poses, timestamps strictly increasing."""

    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValidationError("timestamps and poses differ in length", "trajectory")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValidationError("timestamps must be strictly increasing", "trajectory")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps.tolist(), self.poses))

    def append(self, timestamp: float, pose: Pose):
        if len(self.timestamps) and timestamp <= self.timestamps[-1]:
            raise ValidationError(
                f"timestamp {timestamp} not after {self.timestamps[-1]}", "trajectory"
            )
        self.timestamps = np.append(self.timestamps, float(timestamp))
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])


def _quat_xyzw(R) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat()
    if q[3] < 0:
        q = -q
    return q


def format_pose_line(timestamp: float, pose: Pose) -> str:
    values = np.concatenate([pose.translation, _quat_xyzw(pose.rotation)]) + 0.0
    return f"{timestamp:.9f} " + " ".join(f"{v:.9g}" for v in values)


def write_trajectory(traj: Trajectory, path) -> None:
    lines = [format_pose_line(t, T) for t, T in traj]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    stamps, poses = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", lineno, path)
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise ParseError(f"non-numeric field in {line!r}", lineno, path) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", lineno, path)
            q = np.array(vals[4:])
            qn = np.linalg.norm(q)
            if qn < 1e-6:
                raise ParseError("zero quaternion", lineno, path)
            stamps.append(vals[0])
            poses.append(Pose(Rotation.from_quat(q / qn).as_matrix(), vals[1:4]))
    try:
        return Trajectory(stamps, poses)
    except ValidationError as exc:
        raise ParseError(str(exc), path=path) from None


class ScanRecord(NamedTuple):
    points: np.ndarray
    timestamp: float | None


def write_pointcloud(path, cloud, timestamp: float | None = None) -> None:
    """Write an ASCII PCD file (x y z float fields)."""
    P = check_cloud(cloud)
    n = len(P)
    header = ["# .PCD v0.7 - Point Cloud Data file format"]
    if timestamp is not None:
        header.append(f"# timestamp {timestamp:.9f}")
    header += [
        "VERSION 0.7",
        "FIELDS x y z",
        "SIZE 4 4 4",
        "TYPE F F F",
        "COUNT 1 1 1",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    body = "\n".join(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in P.tolist())
    Path(path).write_text("\n".join(header) + "\n" + (body + "\n" if n else ""))


def read_pointcloud(path, diagnostics: dict | None = None) -> ScanRecord:
    """Parse an ASCII PCD-style file.

    Lines of ``nan`` coordinates are skipped; the number skipped is stored in
    ``diagnostics["skipped"]`` when a dict is passed.
    """
    path = Path(path)
    timestamp = None
    fields = None
    npoints = None
    with path.open() as fh:
        lines = fh.read().splitlines()

    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        if raw.startswith("#"):
            m = re.match(r"#\s*timestamp\s+(\S+)", raw)
            if m:
                try:
                    timestamp = float(m.group(1))
                except ValueError:
                    raise ParseError("bad timestamp", i, path) from None
            continue
        key, _, rest = raw.partition(" ")
        key = key.upper()
        if key == "FIELDS":
            fields = rest.split()
        elif key == "POINTS":
            try:
                npoints = int(rest)
            except ValueError:
                raise ParseError(f"bad POINTS value {rest!r}", i, path) from None
            if npoints < 0:
                raise ParseError("negative POINTS", i, path)
        elif key == "DATA":
            if rest.strip().lower() != "ascii":
                raise ParseError(f"unsupported DATA {rest.strip()!r}", i, path)
            break
        elif key in {"VERSION", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT"}:
            continue
        else:
            # Header without a DATA line: the first numeric row starts the body.
            i -= 1
            break

    if fields is None:
        raise MissingHeader("missing FIELDS line", path=path)
    if npoints is None:
        raise MissingHeader("missing POINTS line", path=path)
    try:
        cols = [fields.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise MissingHeader(f"FIELDS must include x y z, got {fields}", path=path) from None

    pts = []
    skipped = 0
    seen = 0
    for j in range(i, len(lines)):
        raw = lines[j].strip()
        if not raw or raw.startswith("#"):
            continue
        lineno = j + 1
        parts = raw.split()
        if len(parts) != len(fields):
            raise ParseError(f"expected {len(fields)} values, got {len(parts)}", lineno, path)
        try:
            xyz = [float(parts[c]) for c in cols]
        except ValueError:
            raise ParseError(f"non-numeric value in {raw!r}", lineno, path) from None
        seen += 1
        if seen > npoints:
            raise ParseError(f"more than POINTS={npoints} data lines", lineno, path)
        if not all(math.isfinite(v) for v in xyz):
            skipped += 1
            continue
        pts.append(xyz)
    if seen != npoints:
        raise ParseError(f"POINTS={npoints} but found {seen} data lines", path=path)
    if skipped:
        logger.debug("%s: skipped %d non-finite points", path, skipped)
    if diagnostics is not None:
        diagnostics["skipped"] = skipped
    cloud = np.array(pts, dtype=float).reshape(-1, 3)
    return ScanRecord(cloud, timestamp)


def frame_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyDataset(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if _FRAME_RE.match(p.name))
    if not files:
        raise EmptyDataset(f"no frame files in {directory}")
    return files


def frame_name(index: int, width: int = 6) -> str:
    return f"{index:0{width}d}{FRAME_SUFFIX}"


def playback(directory) -> Iterator[ScanRecord]:
    """Yield ``(cloud, timestamp)`` per frame in filename order.

    Frames without a timestamp comment get their position in the sequence.
    """
    for k, path in enumerate(frame_files(directory)):
        cloud, ts = read_pointcloud(path)
        yield ScanRecord(cloud, float(k) if ts is None else ts)
