"""Command-line driver: ``solidslam sim | run | eval``.

Exit codes: 0 success, 2 invalid input, 3 too many low-confidence frames,
4 trajectories without enough timestamp overlap.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import sim
from .config import load_config, merge_config
from .dataio import (
    GROUNDTRUTH_NAME,
    SENSOR_NAME,
    playback,
    read_trajectory,
    write_pointcloud,
    write_trajectory,
)
from .exceptions import InsufficientOverlap, SolidSlamError
from .pipeline import SolidStateSLAM

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_LOW_CONFIDENCE = 3
EXIT_NO_OVERLAP = 4

LOW_CONFIDENCE_FRACTION = 0.2

logger = logging.getLogger("solidslam")


def _scene(arg: str) -> sim.Scene:
    if arg == "room":
        return sim.room_scene()
    return sim.load_scene(arg)


def _waypoints(arg: str, seed: int):
    if arg == "loop":
        return sim.loop_trajectory()
    if arg == "rotation":
        return sim.rotation_trajectory(seed)
    if arg == "perimeter":
        return sim.perimeter_trajectory()
    return read_trajectory(arg)


def cmd_sim(args) -> int:
    scene = _scene(args.scene)
    waypoints = _waypoints(args.trajectory, args.seed)
    if args.max_frames is not None:
        n = max(1, min(len(waypoints), args.max_frames))
        waypoints = sim.Trajectory(waypoints.timestamps[:n], waypoints.poses[:n])
    spec = sim.ScanSpec(noise_sigma=args.noise, seed=args.seed)
    out = sim.generate_sequence(scene, waypoints, args.rate, spec, args.out)
    print(f"wrote {out}")
    return EXIT_OK


def _run_config(dataset: Path, args):
    sensor_file = dataset / SENSOR_NAME
    config = load_config(sensor_file) if sensor_file.exists() else None
    if config is None:
        from .config import Config

        config = Config()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise SolidSlamError(f"cannot read config: {exc}") from None
        config = merge_config(config, text)
    if args.occupancy_threshold is not None:
        mapping = dataclasses.replace(config.mapping, occupancy_threshold=args.occupancy_threshold)
        config = config.replace(mapping=mapping)
    return config


def cmd_run(args) -> int:
    dataset = Path(args.dataset)
    config = _run_config(dataset, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    slam = SolidStateSLAM(config).fit(playback(dataset), max_frames=args.max_frames)
    report = slam.report()

    report.trajectory_path = str(out / "trajectory.txt")
    write_trajectory(slam.trajectory_, report.trajectory_path)
    occupied = slam.mapper_.export_occupied()
    report.map_path = str(out / "map.pcd")
    write_pointcloud(report.map_path, occupied)
    report.map_points = len(occupied)

    gt_file = dataset / GROUNDTRUTH_NAME
    if gt_file.exists():
        try:
            result = sim.ate(slam.trajectory_, read_trajectory(gt_file))
            report.ate_rmse, report.ate_max = result.rmse, result.max
        except InsufficientOverlap as exc:
            logger.warning("ATE skipped: %s", exc)

    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    if report.frames and report.low_confidence > LOW_CONFIDENCE_FRACTION * report.frames:
        print(
            f"error: {report.low_confidence}/{report.frames} frames low-confidence",
            file=sys.stderr,
        )
        return EXIT_LOW_CONFIDENCE
    return EXIT_OK


def cmd_eval(args) -> int:
    est = read_trajectory(args.estimated)
    gt = read_trajectory(args.groundtruth)
    result = sim.ate(est, gt)
    print(f"ate_rmse = {result.rmse:.6f}")
    print(f"ate_max = {result.max:.6f}")
    print(f"poses = {result.count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solidslam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="per-frame log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="generate a synthetic dataset")
    p.add_argument("scene", help="'room' or a scene JSON file")
    p.add_argument("trajectory", help="'loop', 'rotation', 'perimeter' or a trajectory file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=30.0, help="scan rate in Hz")
    p.add_argument("--noise", type=float, default=0.014, help="range noise sigma in meters")
    p.add_argument("--max-frames", type=int, default=None)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("run", help="run odometry and mapping on a dataset")
    p.add_argument("dataset")
    p.add_argument("--config", default=None, help="INI file applied over the dataset's sensor.ini")
    p.add_argument("--out", default="out")
    p.add_argument("--occupancy-threshold", type=float, default=None)
    p.add_argument("--max-frames", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="absolute trajectory error of an estimate")
    p.add_argument("estimated")
    p.add_argument("groundtruth")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except InsufficientOverlap as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except (SolidSlamError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
