"""Command-line entry point: simulate, odometry, slam, evaluate."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import GcslamError
from .pipeline import (
    PipelineConfig,
    assemble_map,
    evaluate_ate,
    landmark_planes_world,
    run_odometry,
    run_slam,
    simulate_scenario,
)
from .pose_graph import write_graph
from .registration import Scan, beam_covariance
from .se3 import Pose, compose, inverse

log = logging.getLogger("gcslam")


def _config(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if args.config:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig.from_dict(overrides)


def _write_simulation(out: Path, run) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_scans(out / "scans.gcs", run.scans)
    io.write_tum(out / "groundtruth.tum", run.timestamps, run.ground_truth)
    # the prior is stored integrated from the true start pose; per-step
    # motions are recovered as differences of consecutive poses
    integrated = [run.ground_truth[0]]
    for step in run.priors[1:]:
        integrated.append(compose(integrated[-1], step))
    io.write_tum(out / "prior.tum", run.timestamps, integrated)


def _load_inputs(args, cfg: PipelineConfig):
    """(scans, per-step priors, initial pose, ground truth or None)."""
    if args.scenario:
        _, _, run = simulate_scenario(args.scenario, cfg)
        if args.out:
            _write_simulation(Path(args.out), run)
        return run.scans, run.priors, run.ground_truth[0], (run.timestamps, run.ground_truth)
    if not args.scans:
        raise GcslamError("either --scenario or --scans is required")
    scans = [
        Scan(pts, beam_covariance(pts, cfg.range_noise_sigma), ts) for _, ts, pts in io.iter_scans(args.scans)
    ]
    priors, initial = None, None
    if args.prior:
        _, prior_poses = io.read_tum(args.prior)
        if len(prior_poses) != len(scans):
            raise GcslamError(f"prior has {len(prior_poses)} poses for {len(scans)} scans")
        priors = [Pose.identity()] + [compose(inverse(a), b) for a, b in zip(prior_poses[:-1], prior_poses[1:])]
        initial = prior_poses[0]
    return scans, priors, initial, None


def _write_stats(path: Path, odo) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "timestamp", "map_points", "time_ms"])
        for k, (ts, n, ms) in enumerate(zip(odo.timestamps, odo.point_counts, odo.frame_times_ms)):
            w.writerow([k, f"{ts:.6f}", int(n), f"{ms:.3f}"])


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if not args.scenario:
        raise GcslamError("--scenario is required")
    _, _, run = simulate_scenario(args.scenario, cfg)
    _write_simulation(Path(args.out), run)
    print(f"wrote {len(run.scans)} scans to {args.out}")
    return 0


def cmd_odometry(args) -> int:
    cfg = _config(args)
    scans, priors, initial, _ = _load_inputs(args, cfg)
    odo = run_odometry(scans, priors, cfg, initial_pose=initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_tum(out / "trajectory.tum", odo.timestamps, odo.poses)
    _write_stats(out / "stats.csv", odo)
    print(f"frames = {len(odo.poses)}")
    print(f"mean_map_points = {odo.point_counts.mean():.1f}")
    return 0


def cmd_slam(args) -> int:
    cfg = _config(args)
    scans, priors, initial, _ = _load_inputs(args, cfg)
    res = run_slam(scans, priors, cfg, ground_constraints=not args.no_ground, loop_closure=not args.no_loop, initial_pose=initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_tum(out / "trajectory.tum", res.timestamps, res.poses)
    io.write_tum(out / "lo_trajectory.tum", res.timestamps, res.odometry.poses)
    _write_stats(out / "stats.csv", res.odometry)
    write_graph(res.graph, out / "graph.txt")
    io.write_ply(out / "map.ply", assemble_map(res))
    with open(out / "landmarks.txt", "w") as fh:
        fh.write("# id nx ny nz d   (n . p = d in the trajectory frame)\n")
        for lid, hf in sorted(landmark_planes_world(res).items()):
            fh.write(" ".join([str(lid)] + [format(float(v), ".9f") for v in (*hf.normal, hf.dist)]) + "\n")
    print(f"keyframes = {len(res.keyframes)}")
    print(f"landmarks = {res.n_landmarks}")
    print(f"loop_closures = {len(res.loop_factors)}")
    return 0


def cmd_evaluate(args) -> int:
    est_ts, est = io.read_tum(args.estimate)
    gt_ts, gt = io.read_tum(args.groundtruth)
    report = evaluate_ate(est_ts, est, gt_ts, gt, align=args.align)
    text = report.as_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcslam", description="Ground-constrained LiDAR odometry and SLAM")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inputs=True):
        sp.add_argument("--config", help="plain-text 'key = value' configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--scenario", help="simulate this scenario instead of reading --scans")
        sp.add_argument("--out", help="output directory")
        if inputs:
            sp.add_argument("--scans", help="scan container file")
            sp.add_argument("--prior", help="TUM trajectory of the motion prior")
            sp.add_argument("--mode", choices=["range", "observation"], help="sliding-map maintenance")

    sp = sub.add_parser("simulate", help="generate a scenario's scans, ground truth and prior")
    common(sp, inputs=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("odometry", help="LiDAR odometry only")
    common(sp)
    sp.set_defaults(func=cmd_odometry)

    sp = sub.add_parser("slam", help="odometry + ground constraints + loop closure")
    common(sp)
    sp.add_argument("--no-ground", action="store_true", help="disable ground-plane factors")
    sp.add_argument("--no-loop", action="store_true", help="disable loop closure")
    sp.set_defaults(func=cmd_slam)

    sp = sub.add_parser("evaluate", help="absolute trajectory error of a TUM trajectory")
    sp.add_argument("--estimate", required=True)
    sp.add_argument("--groundtruth", required=True)
    sp.add_argument("--align", action="store_true", help="rigid (scale-free) alignment before scoring")
    sp.add_argument("--out", help="also write the report here")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.func in (cmd_simulate, cmd_odometry, cmd_slam) and not args.out:
        parser.error("--out is required")
    try:
        return args.func(args)
    except (GcslamError, OSError, ValueError) as exc:
        print(f"gcslam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
