"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are also collected into a summary section at the end of the
pytest run. Tolerances are fixed here and are not tuned per run.
"""
import functools
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, cached_run, random_cp, random_pose
from gcslam.association import CHI2_3DOF_95, plane_innovation
from gcslam.errors import SingularPlane
from gcslam.ground import GroundObservation, _residuals, refine_plane_wls, residual_jacobian
from gcslam.pipeline import (
    correct_trajectory,
    evaluate_ate,
    landmark_planes_world,
    run_odometry,
    run_slam,
)
from gcslam.plane import (
    PlaneCP,
    cp_to_hf,
    hf_to_cp,
    transform_cp,
    transform_plane,
    transform_plane_jacobian,
)
from gcslam.pose_graph import plane_factor_jacobians, plane_residual
from gcslam.se3 import Pose, compose, inverse, so3_exp

JACOBIAN_CASES = 1000
JACOBIAN_TOL = 1e-5


def _emit(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def criterion(n: int, limit_s: float | None = None):
    """The wrapped test returns (ok, detail); this prints the verdict and asserts it."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                _emit(n, False, f"error: {exc!r}")
                raise
            elapsed = time.perf_counter() - t0
            if limit_s is not None:
                detail += f"; runtime {elapsed:.1f} s (limit {limit_s:.0f} s)"
                ok = ok and elapsed < limit_s
            _emit(n, ok, detail)
            assert ok, detail

        return wrapper

    return deco


def _numeric(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h))
    return np.array(cols).T


def _rel(J, Jn) -> float:
    return float(np.linalg.norm(J - Jn) / max(np.linalg.norm(Jn), 1e-12))


def _triple(rng, zero_translation=False):
    while True:
        pw = PlaneCP(random_cp(rng, 2.0, 15.0))
        T = random_pose(rng, max_trans=3.0)
        if zero_translation:
            T = Pose(T.rotation, np.zeros(3))
        try:
            obs = transform_plane(pw, T)
        except SingularPlane:
            continue
        return pw, T, PlaneCP(obs.cp + rng.normal(scale=0.05, size=3))


# ---------------------------------------------------------------- 1


@criterion(1, limit_s=10.0)
def test_jacobian_suite():
    rng = np.random.default_rng(1)
    worst = {}

    errs = []
    for _ in range(JACOBIAN_CASES):
        cp = random_cp(rng, 0.5, 10.0)
        p = rng.uniform(-10, 10, (1, 3))
        errs.append(_rel(residual_jacobian(p, cp), _numeric(lambda c: _residuals(p, c), cp)))
    worst["ground residual"] = max(errs)

    errs = []
    for _ in range(JACOBIAN_CASES):
        p = PlaneCP(random_cp(rng, 1.0, 20.0))
        T = random_pose(rng, max_trans=0.5)
        errs.append(_rel(transform_plane_jacobian(p, T), _numeric(lambda c: transform_cp(c, T), p.cp)))
    worst["plane transform"] = max(errs)

    e_plane, e_trans, e_rot = [], [], []
    for _ in range(JACOBIAN_CASES):
        pw, T, obs = _triple(rng)
        Jp, _, Jt = plane_factor_jacobians(pw, T, obs)
        e_plane.append(_rel(Jp, _numeric(lambda c: plane_residual(c, T, obs), pw.cp)))
        e_trans.append(_rel(Jt, _numeric(lambda t: plane_residual(pw, Pose(T.rotation, t), obs), T.translation)))
        pw0, T0, obs0 = _triple(rng, zero_translation=True)
        _, Jr, _ = plane_factor_jacobians(pw0, T0, obs0)
        Jrn = _numeric(lambda w: plane_residual(pw0, Pose(so3_exp(w) @ T0.rotation, T0.translation), obs0), np.zeros(3))
        e_rot.append(_rel(Jr, Jrn))
    worst["landmark block"] = max(e_plane)
    worst["translation block"] = max(e_trans)
    worst["rotation block at t=0"] = max(e_rot)

    ok = all(v < JACOBIAN_TOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, f"max relative FD error over {JACOBIAN_CASES} cases each: {detail} (tol {JACOBIAN_TOL:g})"


# ---------------------------------------------------------------- 2


@criterion(2)
def test_plane_algebra():
    rng = np.random.default_rng(2)
    rt = 0.0
    for d in np.r_[0.1, 200.0, rng.uniform(0.1, 200.0, 98)]:
        n = rng.normal(size=3)
        cp = n / np.linalg.norm(n) * d
        rt = max(rt, float(np.abs(hf_to_cp(cp_to_hf(PlaneCP(cp))).cp - cp).max() / max(d, 1.0)))
    comp = memb = 0.0
    done = 0
    while done < 100:
        p = PlaneCP(random_cp(rng))
        T1, T2 = random_pose(rng, max_trans=3.0), random_pose(rng, max_trans=3.0)
        try:
            two = transform_plane(transform_plane(p, T1), T2)
            one = transform_plane(p, compose(T1, T2))
            q = transform_plane(p, T1)
        except SingularPlane:
            continue
        comp = max(comp, float(np.abs(two.cp - one.cp).max()))
        h = cp_to_hf(p)
        u = np.cross(h.normal, rng.normal(size=3))
        v = np.cross(h.normal, u)
        on = h.dist * h.normal + rng.uniform(-10, 10, (10, 1)) * u + rng.uniform(-10, 10, (10, 1)) * v
        memb = max(memb, float(np.abs(q.signed_distance(inverse(T1).apply(on))).max()))
        done += 1
    worked = transform_plane(PlaneCP([0.0, 0.0, -1.5]), Pose(np.eye(3), [0.0, 0.0, 1.0])).cp
    exact = bool(np.array_equal(worked, [0.0, 0.0, -2.5]))
    ok = rt <= 1e-12 and comp <= 1e-9 and memb <= 1e-9 and exact
    return ok, (
        f"CP/HF round trip {rt:.1e} (tol 1e-12), composition {comp:.1e} and membership {memb:.1e} "
        f"over 100 cases (tol 1e-9), worked example -> {worked.tolist()}"
    )


# ---------------------------------------------------------------- 3


def _plane_points(rng, cp, n, sigma=0.02, extent=8.0):
    d = np.linalg.norm(cp)
    nrm = cp / d
    u = np.cross(nrm, [1.0, 0.3, 0.1])
    u /= np.linalg.norm(u)
    v = np.cross(nrm, u)
    a, b = rng.uniform(-extent, extent, (2, n, 1))
    return cp + a * u + b * v + rng.normal(scale=sigma, size=(n, 1)) * nrm


def _tls(points) -> np.ndarray:
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c)
    n = Vt[-1]
    return (n @ c) * n


@criterion(3, limit_s=30.0)
def test_ground_fit_oracle():
    rng = np.random.default_rng(3)
    sigma = 0.02
    worst = 0.0
    for _ in range(50):
        cp = random_cp(rng, 1.0, 5.0)
        pts = _plane_points(rng, cp, 1000, sigma)
        cov = np.tile(np.eye(3) * sigma**2, (1000, 1, 1))
        seed = PlaneCP(cp + rng.normal(scale=0.02, size=3))
        worst = max(worst, float(np.abs(refine_plane_wls(pts, cov, seed).plane.cp - _tls(pts)).max()))
    ratios, emp = [], {500: [], 1000: []}
    cp = np.array([0.0, 0.2, -1.5])
    for _ in range(200):
        tr = {}
        for n in (500, 1000):
            pts = _plane_points(rng, cp, n, sigma)
            obs = refine_plane_wls(pts, np.tile(np.eye(3) * sigma**2, (n, 1, 1)), PlaneCP(cp))
            tr[n] = np.trace(obs.covariance)
            emp[n].append(obs.plane.cp)
        ratios.append(tr[1000] / tr[500])
    ratio = float(np.mean(ratios))
    emp_ratio = np.trace(np.cov(np.array(emp[1000]).T)) / np.trace(np.cov(np.array(emp[500]).T))
    ok = worst <= 1e-3 and abs(ratio - 0.5) <= 0.05
    return ok, (
        f"max |WLS - TLS| {worst:.1e} m over 50 planes (tol 1e-3); covariance trace ratio 2N/N "
        f"{ratio:.3f} (0.5 +- 10%), Monte-Carlo scatter ratio {emp_ratio:.3f}"
    )


# ---------------------------------------------------------------- 4


@criterion(4)
def test_innovation_statistics():
    rng = np.random.default_rng(4)
    true_i = np.array([0.05, -0.02, -1.5])
    T = Pose.from_rotvec([0.0, 0.01, 0.1], [2.0, 0.1, 0.02])  # frame i -> frame i+1
    true_i1 = transform_plane(PlaneCP(true_i), inverse(T)).cp
    cov = {}
    for key, cp in (("i", true_i), ("i1", true_i1)):
        pts = _plane_points(rng, cp, 800, 0.02)
        cov[key] = refine_plane_wls(pts, np.tile(np.eye(3) * 4e-4, (800, 1, 1)), PlaneCP(cp)).covariance
    Li, Li1 = np.linalg.cholesky(cov["i"]), np.linalg.cholesky(cov["i1"])
    m = np.empty(10_000)
    for k in range(len(m)):
        a = GroundObservation(PlaneCP(true_i + Li @ rng.normal(size=3)), cov["i"], 800, 0.0)
        b = GroundObservation(PlaneCP(true_i1 + Li1 @ rng.normal(size=3)), cov["i1"], 800, 0.0)
        m[k] = plane_innovation(a, b, T).mahalanobis
    mean = float(m.mean())
    drops = []
    for k in range(1000):
        a = GroundObservation(PlaneCP(true_i + Li @ rng.normal(size=3)), cov["i"], 800, 0.0)
        lower = transform_plane(PlaneCP(true_i + [0, 0, -3.0]), inverse(T)).cp
        b = GroundObservation(PlaneCP(lower + Li1 @ rng.normal(size=3)), cov["i1"], 800, 0.0)
        drops.append(plane_innovation(a, b, T).mahalanobis)
        drops.append(plane_innovation(a, b, T, pose_noise_var=1e-4).mahalanobis)
    ok = abs(mean - 3.0) <= 0.3 and min(drops) > CHI2_3DOF_95
    return ok, (
        f"mean Mahalanobis {mean:.3f} over 10^4 trials (3.0 +- 0.3); 3 m floor drop minimum "
        f"{min(drops):.3g} over 2000 trials (gate {CHI2_3DOF_95:.3f})"
    )


# ---------------------------------------------------------------- 5


def _z_errors(poses, gt):
    return np.array([p.translation[2] - g.translation[2] for p, g in zip(poses, gt)])


@criterion(5, limit_s=300.0)
def test_drift_compression():
    cfg, _, run = cached_run("bowl_road", sim_frames=200, sim_bias_max=0.2)
    res = run_slam(run.scans, run.priors, cfg, ground_constraints=True, loop_closure=False,
                   initial_pose=run.ground_truth[0])
    lo = _z_errors(res.odometry.poses, run.ground_truth)
    gc = _z_errors(res.poses, run.ground_truth)
    sampled = lo[::10]
    dip = float((np.maximum.accumulate(lo) - lo).max())
    monotone = bool(np.all(np.diff(sampled) > 0)) and dip < 0.01 and lo[-1] > 0
    ratio = abs(gc[-1]) / abs(lo[-1])
    ok = monotone and ratio <= 0.10 and len(run.scans) == 200
    return ok, (
        f"bowl_road 200 scans: LO final z error {lo[-1]:+.3f} m, monotone upward {monotone} "
        f"(largest dip {dip * 100:.2f} cm); ground-constrained {gc[-1]:+.3f} m = {ratio:.1%} of LO (limit 10%)"
    )


# ---------------------------------------------------------------- 6


@criterion(6)
def test_sliding_map_efficiency():
    cfg, _, run = cached_run("corridor", sim_frames=50)
    obs = run_odometry(run.scans, run.priors, cfg, mode="observation", initial_pose=run.ground_truth[0])
    rng_ = run_odometry(run.scans, run.priors, cfg, mode="range", initial_pose=run.ground_truth[0])
    ratio = obs.point_counts.mean() / rng_.point_counts.mean()
    maps = [obs.final_map] + [kf.local_map for kf in obs.keyframes]
    worst = max(float(m.traces().max()) for m in maps)
    ok = ratio < 0.9 and worst <= cfg.elimination_threshold and len(run.scans) == 50
    return ok, (
        f"corridor 50 scans: mean map points observation {obs.point_counts.mean():.0f} vs range "
        f"{rng_.point_counts.mean():.0f}, ratio {ratio:.3f} (limit 0.9); max retained trace {worst:.4f} "
        f"(threshold {cfg.elimination_threshold})"
    )


# ---------------------------------------------------------------- 7


def _floor_geometry(planes):
    (a, b) = planes
    cos = min(1.0, abs(float(a.normal @ b.normal)))
    angle = float(np.degrees(np.arccos(cos)))
    spacing = abs(a.dist - np.sign(a.normal @ b.normal) * b.dist)
    return angle, spacing


def _within(angle, spacing):
    return angle <= 0.5 and abs(spacing - 3.0) <= 0.02


@criterion(7)
def test_multi_floor_consistency():
    cfg, _, run = cached_run("two_floor_garage", sim_bias_max=0.2)
    res = run_slam(run.scans, run.priors, cfg, initial_pose=run.ground_truth[0])
    planes = list(landmark_planes_world(res).values())
    if len(planes) != 2:
        return False, f"{len(planes)} plane landmarks, expected exactly 2"
    angle, spacing = _floor_geometry(planes)
    # LO-only baseline: the same landmarks placed with odometry poses, before any optimization
    base = res.odometry.keyframes[0].pose
    lo_planes = []
    for node in res.graphs["initial"].planes.values():
        hf = cp_to_hf(node.plane)
        n = base.rotation @ hf.normal
        lo_planes.append(type(hf)(n, hf.dist + float(n @ base.translation)))
    lo_angle, lo_spacing = _floor_geometry(lo_planes)
    ok = _within(angle, spacing) and not _within(lo_angle, lo_spacing)
    return ok, (
        f"2 landmarks; optimized angle {angle:.3f} deg, spacing {spacing:.4f} m (0.5 deg, 3.0 +- 0.02 m); "
        f"LO-only angle {lo_angle:.3f} deg, spacing {lo_spacing:.4f} m (violates: {not _within(lo_angle, lo_spacing)})"
    )


# ---------------------------------------------------------------- 8


@criterion(8)
def test_loop_closure(noisy_loop):
    cfg, run, res = noisy_loop
    pre = correct_trajectory(res.odometry, res.keyframes, res.graphs["ground"], res.initial_pose)
    ate_pre = evaluate_ate(res.timestamps, pre, run.timestamps, run.ground_truth).rmse_total_m
    ate_post = evaluate_ate(res.timestamps, res.poses, run.timestamps, run.ground_truth).rmse_total_m
    monotone = {}
    for step, rep in res.reports.items():
        c = np.array(rep.costs)
        print(f"  {step} LM costs: " + " ".join(f"{v:.6g}" for v in c))
        monotone[step] = bool(np.all(np.diff(c) <= 0))
    ok = len(res.loop_factors) >= 1 and ate_post <= 0.5 * ate_pre and all(monotone.values()) and "loop" in res.reports
    pairs = [f.node_ids for f in res.loop_factors]
    return ok, (
        f"{len(pairs)} verified loop factors {pairs}; ATE pre-loop {ate_pre:.3f} m, post {ate_post:.3f} m "
        f"({ate_post / ate_pre:.0%}, limit 50%); LM cost non-increasing {monotone}"
    )


# ---------------------------------------------------------------- 9


@criterion(9)
def test_cli_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("sim_frames = 40\nseed = 11\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cmd = [sys.executable, "-m", "gcslam.cli", "slam", "--scenario", "square_loop", "--config", str(cfg), "--out", str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        outs.append(out)
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            for name in ("trajectory.tum", "graph.txt", "lo_trajectory.tum", "map.ply", "landmarks.txt")}
    return all(same.values()), f"two CLI slam runs with seed 11, byte-identical: {same}"


# ---------------------------------------------------------------- 10


@pytest.mark.skipif(not os.environ.get("GCSLAM_KITTI_DIR"), reason="optional: set GCSLAM_KITTI_DIR to a converted sequence")
def test_optional_dataset_hook(tmp_path):
    root = Path(os.environ["GCSLAM_KITTI_DIR"])
    out = tmp_path / "kitti"
    subprocess.run([sys.executable, "-m", "gcslam.cli", "slam", "--scans", str(root / "scans.gcs"),
                    "--out", str(out)], check=True)
    r = subprocess.run([sys.executable, "-m", "gcslam.cli", "evaluate", "--estimate", str(out / "trajectory.tum"),
                        "--groundtruth", str(root / "groundtruth.tum"), "--align"], check=True, capture_output=True, text=True)
    keys = [line.split(" = ")[0] for line in r.stdout.strip().splitlines()]
    print("criterion 10: not gated; reported " + ", ".join(keys))
    assert "rmse_total_m" in keys
