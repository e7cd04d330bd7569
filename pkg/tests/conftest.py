import functools

import numpy as np
import pytest
from hypothesis import settings

from gcslam.pipeline import PipelineConfig, simulate_scenario
from gcslam.se3 import Pose, so3_exp

settings.register_profile("gcslam", max_examples=60, deadline=None)
settings.load_profile("gcslam")


def random_pose(rng, max_angle=np.pi, max_trans=5.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose(so3_exp(axis * rng.uniform(0, max_angle)), rng.uniform(-max_trans, max_trans, 3))


def random_cp(rng, lo=0.5, hi=20.0) -> np.ndarray:
    n = rng.normal(size=3)
    return n / np.linalg.norm(n) * rng.uniform(lo, hi)


def central_diff(f, x, h=1e-6):
    """Numeric Jacobian of f at x (columns follow x)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h)
    return J


def rel_err(A, B) -> float:
    return float(np.abs(A - B).max() / max(np.abs(B).max(), 1.0))


@functools.lru_cache(maxsize=None)
def cached_run(name: str, **kwargs):
    cfg = PipelineConfig.from_dict(kwargs)
    _, spec, run = simulate_scenario(name, cfg)
    return cfg, spec, run


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def box_room(rng, n=4000, half=(8.0, 6.0, 3.0), sigma=0.0):
    """Points on the six faces of an axis-aligned box centred at the origin."""
    hx, hy, hz = half
    faces = []
    per = n // 6
    for axis, h in ((0, hx), (1, hy), (2, hz)):
        for sign in (-1, 1):
            p = np.column_stack([rng.uniform(-hx, hx, per), rng.uniform(-hy, hy, per), rng.uniform(-hz, hz, per)])
            p[:, axis] = sign * h
            faces.append(p)
    pts = np.vstack(faces)
    return pts + rng.normal(scale=sigma, size=pts.shape) if sigma else pts


LOOP_NOISE = dict(odom_noise_rot_sigma=0.003, odom_noise_trans_sigma=0.02)


@pytest.fixture(scope="session")
def noisy_loop():
    """square_loop with injected odometry noise, full SLAM (shared, it takes ~25 s)."""
    from gcslam.pipeline import run_slam

    cfg, _, run = cached_run("square_loop", **LOOP_NOISE)
    res = run_slam(run.scans, run.priors, cfg, initial_pose=run.ground_truth[0])
    return cfg, run, res


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
