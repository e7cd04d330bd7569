"""Deterministic multi-floor LiDAR simulator.

Worlds are lists of bounded rectangles; scans are instantaneous snapshots
ray-cast from a pose with Gaussian range noise plus a systematic range bias
that grows with the beam's incidence angle on the surface it hits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfSpan, UnknownScenario
from .registration import Scan, beam_covariance
from .se3 import Pose, compose, inverse, rpy_to_rotation, so3_exp, so3_log

FLOOR, WALL, CEILING, RAMP = "floor", "wall", "ceiling", "ramp"


@dataclass(frozen=True, eq=False)
class Patch:
    """Rectangle centred at ``center`` spanning +-half_u along u and +-half_v along v."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float
    tag: str = WALL

    def __post_init__(self):
        if not (self.half_u > 0 and self.half_v > 0):
            raise ValueError("patch must have positive area")
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        u = u / np.linalg.norm(u)
        v = v - (v @ u) * u
        v = v / np.linalg.norm(v)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v


@dataclass
class WorldModel:
    patches: list = field(default_factory=list)

    def by_tag(self, tag: str) -> list:
        return [p for p in self.patches if p.tag == tag]


@dataclass
class SensorModel:
    n_beams_vertical: int = 40
    horizontal_step: float = np.deg2rad(1.0)
    max_range: float = 80.0
    range_noise_sigma: float = 0.02
    bias_max: float = 0.0
    rng_seed: int = 0
    elevation_min: float = np.deg2rad(-25.0)
    elevation_max: float = np.deg2rad(15.0)
    min_range: float = 1.0
    bias_form: str = "sin2"
    cov_floor: float = 1e-6

    def beam_directions(self) -> np.ndarray:
        el = np.linspace(self.elevation_min, self.elevation_max, self.n_beams_vertical)
        az = np.arange(0.0, 2.0 * np.pi - 1e-12, self.horizontal_step)
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def bias(incidence_angle, bias_max: float, form: str = "sin2"):
    """Range bias (m) for incidence angles in [0, pi/2); zero at normal incidence."""
    a = np.asarray(incidence_angle, dtype=float)
    if form == "sin2":
        out = bias_max * np.sin(a) ** 2
    elif form == "one_minus_cos":
        out = bias_max * (1.0 - np.cos(a))
    elif form == "theta2":
        out = bias_max * (a / (0.5 * np.pi)) ** 2
    else:
        raise ValueError(f"unknown bias form {form!r}")
    return out if out.ndim else float(out)


def raycast_scan(world: WorldModel, sensor: SensorModel, pose: Pose, stream: int = 0, timestamp: float = 0.0):
    """Return (Scan in the sensor frame, incidence angle per returned point).

    Randomness comes from a generator keyed on (rng_seed, stream) that draws
    one value per beam, so every beam's noise is fixed by its index.
    """
    dirs = sensor.beam_directions()
    dw = dirs @ pose.rotation.T
    o = pose.translation
    best = np.full(len(dirs), np.inf)
    cos_inc = np.zeros(len(dirs))
    for p in world.patches:
        n = p.normal
        denom = dw @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((p.center - o) @ n) / denom
        cand = np.flatnonzero((np.abs(denom) > 1e-12) & (s > 0) & (s < best))
        if len(cand) == 0:
            continue
        hit = o + s[cand, None] * dw[cand] - p.center
        inside = (np.abs(hit @ p.u) <= p.half_u) & (np.abs(hit @ p.v) <= p.half_v)
        cand = cand[inside]
        best[cand] = s[cand]
        cos_inc[cand] = np.abs(denom[cand])
    rng = np.random.default_rng([sensor.rng_seed, stream])
    noise = rng.normal(size=len(dirs)) * sensor.range_noise_sigma
    ok = np.isfinite(best) & (best <= sensor.max_range) & (best >= sensor.min_range)
    incidence = np.arccos(np.clip(cos_inc[ok], 0.0, 1.0))
    rng_meas = best[ok] + bias(incidence, sensor.bias_max, sensor.bias_form) + noise[ok]
    pts = dirs[ok] * rng_meas[:, None]
    cov = beam_covariance(pts, sensor.range_noise_sigma, sensor.cov_floor)
    return Scan(pts, cov, timestamp), incidence


# ---------------------------------------------------------------- trajectories


@dataclass
class TrajectorySpec:
    """Waypoint poses with piecewise constant-velocity interpolation."""

    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses) or len(self.times) < 1:
            raise ValueError("times and poses must be non-empty and equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def span(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])

    def pose_at(self, t: float) -> Pose:
        t0, t1 = self.span
        if t < t0 - 1e-9 or t > t1 + 1e-9:
            raise OutOfSpan(f"t = {t} outside [{t0}, {t1}]")
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2 if len(self.times) > 1 else 0))
        if len(self.times) == 1:
            return self.poses[0]
        a, b = self.poses[k], self.poses[k + 1]
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        s = float(np.clip(s, 0.0, 1.0))
        dR = so3_log(a.rotation.T @ b.rotation)
        return Pose(a.rotation @ so3_exp(s * dR), (1 - s) * a.translation + s * b.translation)

    def frame_times(self, rate: float = 10.0, n_frames: int | None = None) -> np.ndarray:
        t0, t1 = self.span
        n = int(np.floor((t1 - t0) * rate + 1e-9)) + 1
        if n_frames is not None:
            n = min(n, n_frames)
        return t0 + np.arange(n) / rate


def motion_prior(spec: TrajectorySpec, t0: float, t1: float, rot_sigma: float = 0.0, trans_sigma: float = 0.0, seed=0) -> Pose:
    """Ground-truth motion from t0 to t1 (maps t1-frame points into the t0 frame) plus noise."""
    if t0 > t1:
        raise OutOfSpan("t0 must not exceed t1")
    rel = compose(inverse(spec.pose_at(t0)), spec.pose_at(t1))
    if t0 == t1:
        return Pose.identity()
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3) * rot_sigma
    dt = rng.normal(size=3) * trans_sigma
    return Pose(so3_exp(w) @ rel.rotation, rel.translation + dt)


# ---------------------------------------------------------------- scenarios

SENSOR_HEIGHT = 1.5


def _box_patch(x0, x1, y0, y1, z, tag=FLOOR) -> Patch:
    return Patch([(x0 + x1) / 2, (y0 + y1) / 2, z], [1, 0, 0], [0, 1, 0], (x1 - x0) / 2, (y1 - y0) / 2, tag)


def _wall_x(x, y0, y1, z0, z1, tag=WALL) -> Patch:
    """Wall in the plane x = const."""
    return Patch([x, (y0 + y1) / 2, (z0 + z1) / 2], [0, 1, 0], [0, 0, 1], (y1 - y0) / 2, (z1 - z0) / 2, tag)


def _wall_y(y, x0, x1, z0, z1, tag=WALL) -> Patch:
    return Patch([(x0 + x1) / 2, y, (z0 + z1) / 2], [1, 0, 0], [0, 0, 1], (x1 - x0) / 2, (z1 - z0) / 2, tag)


def _pillar(x, y, z0, z1, size=0.6) -> list:
    h = size / 2
    return [
        _wall_x(x - h, y - h, y + h, z0, z1),
        _wall_x(x + h, y - h, y + h, z0, z1),
        _wall_y(y - h, x - h, x + h, z0, z1),
        _wall_y(y + h, x - h, x + h, z0, z1),
    ]


def _path(points, speed: float, step: float = 0.25, corner_radius: float = 0.0, pitch_fn=None, z_fn=None):
    """Constant-speed trajectory along a 2D polyline with rounded corners."""
    pts = np.asarray(points, dtype=float)
    samples = []
    for a, b in zip(pts[:-1], pts[1:]):
        seg = np.linalg.norm(b - a)
        n = max(int(np.ceil(seg / step)), 1)
        for s in np.arange(n) / n:
            samples.append(a + s * (b - a))
    samples.append(pts[-1])
    xy = np.array(samples)
    if corner_radius > 0:
        # moving average rounds the corners; endpoints stay fixed
        k = max(int(corner_radius / step), 1)
        kernel = np.ones(2 * k + 1) / (2 * k + 1)
        closed = np.allclose(pts[0], pts[-1])
        pad = "wrap" if closed else "edge"
        sm = np.stack([np.convolve(np.pad(xy[:, i], k, mode=pad), kernel, mode="valid") for i in range(2)], axis=1)
        if not closed:
            sm[0], sm[-1] = xy[0], xy[-1]
        xy = sm
    d = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
    keep = np.concatenate([[True], np.diff(d) > 1e-9])
    xy, d = xy[keep], d[keep]
    tangent = np.gradient(xy, axis=0)
    yaw = np.unwrap(np.arctan2(tangent[:, 1], tangent[:, 0]))
    poses = []
    for (x, y), s, psi in zip(xy, d, yaw):
        pitch = pitch_fn(x) if pitch_fn else 0.0
        z = z_fn(x) if z_fn else SENSOR_HEIGHT
        poses.append(Pose(rpy_to_rotation(0.0, pitch, psi), [x, y, z]))
    return TrajectorySpec(d / speed, poses)


def corridor(length: float = 100.0, width: float = 4.0, height: float = 3.0, speed: float = 10.0):
    w = width / 2
    x0, x1 = -20.0, length + 20.0
    world = WorldModel(
        [
            _box_patch(x0, x1, -w, w, 0.0, FLOOR),
            _wall_y(-w, x0, x1, 0.0, height),
            _wall_y(w, x0, x1, 0.0, height),
            _box_patch(x0, x1, -w, w, height, CEILING),
        ]
    )
    return world, _path([[0.0, 0.0], [length, 0.0]], speed)


def square_loop(side: float = 30.0, speed: float = 10.0, margin: float = 8.0, height: float = 4.0):
    lo, hi = -margin, side + margin
    patches = [_box_patch(lo - 5, hi + 5, lo - 5, hi + 5, 0.0, FLOOR)]
    for x in (lo, hi):
        patches.append(_wall_x(x, lo, hi, 0.0, height))
    for y in (lo, hi):
        patches.append(_wall_y(y, lo, hi, 0.0, height))
    a, b = 6.0, side - 6.0
    patches += [_wall_x(a, a, b, 0.0, height), _wall_x(b, a, b, 0.0, height)]
    patches += [_wall_y(a, a, b, 0.0, height), _wall_y(b, a, b, 0.0, height)]
    # irregular pillar rows so straight legs are not translation-degenerate
    for k, s in enumerate(np.arange(lo + 3.0, hi - 2.0, 7.0)):
        off = 1.0 + 0.8 * (k % 3)
        patches += _pillar(s, lo + off, 0.0, 3.0)
        patches += _pillar(s + 1.5, hi - off, 0.0, 3.0)
        patches += _pillar(lo + off, s + 2.5, 0.0, 3.0)
        patches += _pillar(hi - off, s + 0.5, 0.0, 3.0)
    loop = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side], [0.0, 0.0]]
    return WorldModel(patches), _path(loop, speed, corner_radius=3.0)


def bowl_road(
    length: float = 200.0,
    speed: float = 10.0,
    half_width: float = 15.0,
    pillar_spacing: float = 10.0,
    pillar_size: float = 2.0,
):
    """Open flat road lined with staggered roadside blocks."""
    x0, x1 = -30.0, length + 100.0
    patches = [_box_patch(x0, x1, -half_width, half_width, 0.0, FLOOR)]
    for k, x in enumerate(np.arange(x0 + 5.0, x1, pillar_spacing)):
        patches += _pillar(x, -6.0 - 0.7 * (k % 3), 0.0, 3.0, pillar_size)
        patches += _pillar(x + 0.4 * pillar_spacing, 6.0 + 0.7 * ((k + 1) % 3), 0.0, 3.0, pillar_size)
    return WorldModel(patches), _path([[0.0, 0.0], [length, 0.0]], speed)


def _split_level(drop: float, ramp_length: float, flat_a: float, flat_b: float, speed: float, ramp_half_width: float = 3.0):
    """Floor A at z=0 for x < 0, ramp over [0, ramp_length], floor B at z=-drop beyond.

    Positive ``drop`` descends; negative climbs.
    """
    W = 15.0
    xa0, xb1 = -flat_a - 20.0, ramp_length + flat_b + 20.0
    zb = -drop
    lo, hi = min(0.0, zb), max(0.0, zb)
    patches = []
    if drop > 0:
        patches.append(_box_patch(xa0, 0.0, -W, W, 0.0, FLOOR))
        patches.append(_box_patch(0.0, xb1, -W, W, zb, FLOOR))
        side_walls_x = 0.0
    else:
        patches.append(_box_patch(xa0, ramp_length, -W, W, 0.0, FLOOR))
        patches.append(_box_patch(ramp_length, xb1, -W, W, zb, FLOOR))
        side_walls_x = ramp_length
    alpha = np.arctan2(drop, ramp_length)
    half_len = 0.5 * np.hypot(ramp_length, drop)
    patches.append(
        Patch([ramp_length / 2, 0.0, zb / 2], [np.cos(alpha), 0.0, -np.sin(alpha)], [0, 1, 0], half_len, ramp_half_width, RAMP)
    )
    # retaining wall beside the ramp opening and guard walls along it
    patches.append(_wall_x(side_walls_x, -W, -ramp_half_width, lo, hi))
    patches.append(_wall_x(side_walls_x, ramp_half_width, W, lo, hi))
    patches.append(_wall_y(-ramp_half_width, 0.0, ramp_length, lo, hi))
    patches.append(_wall_y(ramp_half_width, 0.0, ramp_length, lo, hi))
    top = hi + 4.0
    patches += [_wall_x(xa0, -W, W, lo, top), _wall_x(xb1, -W, W, lo, top)]
    patches += [_wall_y(-W, xa0, xb1, lo, top), _wall_y(W, xa0, xb1, lo, top)]
    for k, x in enumerate(np.arange(xa0 + 6.0, xb1 - 4.0, 8.0)):
        if -2.0 < x < ramp_length + 2.0:
            continue
        zf = 0.0 if x < ramp_length / 2 else zb
        patches += _pillar(x, -8.0 - 0.8 * (k % 3), zf, zf + 3.0)
        patches += _pillar(x + 3.0, 8.0 + 0.8 * ((k + 1) % 3), zf, zf + 3.0)

    def surface(x):
        return float(np.interp(x, [0.0, ramp_length], [0.0, zb]))

    def pitch(x):
        # blend pitch over 2 m around each kink
        return float(np.interp(x, [-1.0, 1.0, ramp_length - 1.0, ramp_length + 1.0], [0.0, alpha, alpha, 0.0]))

    def z(x):
        p = pitch(x)
        return surface(x) + SENSOR_HEIGHT * np.cos(p)

    traj = _path([[-flat_a, 0.0], [ramp_length + flat_b, 0.0]], speed, pitch_fn=pitch, z_fn=z)
    return WorldModel(patches), traj


def two_floor_garage(spacing: float = 3.0, ramp_length: float = 12.0, flat: float = 40.0, speed: float = 10.0):
    return _split_level(spacing, ramp_length, flat, flat, speed)


def ramp_junction(rise: float = 3.0, ramp_length: float = 15.0, flat: float = 30.0, speed: float = 10.0):
    return _split_level(-rise, ramp_length, flat, flat, speed)


SCENARIOS = {
    "corridor": corridor,
    "square_loop": square_loop,
    "bowl_road": bowl_road,
    "two_floor_garage": two_floor_garage,
    "ramp_junction": ramp_junction,
}


def generate_scenario(name: str, **params):
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return builder(**params)


@dataclass
class SimulatedRun:
    scans: list
    ground_truth: list
    priors: list
    timestamps: np.ndarray


def simulate(
    world: WorldModel,
    spec: TrajectorySpec,
    sensor: SensorModel,
    rate: float = 10.0,
    n_frames: int | None = None,
    prior_rot_sigma: float = 0.0,
    prior_trans_sigma: float = 0.0,
) -> SimulatedRun:
    """Scans, ground-truth world poses and per-step motion priors.

    ``priors[k]`` is the noisy motion from frame k-1 to frame k (identity for k = 0).
    """
    times = spec.frame_times(rate, n_frames)
    gt = [spec.pose_at(t) for t in times]
    scans = []
    priors = [Pose.identity()]
    for k, (t, pose) in enumerate(zip(times, gt)):
        scan, _ = raycast_scan(world, sensor, pose, stream=k, timestamp=float(t))
        scans.append(scan)
        if k:
            priors.append(motion_prior(spec, times[k - 1], t, prior_rot_sigma, prior_trans_sigma, seed=[sensor.rng_seed, 1, k]))
    return SimulatedRun(scans, gt, priors, times)
