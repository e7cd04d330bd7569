"""Ground plane extraction from a key-frame's local map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCandidates, NoGroundCandidates, NonConvergence, SingularPlane
from .plane import CP_MIN_NORM, PlaneCP


@dataclass(frozen=True, eq=False)
class GroundObservation:
    plane: PlaneCP
    covariance: np.ndarray
    support_count: int
    mean_residual: float

    @property
    def information(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


@dataclass
class GroundConfig:
    box_half_x: float = 10.0
    box_half_y: float = 10.0
    band: float = 0.5
    sensor_height_prior: float = -1.5
    min_ground_points: int = 100
    ransac_iterations: int = 200
    ransac_inlier_dist: float = 0.05
    min_inlier_fraction: float = 0.8
    # planes steeper than this relative to the seed are walls, not a second ground
    wall_angle_deg: float = 45.0
    wall_rounds: int = 3
    # after refinement keep only points within this many of their own sigmas
    # of the plane and refit; removes the hinge of an adjoining ramp
    trim_sigma: float = 3.0
    trim_rounds: int = 3
    max_iter: int = 20
    step_tol: float = 1e-8
    nonconvergence_tol: float = 1e-4


def segment_ground_candidates(
    positions: np.ndarray,
    covariances: np.ndarray,
    sensor_height_prior: float = -1.5,
    config: GroundConfig | None = None,
):
    """Points in the sensor-centred box around the expected ground height."""
    cfg = config or GroundConfig()
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    mask = (
        (np.abs(p[:, 0]) <= cfg.box_half_x)
        & (np.abs(p[:, 1]) <= cfg.box_half_y)
        & (np.abs(p[:, 2] - sensor_height_prior) <= cfg.band)
    )
    if mask.sum() < cfg.min_ground_points:
        raise NoGroundCandidates(f"{int(mask.sum())} ground candidates, need {cfg.min_ground_points}")
    return p[mask], np.asarray(covariances)[mask]


def ransac_plane_seed(
    points: np.ndarray,
    iterations: int = 200,
    inlier_dist: float = 0.05,
    rng: np.random.Generator | int | None = 0,
    min_norm: float = CP_MIN_NORM,
) -> PlaneCP:
    """Best-consensus plane over random 3-point hypotheses."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 3:
        raise DegenerateCandidates(f"{len(p)} candidates, need 3")
    rng = np.random.default_rng(rng)
    # three distinct indices per hypothesis
    idx = np.stack([rng.choice(len(p), 3, replace=False) for _ in range(iterations)])
    a, b, c = p[idx[:, 0]], p[idx[:, 1]], p[idx[:, 2]]
    nrm = np.cross(b - a, c - a)
    length = np.linalg.norm(nrm, axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    valid = length > 1e-9 * scale
    if not valid.any():
        raise DegenerateCandidates("every sampled triple is collinear")
    nrm = nrm[valid] / length[valid, None]
    d = np.einsum("ij,ij->i", nrm, a[valid])
    counts = np.array([(np.abs(p @ n - di) <= inlier_dist).sum() for n, di in zip(nrm, d)])
    best = int(np.argmax(counts))
    if abs(d[best]) < min_norm:
        raise SingularPlane("RANSAC plane passes through the sensor origin")
    return PlaneCP(d[best] * nrm[best], min_norm=min_norm)


def _residuals(points, cp):
    norm = np.linalg.norm(cp)
    return points @ cp / norm - norm


def residual_jacobian(points: np.ndarray, cp: np.ndarray) -> np.ndarray:
    """d r_i / d cp for r_i = p_i^T cp / |cp| - |cp|; one row per point."""
    cp = np.asarray(cp, dtype=float)
    norm = np.linalg.norm(cp)
    pc = points @ cp
    return points / norm - cp / norm - np.outer(pc, cp) / norm**3


def _weights(covariances, cp):
    n = cp / np.linalg.norm(cp)
    var = np.einsum("i,nij,j->n", n, covariances, n)
    return 1.0 / var


def weighted_cost(points, covariances, cp) -> float:
    r = _residuals(points, cp)
    return float(np.sum(_weights(covariances, cp) * r * r))


def refine_plane_wls(
    points: np.ndarray,
    covariances: np.ndarray,
    seed: PlaneCP,
    config: GroundConfig | None = None,
    history: list | None = None,
) -> GroundObservation:
    """Weighted Gauss-Newton fit of a CP plane to points with 3x3 covariances.

    Each residual is weighted by the inverse of its variance along the
    current normal; the returned covariance is the inverse of the final
    normal matrix.
    """
    cfg = config or GroundConfig()
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    C = np.asarray(covariances, dtype=float).reshape(-1, 3, 3)
    if len(p) < cfg.min_ground_points:
        raise NoGroundCandidates(f"{len(p)} points for refinement, need {cfg.min_ground_points}")
    min_norm = seed.min_norm
    cp = np.array(seed.cp)
    cost = weighted_cost(p, C, cp)
    if history is not None:
        history.append(cost)
    step = np.inf
    for _ in range(cfg.max_iter):
        H, g = _normal_equations(p, C, cp)
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateCandidates("ground points do not span a plane") from exc
        # halve until the weighted cost does not increase
        for _ in range(30):
            trial = cp + delta
            if np.linalg.norm(trial) >= min_norm:
                new_cost = weighted_cost(p, C, trial)
                if new_cost <= cost:
                    break
            delta = 0.5 * delta
        else:
            trial, new_cost = cp, cost
        step = float(np.linalg.norm(trial - cp))
        cp, cost = trial, new_cost
        if history is not None:
            history.append(cost)
        if step < cfg.step_tol:
            break
    else:
        if step > cfg.nonconvergence_tol:
            raise NonConvergence(f"plane refinement still moving {step:.2e} m after {cfg.max_iter} iterations")
    if np.linalg.norm(cp) < min_norm:
        raise SingularPlane("refined ground plane passes through the sensor origin")
    H, _ = _normal_equations(p, C, cp)
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    r = _residuals(p, cp)
    return GroundObservation(PlaneCP(cp, min_norm=min_norm), cov, len(p), float(np.mean(np.abs(r))))


def _normal_equations(p, C, cp):
    r = _residuals(p, cp)
    J = residual_jacobian(p, cp)
    w = _weights(C, cp)
    H = (J * w[:, None]).T @ J
    g = J.T @ (w * r)
    return H, g


def extract_ground(
    positions: np.ndarray,
    covariances: np.ndarray,
    config: GroundConfig | None = None,
    rng: np.random.Generator | int | None = 0,
) -> GroundObservation:
    """segment -> RANSAC seed -> weighted refinement on the RANSAC inliers,
    then re-trimmed to the points consistent with their own noise.

    Rejects the key-frame (NoGroundCandidates) when the seed explains less
    than ``min_inlier_fraction`` of the candidates not lying on walls, which
    happens where the box straddles two grounds, e.g. on a ramp between floors.
    """
    cfg = config or GroundConfig()
    rng = np.random.default_rng(rng)
    pts, covs = segment_ground_candidates(positions, covariances, cfg.sensor_height_prior, cfg)
    seed = ransac_plane_seed(pts, cfg.ransac_iterations, cfg.ransac_inlier_dist, rng)
    inl = np.abs(seed.signed_distance(pts)) <= cfg.ransac_inlier_dist
    walls = _wall_points(pts, ~inl, seed, cfg, rng)
    frac = inl.sum() / max(len(pts) - walls.sum(), 1)
    if frac < cfg.min_inlier_fraction:
        raise NoGroundCandidates(f"ground seed explains only {frac:.0%} of the non-wall candidates")
    obs = refine_plane_wls(pts[inl], covs[inl], seed, cfg)
    for _ in range(cfg.trim_rounds):
        cp = obs.plane.cp
        r = np.abs(_residuals(pts, cp))
        keep = inl & (r <= cfg.trim_sigma / np.sqrt(_weights(covs, cp)))
        if np.array_equal(keep, inl) or keep.sum() < cfg.min_ground_points:
            break
        inl = keep
        obs = refine_plane_wls(pts[inl], covs[inl], obs.plane, cfg)
    return obs


def _wall_points(pts, rest, seed: PlaneCP, cfg: GroundConfig, rng) -> np.ndarray:
    """Mask of leftover candidates lying on planes steep relative to the seed.

    Wall feet fall inside the height band; they should not count against the
    ground, whereas a second near-horizontal surface (ramp, other floor) should.
    """
    walls = np.zeros(len(pts), dtype=bool)
    n0 = seed.cp / np.linalg.norm(seed.cp)
    cos_wall = np.cos(np.deg2rad(cfg.wall_angle_deg))
    rest = rest.copy()
    for _ in range(cfg.wall_rounds):
        idx = np.flatnonzero(rest)
        if len(idx) < max(3, 0.05 * len(pts)):
            break
        try:
            plane = ransac_plane_seed(pts[idx], cfg.ransac_iterations, cfg.ransac_inlier_dist, rng)
        except (DegenerateCandidates, SingularPlane):
            break
        on = idx[np.abs(plane.signed_distance(pts[idx])) <= cfg.ransac_inlier_dist]
        if abs(n0 @ plane.cp) / np.linalg.norm(plane.cp) < cos_wall:
            walls[on] = True
        rest[on] = False
    return walls
