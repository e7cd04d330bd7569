"""Point-to-plane ICP and its covariance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateNormals, InsufficientCorrespondences
from .se3 import Pose, PoseCovariance, so3_exp


@dataclass(frozen=True, eq=False)
class Scan:
    points: np.ndarray
    per_point_cov: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.per_point_cov, dtype=float).reshape(-1, 3, 3)
        if len(pts) != len(cov):
            raise ValueError("points and per_point_cov differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "per_point_cov", cov)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "Scan":
        return Scan(self.points[idx], self.per_point_cov[idx], self.timestamp)


def beam_covariance(points: np.ndarray, sigma: float, floor: float = 1e-6) -> np.ndarray:
    """sigma^2 along each point's beam direction plus an isotropic floor."""
    points = np.asarray(points, dtype=float)
    r = np.linalg.norm(points, axis=1, keepdims=True)
    u = points / np.maximum(r, 1e-12)
    cov = sigma**2 * u[:, :, None] * u[:, None, :]
    cov += floor * np.eye(3)
    return cov


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point falling in each voxel, in input order."""
    if len(points) == 0:
        return np.zeros(0, dtype=int)
    keys = np.floor(np.asarray(points) / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


@dataclass
class RegistrationConfig:
    max_corr_dist: float = 1.0
    normal_k: int = 8
    min_inliers: int = 50
    max_iter: int = 30
    update_tol: float = 1e-6
    cond_floor: float = 1e-4
    source_voxel: float = 0.0
    # neighbourhoods flatter than this (smallest / total PCA variance) give no normal
    max_curvature: float = 1.0
    # second / largest PCA variance below this means a collinear neighbourhood
    min_planarity: float = 1e-6
    # a normal is only fitted when all k neighbours lie within this radius
    normal_radius: float = np.inf
    # and when their RMS distance to the fitted plane is at most this (meters)
    max_thickness: float = np.inf
    # correspondences whose point-to-plane residual exceeds this are dropped
    max_plane_residual: float = np.inf


@dataclass
class RegistrationResult:
    """``transform`` maps source points into the target frame."""

    transform: Pose
    covariance: PoseCovariance
    inlier_count: int
    rms_residual: float
    converged: bool
    iterations: int = 0
    degenerate_dims: int = 0
    source_count: int = 0
    normal_matrix: np.ndarray = field(default=None, repr=False)

    @property
    def inlier_fraction(self) -> float:
        return self.inlier_count / max(self.source_count, 1)


class TargetIndex:
    """KD-tree over target points with normals estimated on demand."""

    def __init__(
        self,
        points: np.ndarray,
        k: int = 8,
        max_curvature: float = 1.0,
        min_planarity: float = 1e-6,
        radius: float = np.inf,
        max_thickness: float = np.inf,
    ):
        self.points = np.asarray(points, dtype=float)
        self.k = k
        self.max_curvature = max_curvature
        self.min_planarity = min_planarity
        self.radius = radius
        self.max_thickness = max_thickness
        self.tree = cKDTree(self.points)
        self._normals = np.full((len(self.points), 3), np.nan)
        self._done = np.zeros(len(self.points), dtype=bool)

    @classmethod
    def from_config(cls, points: np.ndarray, cfg: "RegistrationConfig") -> "TargetIndex":
        return cls(points, cfg.normal_k, cfg.max_curvature, cfg.min_planarity, cfg.normal_radius, cfg.max_thickness)

    def __len__(self) -> int:
        return len(self.points)

    def normals(self, idx: np.ndarray) -> np.ndarray:
        """Unit normals for target indices; NaN rows where the fit is degenerate."""
        todo = np.unique(idx[~self._done[idx]])
        if len(todo):
            self._normals[todo] = estimate_normals(
                self.points, self.tree, todo, self.k, self.max_curvature, self.min_planarity, self.radius, self.max_thickness
            )
            self._done[todo] = True
        return self._normals[idx]


def estimate_normals(
    points,
    tree,
    idx,
    k: int,
    max_curvature: float = 1.0,
    min_planarity: float = 1e-6,
    radius: float = np.inf,
    max_thickness: float = np.inf,
) -> np.ndarray:
    k = min(k, len(points))
    dist, nbr = tree.query(points[idx], k=k)
    dist = np.asarray(dist).reshape(len(idx), k)
    nbr = np.asarray(nbr).reshape(len(idx), k)
    P = points[nbr]
    P = P - P.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", P, P) / k
    w, V = np.linalg.eigh(C)
    normals = V[:, :, 0].copy()
    # collinear or coincident neighbourhoods have no plane
    bad = (k < 3) | (w[:, 1] <= min_planarity * np.maximum(w[:, 2], 1e-300)) | (w[:, 2] <= 0)
    bad |= w[:, 0] > max_curvature * w.sum(axis=1)
    # wide neighbourhoods straddle surfaces seen at grazing angles
    bad |= dist[:, -1] > radius
    # neighbourhoods spanning two surfaces (corners, edges) are thick
    bad |= np.sqrt(np.maximum(w[:, 0], 0.0)) > max_thickness
    normals[bad] = np.nan
    return normals


def estimate_registration_covariance(
    normal_matrix: np.ndarray, residual_variance: float, cond_floor: float = 1e-4, scale: float = 1.0
) -> tuple[PoseCovariance, int]:
    """residual_variance * H^-1 with small eigenvalues clamped.

    ``scale`` is a length used to bring the rotation block to translation
    units before comparing eigenvalues. Returns the covariance and the
    number of clamped directions.
    """
    H = 0.5 * (normal_matrix + normal_matrix.T)
    S = np.diag([1.0 / scale] * 3 + [1.0] * 3)
    Hs = S @ H @ S
    w, V = np.linalg.eigh(Hs)
    wmax = max(float(w[-1]), 1e-300)
    floor = cond_floor * wmax
    clamped = int(np.sum(w < floor))
    w = np.maximum(w, floor)
    cov_s = (V / w) @ V.T
    cov = residual_variance * (S @ cov_s @ S)
    cov = 0.5 * (cov + cov.T)
    return PoseCovariance.from_full(cov), clamped


def degenerate_basis(H: np.ndarray, scale: float, cond_floor: float) -> np.ndarray:
    """Well-constrained directions of the rotation-scaled normal matrix (columns, scaled coordinates)."""
    S = np.diag([1.0 / scale] * 3 + [1.0] * 3)
    w, V = np.linalg.eigh(S @ H @ S)
    wmax = max(float(w[-1]), 1e-300)
    return V[:, w >= cond_floor * wmax]


def _solve_projected(H: np.ndarray, g: np.ndarray, scale: float, basis: np.ndarray) -> np.ndarray:
    """Gauss-Newton step restricted to span(basis), given in rotation-scaled coordinates."""
    S = np.diag([1.0 / scale] * 3 + [1.0] * 3)
    if basis.shape[1] == 0:
        return np.zeros(6)
    B = S @ basis
    A = B.T @ H @ B
    return -B @ np.linalg.solve(A, B.T @ g)


def register_point_to_plane(
    source,
    target,
    initial_guess: Pose | None = None,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Align ``source`` (Scan or (N,3) points) to ``target`` (SlidingMap, points or TargetIndex)."""
    cfg = config or RegistrationConfig()
    src = source.points if isinstance(source, Scan) else np.asarray(source, dtype=float)
    if cfg.source_voxel > 0:
        src = src[voxel_downsample(src, cfg.source_voxel)]
    if len(src) < cfg.min_inliers:
        raise InsufficientCorrespondences(f"source has {len(src)} points, need {cfg.min_inliers}")
    # canonical order makes the result independent of input ordering
    src = src[np.lexsort(src.T[::-1])]

    if isinstance(target, TargetIndex):
        index = target
    else:
        pts = target.positions if hasattr(target, "positions") else target
        if len(pts) == 0:
            raise InsufficientCorrespondences("target map is empty")
        index = TargetIndex.from_config(pts, cfg)

    pose = initial_guess or Pose.identity()
    R, t = np.array(pose.rotation), np.array(pose.translation)
    scale = max(float(np.sqrt(np.mean(np.sum(src**2, axis=1)))), 1.0)

    converged = False
    H = np.zeros((6, 6))
    r = np.zeros(0)
    it = 0
    basis = None
    for it in range(1, cfg.max_iter + 1):
        H, g, r = _linearize(src, R, t, index, cfg)
        if basis is None:
            # degenerate directions are fixed at the initial guess: later
            # correspondence changes must not pull the estimate along them
            basis = degenerate_basis(H, scale, cfg.cond_floor)
        dx = _solve_projected(H, g, scale, basis)
        R = so3_exp(dx[:3]) @ R
        t = t + dx[3:]
        if np.linalg.norm(dx) < cfg.update_tol:
            converged = True
            break
    # statistics at the final estimate
    H, g, r = _linearize(src, R, t, index, cfg)
    n = len(r)
    dof = max(n - 6, 1)
    sigma2 = float(r @ r) / dof
    cov, n_clamped = estimate_registration_covariance(H, sigma2, cfg.cond_floor, scale)
    n_degenerate = max(n_clamped, 6 - basis.shape[1])
    return RegistrationResult(
        transform=Pose(R, t),
        covariance=cov,
        inlier_count=n,
        rms_residual=float(np.sqrt(r @ r / max(n, 1))),
        converged=converged,
        iterations=it,
        degenerate_dims=n_degenerate,
        source_count=len(src),
        normal_matrix=H,
    )


def _linearize(src, R, t, index: TargetIndex, cfg: RegistrationConfig):
    moved = src @ R.T + t
    dist, nn = index.tree.query(moved, k=1, distance_upper_bound=cfg.max_corr_dist)
    matched = np.isfinite(dist)
    if matched.sum() < cfg.min_inliers:
        raise InsufficientCorrespondences(
            f"{int(matched.sum())} correspondences within {cfg.max_corr_dist} m, need {cfg.min_inliers}"
        )
    nn = nn[matched]
    q = index.points[nn]
    normals = index.normals(nn)
    ok = np.isfinite(normals[:, 0])
    if (~ok).sum() > 0.5 * len(ok):
        raise DegenerateNormals(f"{int((~ok).sum())} of {len(ok)} target normals undefined")
    p = moved[matched][ok]
    nrm = normals[ok]
    q = q[ok]
    if len(p) < cfg.min_inliers:
        raise InsufficientCorrespondences(f"{len(p)} usable correspondences, need {cfg.min_inliers}")
    r = np.einsum("ij,ij->i", nrm, p - q)
    if np.isfinite(cfg.max_plane_residual):
        near = np.abs(r) <= cfg.max_plane_residual
        if near.sum() < cfg.min_inliers:
            raise InsufficientCorrespondences(f"{int(near.sum())} correspondences pass the residual gate")
        p, nrm, r = p[near], nrm[near], r[near]
    # d(n^T (exp(w) R s + t)) = n^T(-(Rs)^) w + n^T dt ; n^T(-(a)^) = (a x n)^T
    a = p - t
    J = np.hstack([np.cross(a, nrm), nrm])
    H = J.T @ J
    g = J.T @ r
    return H, g, r
