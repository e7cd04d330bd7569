"""Sensor-centric sliding map: covariance propagation and observation-based upkeep."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .registration import Scan, voxel_downsample
from .se3 import Pose, PoseCovariance, skew_batch


@dataclass(frozen=True)
class MapPoint:
    position: np.ndarray
    covariance: np.ndarray
    birth_frame: int


@dataclass(frozen=True, eq=False)
class SlidingMap:
    positions: np.ndarray
    covariances: np.ndarray
    birth_frames: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        birth = np.asarray(self.birth_frames, dtype=np.int64).reshape(-1)
        if not (len(pos) == len(cov) == len(birth)):
            raise ValueError("inconsistent map array lengths")
        for a in (pos, cov, birth):
            a.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "covariances", cov)
        object.__setattr__(self, "birth_frames", birth)

    @classmethod
    def empty(cls, frame_id: int = 0) -> "SlidingMap":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64), frame_id)

    @classmethod
    def from_scan(cls, scan: Scan, frame_id: int = 0, voxel: float = 0.0) -> "SlidingMap":
        idx = voxel_downsample(scan.points, voxel) if voxel > 0 else np.arange(len(scan))
        return cls(scan.points[idx], scan.per_point_cov[idx], np.full(len(idx), frame_id), frame_id)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> MapPoint:
        return MapPoint(self.positions[i], self.covariances[i], int(self.birth_frames[i]))

    def traces(self) -> np.ndarray:
        return np.trace(self.covariances, axis1=1, axis2=2)

    def select(self, mask) -> "SlidingMap":
        return SlidingMap(self.positions[mask], self.covariances[mask], self.birth_frames[mask], self.frame_id)


def recenter(m: SlidingMap, T_k_k1: Pose, pose_cov: PoseCovariance) -> SlidingMap:
    """Move the map from frame k into frame k+1.

    ``T_k_k1`` maps frame-k points into frame k+1. Each covariance becomes
    J_R S_R J_R^T + R S_p R^T + S_t with J_R = -(R p)^, the derivative of
    R p under a left so(3) perturbation of R.
    """
    R, t = T_k_k1.rotation, T_k_k1.translation
    rp = m.positions @ R.T
    cov = np.einsum("ij,njk,lk->nil", R, m.covariances, R)
    if not pose_cov.is_zero():
        JR = -skew_batch(rp)
        cov = cov + np.einsum("nij,jk,nlk->nil", JR, pose_cov.rot_cov, JR) + pose_cov.trans_cov
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return SlidingMap(rp + t, cov, m.birth_frames, m.frame_id + 1)


@dataclass
class MaintenanceConfig:
    assoc_dist: float = 0.3
    elimination_threshold: float = 0.25
    voxel: float = 0.2
    metric: str = "euclidean"
    mahalanobis_gate: float = 7.815


def _associate(m: SlidingMap, scan: Scan, cfg: MaintenanceConfig):
    """Nearest map index per scan point, -1 where unassociated."""
    assoc = np.full(len(scan), -1, dtype=np.int64)
    dist = np.full(len(scan), np.inf)
    if len(m) == 0 or len(scan) == 0:
        return assoc, dist
    tree = cKDTree(m.positions)
    d, nn = tree.query(scan.points, k=1, distance_upper_bound=cfg.assoc_dist)
    hit = np.isfinite(d)
    if cfg.metric == "mahalanobis":
        idx = np.flatnonzero(hit)
        diff = scan.points[idx] - m.positions[nn[idx]]
        S = scan.per_point_cov[idx] + m.covariances[nn[idx]]
        md = np.einsum("ni,ni->n", diff, np.linalg.solve(S, diff[:, :, None])[:, :, 0])
        hit[idx[md > cfg.mahalanobis_gate]] = False
    elif cfg.metric != "euclidean":
        raise ValueError(f"unknown association metric {cfg.metric!r}")
    assoc[hit] = nn[hit]
    dist[hit] = d[hit]
    return assoc, dist


def _thin_new_points(points: np.ndarray, voxel: float, cover: float) -> np.ndarray:
    """Voxel-thin, then keep any dropped point farther than ``cover`` from every kept one."""
    if voxel <= 0 or len(points) == 0:
        return np.arange(len(points))
    keep = voxel_downsample(points, voxel)
    dropped = np.setdiff1d(np.arange(len(points)), keep)
    if len(dropped) and len(keep):
        d, _ = cKDTree(points[keep]).query(points[dropped], k=1)
        keep = np.sort(np.concatenate([keep, dropped[d > cover]]))
    return keep


def maintain(
    m: SlidingMap, scan: Scan, config: MaintenanceConfig | None = None, frame_index: int | None = None
) -> SlidingMap:
    """Observation-based update with a scan already expressed in the map's frame.

    1. associate scan points to their nearest map point within assoc_dist;
    2. reset each associated map point's covariance to that of its nearest
       associated scan point;
    3. drop map points whose covariance trace exceeds the threshold;
    4. append the unassociated scan points (voxel-thinned).
    """
    cfg = config or MaintenanceConfig()
    frame = m.frame_id if frame_index is None else frame_index
    assoc, dist = _associate(m, scan, cfg)

    cov = np.array(m.covariances)
    hit = np.flatnonzero(assoc >= 0)
    if len(hit):
        # nearest scan point wins each map point: sort by (map index, distance)
        order = np.lexsort((dist[hit], assoc[hit]))
        hit = hit[order]
        first = np.ones(len(hit), dtype=bool)
        first[1:] = assoc[hit][1:] != assoc[hit][:-1]
        winners = hit[first]
        cov[assoc[winners]] = scan.per_point_cov[winners]

    traces = np.trace(cov, axis1=1, axis2=2)
    survive = traces <= cfg.elimination_threshold

    new = np.flatnonzero(assoc < 0)
    new = new[_thin_new_points(scan.points[new], cfg.voxel, cfg.assoc_dist)]
    return SlidingMap(
        np.vstack([m.positions[survive], scan.points[new]]),
        np.concatenate([cov[survive], scan.per_point_cov[new]]),
        np.concatenate([m.birth_frames[survive], np.full(len(new), frame, dtype=np.int64)]),
        m.frame_id,
    )


def maintain_range_based(
    m: SlidingMap, scan: Scan, cutoff: float = 80.0, voxel: float = 0.2, frame_index: int | None = None
) -> SlidingMap:
    """Baseline: drop points beyond ``cutoff`` and append the whole scan.

    Scan points landing in a voxel the map already occupies are skipped, so
    density stays bounded without touching existing map points.
    """
    frame = m.frame_id if frame_index is None else frame_index
    keep = np.linalg.norm(m.positions, axis=1) <= cutoff
    add = np.arange(len(scan))
    if voxel > 0 and len(scan):
        add = voxel_downsample(scan.points, voxel)
        occupied = _voxel_keys(m.positions[keep], voxel)
        add = add[~np.isin(_voxel_keys(scan.points[add], voxel), occupied)]
    return SlidingMap(
        np.vstack([m.positions[keep], scan.points[add]]),
        np.concatenate([m.covariances[keep], scan.per_point_cov[add]]),
        np.concatenate([m.birth_frames[keep], np.full(len(add), frame, dtype=np.int64)]),
        m.frame_id,
    )


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    k = np.floor(points / voxel).astype(np.int64) + (1 << 20)
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]
