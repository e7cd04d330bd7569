"""Pose graph over SE3 key-frames and CP ground landmarks, solved with Levenberg-Marquardt.

State updates: poses take a left so(3) increment on R and an additive
increment on t; planes take an additive CP increment. The first pose is
held fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GcslamError, RankDeficient
from .ground import GroundObservation
from .plane import PlaneCP, cp_to_hf, transform_cp
from .registration import RegistrationConfig, TargetIndex, register_point_to_plane
from .se3 import (
    Pose,
    compose,
    invert_covariance6,
    inverse,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian_inv,
)

log = logging.getLogger(__name__)

ODOMETRY = "Odometry"
PLANE = "PlaneObservation"
LOOP = "LoopClosure"
FACTOR_KINDS = (ODOMETRY, PLANE, LOOP)


@dataclass
class PoseNode:
    id: int
    pose: Pose


@dataclass
class PlaneNode:
    id: int
    plane: PlaneCP


@dataclass
class Factor:
    kind: str
    node_ids: tuple
    measurement: object
    information: np.ndarray

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        info = np.asarray(self.information, dtype=float)
        self.information = 0.5 * (info + info.T)
        self.node_ids = tuple(int(i) for i in self.node_ids)


@dataclass
class PoseGraph:
    poses: dict = field(default_factory=dict)
    planes: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    fixed: set = field(default_factory=set)

    def add_pose(self, node_id: int, pose: Pose, fixed: bool = False) -> PoseNode:
        node = PoseNode(node_id, pose)
        self.poses[node_id] = node
        if fixed or not self.fixed:
            self.fixed.add(node_id)
        return node

    def add_plane(self, node_id: int, plane: PlaneCP) -> PlaneNode:
        node = PlaneNode(node_id, plane)
        self.planes[node_id] = node
        return node

    def add_factor(self, factor: Factor) -> Factor:
        a, b = factor.node_ids
        if a not in self.poses:
            raise KeyError(f"pose node {a} does not exist")
        target = self.planes if factor.kind == PLANE else self.poses
        if b not in target:
            raise KeyError(f"node {b} does not exist")
        self.factors.append(factor)
        return factor

    def copy(self) -> "PoseGraph":
        g = PoseGraph(
            {k: PoseNode(k, v.pose) for k, v in self.poses.items()},
            {k: PlaneNode(k, v.plane) for k, v in self.planes.items()},
            list(self.factors),
            set(self.fixed),
        )
        return g

    def transformed(self, G: Pose) -> "PoseGraph":
        """Every pose and world plane moved by the rigid transform G."""
        g = self.copy()
        for node in g.poses.values():
            node.pose = compose(G, node.pose)
        Ginv = inverse(G)
        for node in g.planes.values():
            node.plane = PlaneCP(transform_cp(node.plane.cp, Ginv))
        return g


# ---------------------------------------------------------------- factors


def relative_pose_information(measurement: Pose, cov6: np.ndarray) -> np.ndarray:
    """Information of the relative-pose residual given the measurement covariance."""
    J = np.zeros((6, 6))
    J[:3, :3] = -measurement.rotation.T
    J[3:, 3:] = -np.eye(3)
    S = J @ cov6 @ J.T
    return np.linalg.inv(0.5 * (S + S.T))


def relative_pose_residual(Ti: Pose, Tj: Pose, Z: Pose) -> np.ndarray:
    E = Z.rotation.T @ Ti.rotation.T @ Tj.rotation
    rt = Ti.rotation.T @ (Tj.translation - Ti.translation) - Z.translation
    return np.concatenate([so3_log(E), rt])


def relative_pose_jacobians(Ti: Pose, Tj: Pose, Z: Pose):
    """(dr/dxi, dr/dxj), each 6x6, x = (left rot increment, translation increment)."""
    E = Z.rotation.T @ Ti.rotation.T @ Tj.rotation
    Jr_inv = so3_right_jacobian_inv(so3_log(E))
    RiT = Ti.rotation.T
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Jr_inv @ Tj.rotation.T
    Jj[:3, :3] = Jr_inv @ Tj.rotation.T
    Ji[3:, :3] = RiT @ skew(Tj.translation - Ti.translation)
    Ji[3:, 3:] = -RiT
    Jj[3:, 3:] = RiT
    return Ji, Jj


def plane_residual(plane: PlaneNode | PlaneCP, pose: PoseNode | Pose, obs) -> np.ndarray:
    """World CP minus the observation carried into the world by the pose.

    r = Pi_w - d R n - ((R n)^T t) (R n), with (n, d) the Hesse form of the
    observed plane (d >= 0).
    """
    pw, T = _plane_cp(plane), _pose(pose)
    h = cp_to_hf(_obs_plane(obs))
    m = T.rotation @ h.normal
    return pw - h.dist * m - (m @ T.translation) * m


def plane_factor_jacobians(plane, pose, obs, exact: bool = False):
    """(J_plane, J_rot, J_trans) of plane_residual.

    All are derivatives of the residual itself, so the pose blocks carry the
    opposite sign of the usual prediction Jacobians. J_rot = d (R n)^ drops
    the translation-dependent terms unless ``exact`` is set; the two agree
    at t = 0.
    """
    T = _pose(pose)
    h = cp_to_hf(_obs_plane(obs))
    m = T.rotation @ h.normal
    J_plane = np.eye(3)
    J_trans = -np.outer(m, m)
    J_rot = h.dist * skew(m)
    if exact:
        t = T.translation
        J_rot = J_rot + (m @ t) * skew(m) + np.outer(m, t) @ skew(m)
    return J_plane, J_rot, J_trans


def _whitened_plane(pw: np.ndarray, T: Pose, n: np.ndarray, d: float):
    """e = R^T r (residual in the key-frame's orientation) and its Jacobians."""
    Rt = T.rotation.T
    tl = Rt @ T.translation
    e = Rt @ pw - d * n - (n @ tl) * n
    J_plane = Rt
    J_rot = Rt @ skew(pw) - np.outer(n, n) @ Rt @ skew(T.translation)
    J_trans = -np.outer(n, n) @ Rt
    return e, J_plane, J_rot, J_trans


def _plane_cp(p):
    return p.plane.cp if isinstance(p, PlaneNode) else (p.cp if isinstance(p, PlaneCP) else np.asarray(p))


def _pose(p):
    return p.pose if isinstance(p, PoseNode) else p


def _obs_plane(obs):
    if isinstance(obs, GroundObservation):
        return obs.plane
    if isinstance(obs, PlaneCP):
        return obs
    return PlaneCP(obs)


# ---------------------------------------------------------------- solver


@dataclass
class LMConfig:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iter: int = 100
    rel_tol: float = 1e-9
    huber_delta: float = 1.0
    lambda_max: float = 1e12


@dataclass
class OptimizationReport:
    costs: list
    iterations: int
    accepted: int
    converged: bool

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


class _Layout:
    def __init__(self, graph: PoseGraph):
        self.pose_index = {}
        self.plane_index = {}
        k = 0
        for pid in sorted(graph.poses):
            if pid in graph.fixed:
                continue
            self.pose_index[pid] = k
            k += 6
        for lid in sorted(graph.planes):
            self.plane_index[lid] = k
            k += 3
        self.size = k


def _factor_terms(graph: PoseGraph, f: Factor):
    """Unwhitened residual and list of (column offset key, jacobian) blocks."""
    if f.kind == PLANE:
        pid, lid = f.node_ids
        T = graph.poses[pid].pose
        h = cp_to_hf(_obs_plane(f.measurement))
        e, Jp, Jr, Jt = _whitened_plane(graph.planes[lid].plane.cp, T, h.normal, h.dist)
        return e, [(("pose", pid), np.hstack([Jr, Jt])), (("plane", lid), Jp)]
    i, j = f.node_ids
    Ti, Tj = graph.poses[i].pose, graph.poses[j].pose
    r = relative_pose_residual(Ti, Tj, f.measurement)
    Ji, Jj = relative_pose_jacobians(Ti, Tj, f.measurement)
    return r, [(("pose", i), Ji), (("pose", j), Jj)]


def _robust(f: Factor, s: float, delta: float):
    """(cost contribution, IRLS weight) for squared whitened norm s."""
    if f.kind != LOOP or s <= delta * delta:
        return s, 1.0
    rs = np.sqrt(s)
    return 2.0 * delta * rs - delta * delta, delta / rs


def graph_cost(graph: PoseGraph, config: LMConfig | None = None) -> float:
    cfg = config or LMConfig()
    total = 0.0
    for f in graph.factors:
        r, _ = _factor_terms(graph, f)
        s = float(r @ f.information @ r)
        total += _robust(f, s, cfg.huber_delta)[0]
    return total


def _build_system(graph: PoseGraph, layout: _Layout, cfg: LMConfig):
    n = layout.size
    H = np.zeros((n, n))
    g = np.zeros(n)
    cost = 0.0
    for f in graph.factors:
        r, blocks = _factor_terms(graph, f)
        s = float(r @ f.information @ r)
        c, w = _robust(f, s, cfg.huber_delta)
        cost += c
        placed = []
        for (kind, nid), J in blocks:
            off = layout.pose_index.get(nid) if kind == "pose" else layout.plane_index.get(nid)
            if off is not None:
                placed.append((off, J))
        WJ = [(off, w * (f.information @ J)) for off, J in placed]
        for off_a, Ja in placed:
            g[off_a : off_a + Ja.shape[1]] += Ja.T @ (w * (f.information @ r))
            for off_b, WJb in WJ:
                H[off_a : off_a + Ja.shape[1], off_b : off_b + WJb.shape[1]] += Ja.T @ WJb
    return H, g, cost


def _apply(graph: PoseGraph, layout: _Layout, dx: np.ndarray) -> PoseGraph:
    out = graph.copy()
    for pid, off in layout.pose_index.items():
        node = out.poses[pid]
        node.pose = Pose(so3_exp(dx[off : off + 3]) @ node.pose.rotation, node.pose.translation + dx[off + 3 : off + 6])
    for lid, off in layout.plane_index.items():
        node = out.planes[lid]
        node.plane = PlaneCP(node.plane.cp + dx[off : off + 3])
    return out


def check_rank(H: np.ndarray, tol: float = 1e-12) -> None:
    d = np.diag(H)
    if len(d) == 0:
        return
    if np.any(d <= 0):
        raise RankDeficient("some state variables are unconstrained")
    s = 1.0 / np.sqrt(d)
    w = np.linalg.eigvalsh(H * s[:, None] * s[None, :])
    if w[0] < tol * w[-1]:
        raise RankDeficient(f"normal matrix is singular beyond the gauge (min eig ratio {w[0] / w[-1]:.2e})")


def optimize(graph: PoseGraph, config: LMConfig | None = None):
    """Minimise sum r^T Omega r over all factors; returns (new graph, report)."""
    cfg = config or LMConfig()
    layout = _Layout(graph)
    H, g, cost = _build_system(graph, layout, cfg)
    costs = [cost]
    if layout.size == 0:
        return graph.copy(), OptimizationReport(costs, 0, 0, True)
    check_rank(H)
    lam = cfg.lambda_init
    accepted = 0
    converged = False
    it = 0
    while it < cfg.max_iter:
        if cost == 0.0 or not np.any(g):
            converged = True
            break
        it += 1
        D = np.diag(np.diag(H))
        try:
            dx = np.linalg.solve(H + lam * D, -g)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("damped normal matrix is singular") from exc
        try:
            trial = _apply(graph, layout, dx)
            new_cost = graph_cost(trial, cfg)
        except GcslamError:
            new_cost = np.inf
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            graph, cost = trial, new_cost
            costs.append(cost)
            accepted += 1
            lam = max(lam / cfg.lambda_down, 1e-15)
            log.debug("LM iter %d: cost %.9g (lambda %.1e)", it, cost, lam)
            if rel < cfg.rel_tol:
                converged = True
                break
            H, g, cost = _build_system(graph, layout, cfg)
        else:
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                converged = True
                break
    return graph, OptimizationReport(costs, it, accepted, converged)


# ---------------------------------------------------------------- loop closure


@dataclass
class LoopConfig:
    loop_radius: float = 5.0
    min_gap: int = 20
    max_rms: float = 0.1
    min_inlier_fraction: float = 0.5
    coarse_corr_dist: float = 3.0
    fine_corr_dist: float = 1.0
    source_voxel: float = 0.5
    max_candidates_per_frame: int = 1


def detect_loop_closures(keyframes, estimate: dict, config: LoopConfig | None = None, log_rejections=None):
    """Pose-proximity loop candidates verified by local-map registration.

    ``keyframes`` are objects with ``id`` and ``local_map.positions``;
    ``estimate`` maps key-frame id -> current world Pose.
    """
    cfg = config or LoopConfig()
    kfs = list(keyframes)
    if len(kfs) < 2:
        return []
    ids = [kf.id for kf in kfs]
    pos = np.array([estimate[i].translation for i in ids])
    factors = []
    for b in range(len(kfs)):
        older = np.arange(0, max(b - cfg.min_gap, 0))
        if len(older) == 0:
            continue
        d = np.linalg.norm(pos[older] - pos[b], axis=1)
        near = older[d < cfg.loop_radius]
        near = near[np.argsort(d[d < cfg.loop_radius], kind="stable")][: cfg.max_candidates_per_frame]
        for a in near:
            f = _verify_pair(kfs[a], kfs[b], estimate, cfg)
            if f is not None:
                factors.append(f)
            elif log_rejections is not None:
                log_rejections.append((kfs[a].id, kfs[b].id))
    return factors


def _verify_pair(kf_a, kf_b, estimate, cfg: LoopConfig):
    Ta, Tb = estimate[kf_a.id], estimate[kf_b.id]
    guess = compose(inverse(Ta), Tb)  # frame b -> frame a
    pa, pb = kf_a.local_map.positions, kf_b.local_map.positions
    swap = len(pa) < len(pb)
    src, tgt = (pa, pb) if swap else (pb, pa)
    init = inverse(guess) if swap else guess
    index = TargetIndex(tgt)
    try:
        coarse = register_point_to_plane(
            src, index, init, RegistrationConfig(max_corr_dist=cfg.coarse_corr_dist, source_voxel=cfg.source_voxel)
        )
        fine = register_point_to_plane(
            src, index, coarse.transform, RegistrationConfig(max_corr_dist=cfg.fine_corr_dist, source_voxel=cfg.source_voxel)
        )
    except GcslamError as exc:
        log.debug("loop %d-%d: registration failed (%s)", kf_a.id, kf_b.id, exc)
        return None
    ok = fine.converged and fine.rms_residual < cfg.max_rms and fine.inlier_fraction > cfg.min_inlier_fraction
    log.debug(
        "loop %d-%d: converged=%s rms=%.3f inliers=%.2f -> %s",
        kf_a.id, kf_b.id, fine.converged, fine.rms_residual, fine.inlier_fraction, ok,
    )
    if not ok:
        return None
    Z = fine.transform
    cov = fine.covariance.full()
    if swap:
        cov = invert_covariance6(Z, cov)
        Z = inverse(Z)
    return Factor(LOOP, (kf_a.id, kf_b.id), Z, relative_pose_information(Z, cov))


# ---------------------------------------------------------------- text format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _upper(m: np.ndarray) -> list:
    iu = np.triu_indices(m.shape[0])
    return [_fmt(v) for v in m[iu]]


def _from_upper(vals, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    iu = np.triu_indices(n)
    m[iu] = vals
    return m + np.triu(m, 1).T


def _pose_fields(p: Pose) -> list:
    return [_fmt(v) for v in p.translation] + [_fmt(v) for v in p.quaternion()]


def write_graph(graph: PoseGraph, path) -> None:
    lines = []
    for pid in sorted(graph.poses):
        lines.append(" ".join(["POSE", str(pid)] + _pose_fields(graph.poses[pid].pose)))
    for lid in sorted(graph.planes):
        lines.append(" ".join(["PLANE", str(lid)] + [_fmt(v) for v in graph.planes[lid].plane.cp]))
    for pid in sorted(graph.fixed):
        lines.append(f"FIXED {pid}")
    for f in graph.factors:
        meas = [_fmt(v) for v in _obs_plane(f.measurement).cp] if f.kind == PLANE else _pose_fields(f.measurement)
        lines.append(" ".join(["FACTOR", f.kind, str(f.node_ids[0]), str(f.node_ids[1])] + meas + _upper(f.information)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(path) -> PoseGraph:
    g = PoseGraph()
    fixed = set()
    factors = []
    with open(path) as fh:
        for raw in fh:
            tok = raw.split()
            if not tok or tok[0].startswith("#"):
                continue
            tag = tok[0]
            if tag == "POSE":
                v = [float(x) for x in tok[2:9]]
                g.poses[int(tok[1])] = PoseNode(int(tok[1]), Pose.from_quaternion(v[3:], v[:3]))
            elif tag == "PLANE":
                g.planes[int(tok[1])] = PlaneNode(int(tok[1]), PlaneCP([float(x) for x in tok[2:5]]))
            elif tag == "FIXED":
                fixed.add(int(tok[1]))
            elif tag == "FACTOR":
                kind, a, b = tok[1], int(tok[2]), int(tok[3])
                vals = [float(x) for x in tok[4:]]
                if kind == PLANE:
                    meas, info = PlaneCP(vals[:3]), _from_upper(vals[3:], 3)
                else:
                    meas, info = Pose.from_quaternion(vals[3:7], vals[:3]), _from_upper(vals[7:], 6)
                factors.append(Factor(kind, (a, b), meas, info))
            else:
                raise ValueError(f"unknown graph record {tag!r}")
    g.fixed = fixed or ({min(g.poses)} if g.poses else set())
    g.factors = factors
    return g
