"""Odometry -> key-frames -> ground landmarks -> pose graph, plus ATE evaluation."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .association import CHI2_3DOF_95, SamePlane, associate_or_spawn, plane_innovation
from .errors import ConfigError, GcslamError, NoOverlap, RegistrationFailure
from .ground import GroundConfig, GroundObservation, extract_ground
from .plane import PlaneHF, cp_to_hf, transform_plane
from .pose_graph import (
    ODOMETRY,
    PLANE,
    Factor,
    LMConfig,
    LoopConfig,
    PoseGraph,
    detect_loop_closures,
    optimize,
    relative_pose_information,
)
from .registration import RegistrationConfig, Scan, TargetIndex, beam_covariance, register_point_to_plane, voxel_downsample
from .se3 import (
    Pose,
    PoseCovariance,
    compose,
    compose_covariance6,
    invert_covariance6,
    inverse,
    rotation_to_rpy,
    so3_exp,
    so3_log,
)
from .sliding_map import MaintenanceConfig, SlidingMap, maintain, maintain_range_based, recenter

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    # registration
    max_corr_dist: float = 1.0
    normal_k: int = 8
    min_inliers: int = 50
    icp_max_iter: int = 30
    cond_floor: float = 1e-4
    source_voxel: float = 0.3
    normal_max_curvature: float = 1.0
    normal_min_planarity: float = 1e-6
    normal_radius: float = 1e9
    # negative: derived from the range noise sigma (see registration())
    max_plane_residual: float = -1.0
    normal_max_thickness: float = -1.0
    # per-step pose noise added to the registration covariance
    process_rot_sigma: float = 0.002
    process_trans_sigma: float = 0.02
    # sliding map
    mode: str = "observation"
    assoc_dist: float = 0.3
    elimination_threshold: float = 0.25
    map_voxel: float = 0.2
    assoc_metric: str = "euclidean"
    range_cutoff: float = 80.0
    # ground extraction
    ground_box_half_x: float = 10.0
    ground_box_half_y: float = 10.0
    ground_band: float = 0.5
    sensor_height_prior: float = -1.5
    min_ground_points: int = 100
    ransac_iterations: int = 200
    ransac_inlier_dist: float = 0.05
    ground_min_inlier_fraction: float = 0.8
    # association
    gate: float = CHI2_3DOF_95
    assoc_pose_noise_var: float = 1e-4
    # key-frames
    keyframe_dist: float = 2.0
    keyframe_angle_deg: float = 15.0
    # loop closure
    loop_radius: float = 5.0
    loop_min_gap: int = 20
    loop_max_rms: float = 0.1
    loop_min_inlier_fraction: float = 0.5
    # Levenberg-Marquardt
    lm_lambda_init: float = 1e-4
    lm_max_iter: int = 100
    lm_rel_tol: float = 1e-9
    huber_delta: float = 1.0
    # noise injected into each odometry increment (robustness studies)
    odom_noise_rot_sigma: float = 0.0
    odom_noise_trans_sigma: float = 0.0
    seed: int = 0
    # simulator
    sim_frames: int = 0
    sim_rate: float = 10.0
    range_noise_sigma: float = 0.02
    sim_bias_max: float = 0.0
    sim_bias_form: str = "sin2"
    sim_horizontal_step_deg: float = 1.0
    sim_prior_rot_sigma: float = 0.002
    sim_prior_trans_sigma: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("observation", "range"):
            raise ConfigError(f"mode must be 'observation' or 'range', got {self.mode!r}")
        if self.assoc_metric not in ("euclidean", "mahalanobis"):
            raise ConfigError(f"unknown assoc_metric {self.assoc_metric!r}")
        positive = [
            "max_corr_dist", "normal_k", "min_inliers", "icp_max_iter", "assoc_dist",
            "elimination_threshold", "range_cutoff", "min_ground_points", "ransac_iterations",
            "ransac_inlier_dist", "gate", "keyframe_dist", "keyframe_angle_deg", "loop_radius",
            "lm_lambda_init", "lm_max_iter", "huber_delta", "sim_rate", "sim_horizontal_step_deg",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        nonneg = [
            "cond_floor", "source_voxel", "process_rot_sigma", "process_trans_sigma", "map_voxel",
            "assoc_pose_noise_var", "loop_min_gap", "odom_noise_rot_sigma", "odom_noise_trans_sigma",
            "sim_frames", "range_noise_sigma", "sim_bias_max", "sim_prior_rot_sigma", "sim_prior_trans_sigma",
            "seed",
        ]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.ground_min_inlier_fraction <= 1:
            raise ConfigError("ground_min_inlier_fraction must lie in [0, 1]")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        values = parse_config_text(open(path).read())
        values.update(overrides)
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(getattr(cls, key)))
        return cls(**kwargs)

    def registration(self) -> RegistrationConfig:
        sigma = self.range_noise_sigma
        thickness = self.normal_max_thickness if self.normal_max_thickness >= 0 else 2.0 * sigma + 1e-3
        residual = self.max_plane_residual if self.max_plane_residual >= 0 else 0.05 + 10.0 * sigma
        return RegistrationConfig(
            max_corr_dist=self.max_corr_dist, normal_k=self.normal_k, min_inliers=self.min_inliers,
            max_iter=self.icp_max_iter, cond_floor=self.cond_floor, source_voxel=self.source_voxel,
            max_curvature=self.normal_max_curvature, min_planarity=self.normal_min_planarity,
            normal_radius=self.normal_radius, max_plane_residual=residual,
            max_thickness=thickness,
        )

    def maintenance(self) -> MaintenanceConfig:
        return MaintenanceConfig(self.assoc_dist, self.elimination_threshold, self.map_voxel, self.assoc_metric)

    def ground(self) -> GroundConfig:
        return GroundConfig(
            box_half_x=self.ground_box_half_x, box_half_y=self.ground_box_half_y, band=self.ground_band,
            sensor_height_prior=self.sensor_height_prior, min_ground_points=self.min_ground_points,
            ransac_iterations=self.ransac_iterations, ransac_inlier_dist=self.ransac_inlier_dist,
            min_inlier_fraction=self.ground_min_inlier_fraction,
        )

    def lm(self) -> LMConfig:
        return LMConfig(lambda_init=self.lm_lambda_init, max_iter=self.lm_max_iter, rel_tol=self.lm_rel_tol, huber_delta=self.huber_delta)

    def loop(self) -> LoopConfig:
        return LoopConfig(
            loop_radius=self.loop_radius, min_gap=self.loop_min_gap, max_rms=self.loop_max_rms,
            min_inlier_fraction=self.loop_min_inlier_fraction, fine_corr_dist=self.max_corr_dist,
        )


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; '#' starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


# ---------------------------------------------------------------- key-frames


@dataclass
class KeyFrame:
    id: int
    frame_index: int
    pose: Pose
    local_map: SlidingMap
    timestamp: float
    ground: GroundObservation | None = None
    odom_from_prev: Pose | None = None
    odom_cov_from_prev: np.ndarray | None = None


def should_create_keyframe(last_kf_pose: Pose | None, current_pose: Pose, dist: float = 2.0, angle_deg: float = 15.0) -> bool:
    if last_kf_pose is None:
        return True
    rel = compose(inverse(last_kf_pose), current_pose)
    if np.linalg.norm(rel.translation) > dist:
        return True
    return np.degrees(np.linalg.norm(so3_log(rel.rotation))) > angle_deg


# ---------------------------------------------------------------- odometry


@dataclass
class OdometryResult:
    timestamps: np.ndarray
    poses: list
    point_counts: np.ndarray
    frame_times_ms: np.ndarray
    keyframes: list
    step_covariances: list = field(default_factory=list)
    final_map: SlidingMap | None = None


def _scan_with_cov(scan, sigma: float) -> Scan:
    if isinstance(scan, Scan):
        return scan
    pts = np.asarray(scan, dtype=float)
    return Scan(pts, beam_covariance(pts, sigma))


def run_odometry(
    scans,
    priors=None,
    config: PipelineConfig | None = None,
    mode: str | None = None,
    initial_pose: Pose | None = None,
) -> OdometryResult:
    """Scan-to-map LiDAR odometry over a scan sequence.

    ``priors[k]`` is the motion from frame k-1 to k used as the registration
    initial guess (identity when absent). Poses are returned in the frame of
    ``initial_pose`` (default: the first sensor frame).
    """
    cfg = config or PipelineConfig()
    mode = mode or cfg.mode
    if mode not in ("observation", "range"):
        raise ConfigError(f"unknown odometry mode {mode!r}")
    scans = list(scans)
    if not scans:
        raise GcslamError("empty scan stream")
    reg_cfg = cfg.registration()
    mcfg = cfg.maintenance()
    process = np.diag([cfg.process_rot_sigma**2] * 3 + [cfg.process_trans_sigma**2] * 3)
    rng_noise = cfg.odom_noise_rot_sigma > 0 or cfg.odom_noise_trans_sigma > 0

    pose = initial_pose or Pose.identity()
    smap = SlidingMap.empty(0)
    poses, counts, times, step_covs, keyframes = [], [], [], [], []
    stamps = []
    kf_pose = None
    acc_rel, acc_cov = Pose.identity(), np.zeros((6, 6))

    for k, raw in enumerate(scans):
        tic = time.perf_counter()
        scan = _scan_with_cov(raw, cfg.range_noise_sigma)
        if k == 0:
            step_cov = np.zeros((6, 6))
        else:
            guess = priors[k] if priors is not None else Pose.identity()
            try:
                res = register_point_to_plane(scan, TargetIndex.from_config(smap.positions, reg_cfg), guess, reg_cfg)
            except GcslamError as exc:
                raise RegistrationFailure(k, exc) from exc
            X = res.transform  # frame k -> frame k-1
            if rng_noise:
                rng = np.random.default_rng([cfg.seed, 7, k])
                X = Pose(so3_exp(rng.normal(size=3) * cfg.odom_noise_rot_sigma) @ X.rotation,
                         X.translation + rng.normal(size=3) * cfg.odom_noise_trans_sigma)
            step_cov = res.covariance.full() + process
            Xinv = inverse(X)
            smap = recenter(smap, Xinv, PoseCovariance.from_full(invert_covariance6(X, step_cov)))
            pose = compose(pose, X)
            acc_cov = compose_covariance6(acc_rel, acc_cov, X, step_cov)
            acc_rel = compose(acc_rel, X)
        if mode == "observation":
            smap = maintain(smap, scan, mcfg, frame_index=k)
        else:
            smap = maintain_range_based(smap, scan, cfg.range_cutoff, cfg.map_voxel, frame_index=k)
        if should_create_keyframe(kf_pose, pose, cfg.keyframe_dist, cfg.keyframe_angle_deg):
            kf = KeyFrame(len(keyframes), k, pose, smap, float(scan.timestamp))
            if keyframes:
                kf.odom_from_prev, kf.odom_cov_from_prev = acc_rel, acc_cov
            keyframes.append(kf)
            kf_pose = pose
            acc_rel, acc_cov = Pose.identity(), np.zeros((6, 6))
        poses.append(pose)
        stamps.append(float(scan.timestamp))
        step_covs.append(step_cov)
        counts.append(len(smap))
        times.append(1e3 * (time.perf_counter() - tic))
    return OdometryResult(np.array(stamps), poses, np.array(counts), np.array(times), keyframes, step_covs, smap)


# ---------------------------------------------------------------- SLAM


@dataclass
class SlamResult:
    timestamps: np.ndarray
    poses: list
    odometry: OdometryResult
    graph: PoseGraph
    keyframes: list
    landmark_of: dict = field(default_factory=dict)
    innovations: list = field(default_factory=list)
    loop_factors: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    graphs: dict = field(default_factory=dict)
    initial_pose: Pose = field(default_factory=Pose.identity)

    @property
    def n_landmarks(self) -> int:
        return len(self.graph.planes)


def build_graph(keyframes, ground: bool, config: PipelineConfig):
    """Pose graph with odometry factors and, optionally, associated ground factors.

    Poses live in the first key-frame's sensor frame (poses are re-based by the
    caller). Returns (graph, landmark id per key-frame id, innovation log).
    """
    g = PoseGraph()
    for kf in keyframes:
        g.add_pose(kf.id, kf.pose)
        if kf.odom_from_prev is not None:
            info = relative_pose_information(kf.odom_from_prev, kf.odom_cov_from_prev)
            g.add_factor(Factor(ODOMETRY, (kf.id - 1, kf.id), kf.odom_from_prev, info))
    landmark_of, innovations = {}, []
    if not ground:
        return g, landmark_of, innovations
    prev = None
    for kf in keyframes:
        if kf.ground is None:
            continue
        decision = None
        if prev is not None:
            T_i_i1 = compose(inverse(kf.pose), prev.pose)
            try:
                inn = plane_innovation(prev.ground, kf.ground, T_i_i1, config.assoc_pose_noise_var)
                decision = associate_or_spawn(landmark_of[prev.id], inn, config.gate)
                innovations.append((prev.id, kf.id, inn.mahalanobis, type(decision).__name__))
            except GcslamError as exc:
                log.debug("association %d-%d failed: %s", prev.id, kf.id, exc)
        if isinstance(decision, SamePlane):
            lid = decision.landmark_id
        else:
            lid = len(g.planes)
            g.add_plane(lid, transform_plane(kf.ground.plane, inverse(kf.pose)))
        landmark_of[kf.id] = lid
        g.add_factor(Factor(PLANE, (kf.id, lid), kf.ground.plane, kf.ground.information))
        prev = kf
    return g, landmark_of, innovations


def attach_ground(keyframes, config: PipelineConfig) -> None:
    gcfg = config.ground()
    for kf in keyframes:
        try:
            kf.ground = extract_ground(kf.local_map.positions, kf.local_map.covariances, gcfg, rng=[config.seed, kf.id])
        except GcslamError as exc:
            log.debug("key-frame %d: no ground (%s)", kf.id, exc)
            kf.ground = None


def _rebase(keyframes):
    """Key-frames re-expressed relative to the first key-frame."""
    base = inverse(keyframes[0].pose)
    return [dataclasses.replace(kf, pose=compose(base, kf.pose)) for kf in keyframes]


def run_slam(
    scans,
    priors=None,
    config: PipelineConfig | None = None,
    ground_constraints: bool = True,
    loop_closure: bool = True,
    initial_pose: Pose | None = None,
) -> SlamResult:
    cfg = config or PipelineConfig()
    odo = run_odometry(scans, priors, cfg, initial_pose=initial_pose)
    origin = initial_pose or Pose.identity()
    kfs = _rebase(odo.keyframes)
    if ground_constraints:
        attach_ground(kfs, cfg)
    graph, landmark_of, innovations = build_graph(kfs, ground_constraints, cfg)
    result = SlamResult(odo.timestamps, list(odo.poses), odo, graph, kfs, landmark_of, innovations, initial_pose=origin)
    result.graphs["initial"] = graph
    if not (ground_constraints or loop_closure):
        return result

    lm = cfg.lm()
    if ground_constraints:
        graph, result.reports["ground"] = optimize(graph, lm)
        result.graphs["ground"] = graph
    if loop_closure:
        estimate = {pid: node.pose for pid, node in graph.poses.items()}
        loops = detect_loop_closures(kfs, estimate, cfg.loop())
        result.loop_factors = loops
        if loops:
            graph = graph.copy()
            for f in loops:
                graph.add_factor(f)
            graph, result.reports["loop"] = optimize(graph, lm)
        result.graphs["loop"] = graph
    result.graph = graph
    result.poses = correct_trajectory(odo, kfs, graph, origin)
    return result


def correct_trajectory(odo: OdometryResult, kfs, graph: PoseGraph, origin: Pose) -> list:
    """Carry every frame along with the optimized pose of its preceding key-frame."""
    kf_frames = np.array([kf.frame_index for kf in kfs])
    base = odo.keyframes[0].pose
    out = []
    for k, p in enumerate(odo.poses):
        j = int(np.searchsorted(kf_frames, k, side="right") - 1)
        kf_lo = odo.keyframes[j].pose
        kf_opt = compose(base, graph.poses[kfs[j].id].pose)
        out.append(compose(kf_opt, compose(inverse(kf_lo), p)))
    return out


def assemble_map(result: SlamResult, radius: float = 20.0, voxel: float = 0.2) -> np.ndarray:
    """World point cloud from key-frame local maps placed at optimized poses."""
    base = result.odometry.keyframes[0].pose
    chunks = []
    for kf in result.keyframes:
        pts = kf.local_map.positions
        pts = pts[np.linalg.norm(pts, axis=1) <= radius]
        chunks.append(compose(base, result.graph.poses[kf.id].pose).apply(pts))
    if not chunks:
        return np.zeros((0, 3))
    cloud = np.vstack(chunks)
    return cloud[voxel_downsample(cloud, voxel)]


def landmark_planes_world(result: SlamResult) -> dict:
    """Plane landmarks in the output frame, in Hesse form.

    The output frame may put its origin on a floor (simulator ground truth
    does), where the closest-point form is singular, hence HF here.
    """
    base = result.odometry.keyframes[0].pose
    out = {}
    for lid, node in result.graph.planes.items():
        hf = cp_to_hf(node.plane)
        n = base.rotation @ hf.normal
        out[lid] = PlaneHF(n, hf.dist + float(n @ base.translation))
    return out


# ---------------------------------------------------------------- evaluation


@dataclass
class AteReport:
    rmse_total_m: float
    rmse_x_m: float
    rmse_y_m: float
    rmse_z_m: float
    rot_rmse_roll_deg: float
    rot_rmse_pitch_deg: float
    rot_rmse_yaw_deg: float
    rot_rmse_deg: float
    matched: int
    per_frame_translation: np.ndarray = field(repr=False)
    per_frame_rotation_deg: np.ndarray = field(repr=False)

    def as_text(self) -> str:
        keys = [
            "rmse_x_m", "rmse_y_m", "rmse_z_m", "rmse_total_m",
            "rot_rmse_roll_deg", "rot_rmse_pitch_deg", "rot_rmse_yaw_deg", "rot_rmse_deg", "matched",
        ]
        return "\n".join(f"{k} = {getattr(self, k):.6f}" if k != "matched" else f"{k} = {self.matched}" for k in keys) + "\n"


def umeyama_se3(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform S minimising sum |S src_i - dst_i|^2 (scale fixed to 1)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


def associate_timestamps(ts_a, ts_b, max_dt: float = 0.01):
    """Index pairs (i, j) with |ts_a[i] - ts_b[j]| <= max_dt, nearest match per i."""
    ts_b = np.asarray(ts_b)
    order = np.argsort(ts_b)
    sb = ts_b[order]
    pairs = []
    for i, t in enumerate(ts_a):
        k = int(np.searchsorted(sb, t))
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(sb) and abs(sb[c] - t) <= max_dt and (best is None or abs(sb[c] - t) < abs(sb[best] - t)):
                best = c
        if best is not None:
            pairs.append((i, int(order[best])))
    return pairs


def evaluate_ate(est_ts, est_poses, gt_ts, gt_poses, align: bool = False, max_dt: float = 0.01) -> AteReport:
    pairs = associate_timestamps(est_ts, gt_ts, max_dt)
    if len(pairs) < 2:
        raise NoOverlap(f"only {len(pairs)} frames matched within {max_dt} s")
    est = [est_poses[i] for i, _ in pairs]
    gt = [gt_poses[j] for _, j in pairs]
    if align:
        S = umeyama_se3(np.array([p.translation for p in est]), np.array([p.translation for p in gt]))
        est = [compose(S, p) for p in est]
    dp = np.array([a.translation - b.translation for a, b in zip(est, gt)])
    rel = [b.rotation.T @ a.rotation for a, b in zip(est, gt)]
    rpy = np.degrees(np.array([rotation_to_rpy(R) for R in rel]))
    ang = np.degrees(np.array([np.linalg.norm(so3_log(R)) for R in rel]))

    def rms(x):
        return float(np.sqrt(np.mean(np.square(x))))

    return AteReport(
        rmse_total_m=rms(np.linalg.norm(dp, axis=1)),
        rmse_x_m=rms(dp[:, 0]),
        rmse_y_m=rms(dp[:, 1]),
        rmse_z_m=rms(dp[:, 2]),
        rot_rmse_roll_deg=rms(rpy[:, 0]),
        rot_rmse_pitch_deg=rms(rpy[:, 1]),
        rot_rmse_yaw_deg=rms(rpy[:, 2]),
        rot_rmse_deg=rms(ang),
        matched=len(pairs),
        per_frame_translation=dp,
        per_frame_rotation_deg=ang,
    )


# ---------------------------------------------------------------- simulation glue


def sensor_from_config(config: PipelineConfig):
    from .sim import SensorModel

    return SensorModel(
        horizontal_step=np.deg2rad(config.sim_horizontal_step_deg),
        range_noise_sigma=config.range_noise_sigma,
        bias_max=config.sim_bias_max,
        bias_form=config.sim_bias_form,
        rng_seed=config.seed,
    )


def simulate_scenario(name: str, config: PipelineConfig | None = None, **params):
    """Build a named scenario and simulate it with the config's sensor settings.

    Returns (world, trajectory spec, SimulatedRun).
    """
    from .sim import generate_scenario, simulate

    cfg = config or PipelineConfig()
    world, spec = generate_scenario(name, **params)
    run = simulate(
        world, spec, sensor_from_config(cfg), rate=cfg.sim_rate, n_frames=cfg.sim_frames or None,
        prior_rot_sigma=cfg.sim_prior_rot_sigma, prior_trans_sigma=cfg.sim_prior_trans_sigma,
    )
    return world, spec, run
