"""Consecutive key-frame ground association by CP innovation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonInvertibleCovariance
from .ground import GroundObservation
from .plane import transform_plane, transform_plane_jacobian
from .se3 import Pose

CHI2_3DOF_95 = 7.815


@dataclass(frozen=True, eq=False)
class PlaneInnovation:
    delta: np.ndarray
    information: np.ndarray
    mahalanobis: float


@dataclass(frozen=True)
class SamePlane:
    landmark_id: int


@dataclass(frozen=True)
class NewPlane:
    pass


def plane_innovation(
    obs_i: GroundObservation,
    obs_i1: GroundObservation,
    T_i_i1: Pose,
    pose_noise_var: float = 0.0,
) -> PlaneInnovation:
    """Innovation of the i+1 ground seen from key-frame i.

    ``T_i_i1`` maps frame-i points into frame i+1, so the (i+1) plane is
    carried back to frame i with transform_plane(.., T_i_i1). Relative pose
    uncertainty is ignored unless ``pose_noise_var`` adds an isotropic term.
    """
    predicted = transform_plane(obs_i1.plane, T_i_i1)
    delta = obs_i.plane.cp - predicted.cp
    J = transform_plane_jacobian(obs_i1.plane, T_i_i1)
    S = obs_i.covariance + J @ obs_i1.covariance @ J.T
    if pose_noise_var > 0:
        S = S + pose_noise_var * np.eye(3)
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleCovariance("innovation covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    info = Linv.T @ Linv
    z = Linv @ delta
    return PlaneInnovation(delta, 0.5 * (info + info.T), float(z @ z))


def associate_or_spawn(prev_landmark_id: int | None, innovation: PlaneInnovation, gate: float = CHI2_3DOF_95):
    """SamePlane(prev) when the Mahalanobis distance is within the gate (inclusive)."""
    if gate <= 0:
        raise ValueError("gate must be positive")
    if prev_landmark_id is not None and innovation.mahalanobis <= gate:
        return SamePlane(prev_landmark_id)
    return NewPlane()
