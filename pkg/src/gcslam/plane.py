"""Infinite planes in closest-point (CP) and Hesse form, and their frame transforms.

A CP plane is the single 3-vector ``cp = d * n``: the point of the plane
nearest to the frame origin. It is minimal but undefined for planes through
the origin, so every constructor and transform guards ``|cp| >= CP_MIN_NORM``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularPlane
from .se3 import Pose

CP_MIN_NORM = 0.1
# a plane built exactly at the limit may land a few ulps below it after normalization
_NORM_SLACK = 1.0 - 1e-12


def _regular(norm: float, min_norm: float) -> bool:
    return bool(norm >= min_norm * _NORM_SLACK)


@dataclass(frozen=True, eq=False)
class PlaneCP:
    cp: np.ndarray
    min_norm: float = CP_MIN_NORM

    def __post_init__(self):
        cp = np.array(self.cp, dtype=float).reshape(3)
        norm = float(np.linalg.norm(cp))
        if not _regular(norm, self.min_norm):
            raise SingularPlane(f"|cp| = {norm:.3g} m is below {self.min_norm} m")
        cp.setflags(write=False)
        object.__setattr__(self, "cp", cp)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.cp))

    def signed_distance(self, points) -> np.ndarray:
        """n^T p - d for each point (zero on the plane)."""
        d = self.norm
        return np.asarray(points, dtype=float) @ (self.cp / d) - d

    def __repr__(self) -> str:
        return f"PlaneCP({np.round(self.cp, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class PlaneHF:
    """n^T p = d with unit n, canonicalized to d >= 0."""

    normal: np.ndarray
    dist: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        n = n / np.linalg.norm(n)
        d = float(self.dist)
        if d < 0:
            n, d = -n, -d
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "dist", d)


def cp_to_hf(p: PlaneCP, min_norm: float = CP_MIN_NORM) -> PlaneHF:
    d = float(np.linalg.norm(p.cp))
    if not _regular(d, min_norm):
        raise SingularPlane(f"|cp| = {d:.3g} m is below {min_norm} m")
    return PlaneHF(p.cp / d, d)


def hf_to_cp(h: PlaneHF, min_norm: float = CP_MIN_NORM) -> PlaneCP:
    return PlaneCP(h.dist * h.normal, min_norm=min_norm)


def transform_cp(cp: np.ndarray, T_b_a: Pose) -> np.ndarray:
    """Raw CP transform without the singularity guard on the result."""
    cp = np.asarray(cp, dtype=float)
    d = float(np.linalg.norm(cp))
    n = cp / d
    return (T_b_a.rotation.T @ n) * (d - n @ T_b_a.translation)


def transform_plane(p: PlaneCP, T_b_a: Pose, min_norm: float = CP_MIN_NORM) -> PlaneCP:
    """Re-express a plane given in frame a in frame b.

    ``T_b_a`` maps frame-b coordinates into frame a (x_a = R x_b + t), so the
    Hesse parameters follow n_b = R^T n_a and d_b = d_a - n_a^T t. Example:
    the floor (0, 0, -1.5) seen from a frame raised by t = (0, 0, 1) becomes
    (0, 0, -2.5).
    """
    out = transform_cp(p.cp, T_b_a)
    if not _regular(np.linalg.norm(out), min_norm):
        raise SingularPlane("transformed plane passes through the new origin")
    return PlaneCP(out, min_norm=min_norm)


def transform_plane_jacobian(p: PlaneCP, T_b_a: Pose, min_norm: float = CP_MIN_NORM) -> np.ndarray:
    """d transform_cp(cp, T) / d cp, evaluated at p (rows: output, cols: input)."""
    cp = p.cp
    sq = float(cp @ cp)
    if not _regular(np.sqrt(sq), min_norm):
        raise SingularPlane("linearization point is singular")
    R, t = T_b_a.rotation, T_b_a.translation
    Rt = R.T
    ct = float(cp @ t)
    return (
        Rt
        - (np.outer(Rt @ cp, t) + ct * Rt) / sq
        + 2.0 * ct * np.outer(Rt @ cp, cp) / (sq * sq)
    )
