"""Trajectory error metrics with optional rigid alignment.

Alignment solves the orthogonal Procrustes problem (rotation + translation,
no scale) minimizing the translational RMSE between the estimate and ground
truth; rotational errors are geodesic angles of the relative rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = ["TrajectoryMetrics", "trajectory_metrics", "rigid_alignment", "rotation_angle"]


@dataclass(frozen=True)
class TrajectoryMetrics:
    translational_rmse: float
    rotational_rmse_deg: float
    per_robot: Mapping[str, tuple[float, float]] = field(default_factory=dict)


def rigid_alignment(source: np.ndarray, target: np.ndarray):
    """Rotation R and translation t minimizing sum |R source_i + t - target_i|^2."""
    dim = source.shape[1]
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    H = (target - mu_t).T @ (source - mu_s)
    if np.linalg.norm(H) < 1e-15:
        R = np.eye(dim)
    else:
        U, _, Vt = np.linalg.svd(H)
        D = np.eye(dim)
        D[-1, -1] = np.sign(np.linalg.det(U @ Vt))
        R = U @ D @ Vt
    t = mu_t - R @ mu_s
    return R, t


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    d = R.shape[0]
    if d == 2:
        return float(abs(np.arctan2(R[1, 0], R[0, 0])))
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))


def trajectory_metrics(
    est_rotations: np.ndarray,
    est_translations: np.ndarray,
    gt_rotations: np.ndarray,
    gt_translations: np.ndarray,
    align: bool = True,
    robot_of: Mapping[int, str] | None = None,
) -> TrajectoryMetrics:
    """Translational RMSE (m) and rotational RMSE (deg) versus ground truth.

    With ``align`` a single global rigid transform is applied to the estimate
    before computing errors, removing the gauge freedom.  ``robot_of`` maps
    pose indices to robot names for per-robot breakdowns.
    """
    est_translations = np.asarray(est_translations, dtype=float)
    gt_translations = np.asarray(gt_translations, dtype=float)
    if est_translations.shape != gt_translations.shape:
        raise ValueError(
            f"pose count mismatch: estimate {est_translations.shape} vs "
            f"ground truth {gt_translations.shape}"
        )
    n = est_translations.shape[0]

    if align and n:
        R, t = rigid_alignment(est_translations, gt_translations)
        est_translations = est_translations @ R.T + t
        est_rotations = np.einsum("ij,njk->nik", R, est_rotations)

    trans_err_sq = np.sum((est_translations - gt_translations) ** 2, axis=1)
    rot_err = np.array(
        [
            rotation_angle(gt_rotations[i].T @ est_rotations[i])
            for i in range(n)
        ]
    )

    def rmse(values: np.ndarray) -> float:
        return float(np.sqrt(np.mean(values))) if values.size else 0.0

    per_robot: dict[str, tuple[float, float]] = {}
    if robot_of:
        for robot in sorted(set(robot_of.values())):
            idx = np.array([i for i in range(n) if robot_of.get(i) == robot])
            if idx.size:
                per_robot[robot] = (
                    rmse(trans_err_sq[idx]),
                    float(np.degrees(rmse(rot_err[idx] ** 2))),
                )

    return TrajectoryMetrics(
        translational_rmse=rmse(trans_err_sq),
        rotational_rmse_deg=float(np.degrees(rmse(rot_err**2))),
        per_robot=per_robot,
    )
