"""Shared fixtures: the zero-noise square problem and random problem factories."""

from __future__ import annotations

import numpy as np
import pytest

from cora.io import rot2
from cora.problem import (
    GroundTruth,
    Problem,
    RangeMeasurement,
    RelativePoseMeasurement,
    build_ordering,
)


def make_square_fixture(kappa: float = 10.0, tau: float = 20.0, sigma: float = 0.05):
    """Four poses on the unit square with exact odometry, one loop closure,
    and four exact ranges to a center landmark."""
    thetas = [0.0, np.pi / 2, np.pi, 3 * np.pi / 2]
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    rotations = np.array([rot2(t) for t in thetas])
    pose_ids = tuple(f"A{i}" for i in range(4))

    rel = []
    for i, j in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        rel.append(
            RelativePoseMeasurement(
                from_id=pose_ids[i],
                to_id=pose_ids[j],
                rotation=rotations[i].T @ rotations[j],
                translation=rotations[i].T @ (positions[j] - positions[i]),
                kappa=kappa,
                tau=tau,
            )
        )

    center = np.array([0.5, 0.5])
    ranges = tuple(
        RangeMeasurement(
            from_id=pid,
            to_id="L0",
            distance=float(np.linalg.norm(center - positions[i])),
            sigma=sigma,
        )
        for i, pid in enumerate(pose_ids)
    )

    problem = Problem(
        dimension=2,
        pose_ids=pose_ids,
        landmark_ids=("L0",),
        rel_pose_measurements=tuple(rel),
        range_measurements=ranges,
        robot_partition={pid: "A" for pid in pose_ids},
    )
    truth = GroundTruth(
        rotations=rotations, translations=positions, landmarks=center[None, :]
    )
    return problem, truth


def ground_truth_state(problem: Problem, truth: GroundTruth, p: int | None = None):
    """Feasible stacked state matching the ground truth, range rows optimal."""
    from cora.staircase import state_from_solution
    from cora.assembly import RankDSolution

    ordering = build_ordering(problem)
    sol = RankDSolution(
        rotations=truth.rotations,
        translations=truth.translations,
        landmarks=truth.landmarks,
    )
    return state_from_solution(problem, ordering, sol, p=p)


def random_problem(
    dimension: int = 2,
    num_poses: int = 6,
    num_landmarks: int = 2,
    num_ranges: int = 5,
    num_extra_edges: int = 3,
    seed: int = 0,
    translation_only_fraction: float = 0.2,
) -> Problem:
    """Random well-formed problem; measurements need not be mutually consistent."""
    rng = np.random.default_rng(seed)
    d = dimension
    pose_ids = tuple(f"A{i}" for i in range(num_poses))
    landmark_ids = tuple(f"L{j}" for j in range(num_landmarks))

    def random_rotation():
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, -1] *= -1
        return q

    rel = []

    def add_edge(a: str, b: str, translation_only: bool):
        rel.append(
            RelativePoseMeasurement(
                from_id=a,
                to_id=b,
                rotation=random_rotation(),
                translation=rng.standard_normal(d),
                kappa=0.0 if translation_only else float(rng.uniform(0.5, 5.0)),
                tau=float(rng.uniform(0.5, 5.0)),
            )
        )

    for i in range(num_poses - 1):
        add_edge(pose_ids[i], pose_ids[i + 1], rng.uniform() < translation_only_fraction)
    for _ in range(num_extra_edges if num_poses >= 2 else 0):
        i, j = rng.choice(num_poses, size=2, replace=False)
        add_edge(pose_ids[i], pose_ids[j], rng.uniform() < translation_only_fraction)

    all_ids = pose_ids + landmark_ids
    ranges = []
    for _ in range(num_ranges if len(all_ids) >= 2 else 0):
        i, j = rng.choice(len(all_ids), size=2, replace=False)
        ranges.append(
            RangeMeasurement(
                from_id=all_ids[i],
                to_id=all_ids[j],
                distance=float(rng.uniform(0.5, 5.0)),
                sigma=float(rng.uniform(0.1, 1.0)),
            )
        )

    return Problem(
        dimension=d,
        pose_ids=pose_ids,
        landmark_ids=landmark_ids,
        rel_pose_measurements=tuple(rel),
        range_measurements=tuple(ranges),
    )


@pytest.fixture
def square():
    return make_square_fixture()


@pytest.fixture
def square_problem(square):
    return square[0]
