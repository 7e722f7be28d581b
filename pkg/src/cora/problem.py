"""Measurement-graph data model, variable ordering, and feasible-state sampling.

A problem is a graph of pose and landmark variables connected by relative-pose
and range measurements.  The stacked solver state orders variable blocks as
rotations | range-unit-vectors | pose translations | landmark translations,
with landmarks kept separate from poses (they carry no rotation block).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "RelativePoseMeasurement",
    "RangeMeasurement",
    "Problem",
    "GroundTruth",
    "VariableOrdering",
    "ProblemDefect",
    "build_ordering",
    "validate",
    "require_valid",
    "random_feasible_state",
]

ORTHOGONALITY_TOL = 1e-9


def _read_only(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RelativePoseMeasurement:
    """Relative pose observation from one pose frame to another variable.

    ``rotation`` and ``translation`` are expressed in the frame of ``from_id``.
    ``kappa`` is the rotational precision and ``tau`` the translational
    precision (inverse variances).  A translation-only observation (for
    example pose-to-landmark) is encoded with ``kappa == 0``; the rotational
    residual is then skipped entirely.
    """

    from_id: str
    to_id: str
    rotation: np.ndarray
    translation: np.ndarray
    kappa: float
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", _read_only(self.rotation))
        object.__setattr__(self, "translation", _read_only(self.translation))


@dataclass(frozen=True)
class RangeMeasurement:
    """Point-to-point distance between any two translational variables."""

    from_id: str
    to_id: str
    distance: float
    sigma: float

    @property
    def weight(self) -> float:
        """Measurement precision 1/sigma^2."""
        return 1.0 / (self.sigma * self.sigma)


@dataclass(frozen=True)
class Problem:
    """A range-aided SLAM measurement graph.

    ``robot_partition`` maps pose ids to robot names; it is used only by the
    synthetic generator and trajectory metrics, never by the solver itself.
    """

    dimension: int
    pose_ids: tuple[str, ...]
    landmark_ids: tuple[str, ...] = ()
    rel_pose_measurements: tuple[RelativePoseMeasurement, ...] = ()
    range_measurements: tuple[RangeMeasurement, ...] = ()
    robot_partition: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pose_ids", tuple(self.pose_ids))
        object.__setattr__(self, "landmark_ids", tuple(self.landmark_ids))
        object.__setattr__(
            self, "rel_pose_measurements", tuple(self.rel_pose_measurements)
        )
        object.__setattr__(self, "range_measurements", tuple(self.range_measurements))
        object.__setattr__(self, "robot_partition", dict(self.robot_partition))

    @property
    def num_poses(self) -> int:
        return len(self.pose_ids)

    @property
    def num_landmarks(self) -> int:
        return len(self.landmark_ids)

    @property
    def num_ranges(self) -> int:
        return len(self.range_measurements)


@dataclass(frozen=True)
class GroundTruth:
    """Reference poses and landmark positions aligned with the problem order."""

    rotations: np.ndarray  # (n, d, d)
    translations: np.ndarray  # (n, d)
    landmarks: np.ndarray  # (l, d)

    def __post_init__(self):
        object.__setattr__(self, "rotations", _read_only(self.rotations))
        object.__setattr__(self, "translations", _read_only(self.translations))
        object.__setattr__(self, "landmarks", _read_only(self.landmarks))


@dataclass(frozen=True)
class VariableOrdering:
    """Row layout of the stacked state.

    Blocks are laid out as rotations (d rows per pose), one row per range
    measurement, one row per pose translation, then one row per landmark
    translation: k = d*n + m + n + l rows total.
    """

    dimension: int
    pose_index: Mapping[str, int]
    landmark_index: Mapping[str, int]
    num_ranges: int

    @property
    def num_poses(self) -> int:
        return len(self.pose_index)

    @property
    def num_landmarks(self) -> int:
        return len(self.landmark_index)

    @property
    def num_rows(self) -> int:
        d, n = self.dimension, self.num_poses
        return d * n + self.num_ranges + n + self.num_landmarks

    @property
    def rotation_block(self) -> slice:
        return slice(0, self.dimension * self.num_poses)

    @property
    def range_block(self) -> slice:
        start = self.dimension * self.num_poses
        return slice(start, start + self.num_ranges)

    @property
    def translation_block(self) -> slice:
        start = self.dimension * self.num_poses + self.num_ranges
        return slice(start, self.num_rows)

    def rotation_rows(self, pose_id: str) -> slice:
        i = self.pose_index[pose_id]
        d = self.dimension
        return slice(d * i, d * (i + 1))

    def range_row(self, measurement_index: int) -> int:
        return self.dimension * self.num_poses + measurement_index

    def translation_row(self, var_id: str) -> int:
        base = self.dimension * self.num_poses + self.num_ranges
        if var_id in self.pose_index:
            return base + self.pose_index[var_id]
        return base + self.num_poses + self.landmark_index[var_id]

    def is_pose(self, var_id: str) -> bool:
        return var_id in self.pose_index


@dataclass(frozen=True)
class ProblemDefect:
    """A single invariant violation found by :func:`validate`."""

    kind: str
    index: int | None
    message: str


def build_ordering(problem: Problem) -> VariableOrdering:
    """Map variable ids to dense indices in declaration order."""
    pose_index = {pid: i for i, pid in enumerate(problem.pose_ids)}
    landmark_index = {lid: i for i, lid in enumerate(problem.landmark_ids)}
    return VariableOrdering(
        dimension=problem.dimension,
        pose_index=pose_index,
        landmark_index=landmark_index,
        num_ranges=problem.num_ranges,
    )


def validate(problem: Problem) -> list[ProblemDefect]:
    """Collect all invariant violations; an empty list means the problem is well formed."""
    defects: list[ProblemDefect] = []
    d = problem.dimension
    if d not in (2, 3):
        defects.append(ProblemDefect("dimension", None, f"dimension must be 2 or 3, got {d}"))
        return defects

    known = set(problem.pose_ids) | set(problem.landmark_ids)
    if len(known) != problem.num_poses + problem.num_landmarks:
        defects.append(ProblemDefect("duplicate-id", None, "pose/landmark ids are not unique"))
    poses = set(problem.pose_ids)

    for i, m in enumerate(problem.rel_pose_measurements):
        if m.from_id == m.to_id:
            defects.append(ProblemDefect("rel-pose", i, "self edge"))
        if m.from_id not in poses:
            defects.append(
                ProblemDefect("rel-pose", i, f"unknown or non-pose source variable '{m.from_id}'")
            )
        if m.to_id not in known:
            defects.append(ProblemDefect("rel-pose", i, f"unknown variable '{m.to_id}'"))
        elif m.to_id not in poses and m.kappa != 0.0:
            defects.append(
                ProblemDefect("rel-pose", i, "landmark target requires kappa = 0")
            )
        if m.rotation.shape != (d, d):
            defects.append(ProblemDefect("rel-pose", i, "rotation has wrong shape"))
        else:
            err = np.linalg.norm(m.rotation.T @ m.rotation - np.eye(d))
            if err > ORTHOGONALITY_TOL:
                defects.append(
                    ProblemDefect("rel-pose", i, f"rotation not orthogonal (|R'R - I| = {err:.2e})")
                )
            elif np.linalg.det(m.rotation) <= 0:
                defects.append(ProblemDefect("rel-pose", i, "rotation has negative determinant"))
        if m.translation.shape != (d,):
            defects.append(ProblemDefect("rel-pose", i, "translation has wrong shape"))
        if m.kappa < 0:
            defects.append(ProblemDefect("rel-pose", i, "negative kappa"))
        if m.tau < 0:
            defects.append(ProblemDefect("rel-pose", i, "negative tau"))

    for i, m in enumerate(problem.range_measurements):
        if m.from_id == m.to_id:
            defects.append(ProblemDefect("range", i, "self edge"))
        for vid in (m.from_id, m.to_id):
            if vid not in known:
                defects.append(ProblemDefect("range", i, f"unknown variable '{vid}'"))
        if not m.distance > 0:
            defects.append(ProblemDefect("range", i, "non-positive distance"))
        if not m.sigma > 0:
            defects.append(ProblemDefect("range", i, "non-positive sigma"))

    return defects


def require_valid(problem: Problem) -> None:
    """Raise ``ValueError`` listing every defect if the problem is malformed."""
    defects = validate(problem)
    if defects:
        lines = [f"  [{d.kind} #{d.index}] {d.message}" for d in defects]
        raise ValueError("invalid problem:\n" + "\n".join(lines))


def random_feasible_state(
    problem: Problem,
    p: int,
    seed: int | np.random.Generator = 0,
    ordering: VariableOrdering | None = None,
    translation_scale: float = 1.0,
) -> np.ndarray:
    """Sample a uniformly random feasible stacked state of rank ``p``.

    Rotation blocks are drawn from the orthogonal group via QR of a Gaussian
    matrix, range rows uniformly on the sphere, and translations from an
    isotropic Gaussian.  Deterministic for a fixed seed.
    """
    d = problem.dimension
    if p < d:
        raise ValueError(f"rank p={p} must be at least the dimension d={d}")
    if ordering is None:
        ordering = build_ordering(problem)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    n, m, l = ordering.num_poses, ordering.num_ranges, ordering.num_landmarks
    X = np.zeros((ordering.num_rows, p))

    if n:
        gauss = rng.standard_normal((n, p, d))
        q, r = np.linalg.qr(gauss)
        # fix the QR sign convention so sampling is uniform over O(d) frames
        signs = np.sign(np.einsum("nii->ni", r))
        signs[signs == 0] = 1.0
        q = q * signs[:, None, :]
        X[ordering.rotation_block] = np.transpose(q, (0, 2, 1)).reshape(n * d, p)

    if m:
        rows = rng.standard_normal((m, p))
        X[ordering.range_block] = rows / np.linalg.norm(rows, axis=1, keepdims=True)

    X[ordering.translation_block] = translation_scale * rng.standard_normal((n + l, p))
    return X
