"""Synthetic multi-robot problem generation and parameter-sweep harness.

Robots follow bounded random-walk trajectories; odometry connects consecutive
poses, optional loop closures connect spatially close poses of different
robots, and range measurements connect near pose-pose and pose-landmark
pairs.  Rotational noise is sampled from the isotropic Langevin distribution
(wrapped Gaussian with matched concentration for the planar case),
translational and range noise are Gaussian.
"""

from __future__ import annotations

import concurrent.futures
import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph

from .io import derive_robot_partition, rot2
from .problem import (
    GroundTruth,
    Problem,
    RangeMeasurement,
    RelativePoseMeasurement,
    validate,
)

__all__ = [
    "GeneratorConfig",
    "SweepConfig",
    "SweepRow",
    "generate_synthetic",
    "run_sweep",
    "write_sweep_csv",
    "sample_langevin_rotation",
]

logger = logging.getLogger("cora.synthetic")

ROBOT_NAMES = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters for one synthetic instance.

    ``kappa``/``tau`` are the stored measurement precisions and control the
    sampled noise; ``sigma_range`` is the range noise standard deviation.
    With ``exact=True`` measurements are noise free but keep the same stored
    precisions.
    """

    dimension: int = 2
    num_robots: int = 4
    num_poses: int = 200
    num_landmarks: int = 2
    num_ranges: int = 25
    num_loop_closures: int = 10
    kappa: float = 50.0
    tau: float = 25.0
    sigma_range: float = 0.1
    exact: bool = False
    area_size: float = 40.0
    step_length: float = 1.0
    turn_std: float = 0.4
    sensing_radius: float | None = None  # default: area_size / 4


@dataclass(frozen=True)
class SweepConfig:
    """A parameter sweep: one swept axis over a base instance configuration."""

    parameter: str  # "robots" | "landmarks" | "ranges"
    values: tuple[int, ...]
    base: GeneratorConfig = field(default_factory=GeneratorConfig)
    instances_per_value: int = 10
    seed_base: int = 0
    with_loop_closures: bool = True

    def instance_config(self, value: int) -> GeneratorConfig:
        if self.parameter == "robots":
            cfg = replace(self.base, num_robots=value)
        elif self.parameter == "landmarks":
            cfg = replace(self.base, num_landmarks=value)
        elif self.parameter == "ranges":
            cfg = replace(self.base, num_ranges=value)
        else:
            raise ValueError(f"unknown sweep parameter '{self.parameter}'")
        if not self.with_loop_closures:
            cfg = replace(cfg, num_loop_closures=0)
        return cfg


# ---------------------------------------------------------------------------
# rotational noise
# ---------------------------------------------------------------------------


def _langevin_angle_cdf_grid(kappa: float, grid: int = 8192):
    """CDF table of the rotation-angle density exp(2k cos t)(1 - cos t) on [0, pi]."""
    theta = np.linspace(0.0, np.pi, grid)
    log_density = 2.0 * kappa * (np.cos(theta) - 1.0) + np.log1p(-np.cos(theta) + 1e-300)
    density = np.exp(log_density - log_density.max())
    cdf = np.concatenate([[0.0], np.cumsum((density[1:] + density[:-1]) * 0.5)])
    cdf /= cdf[-1]
    return theta, cdf


def sample_langevin_rotation(
    dimension: int, kappa: float, rng: np.random.Generator
) -> np.ndarray:
    """One sample of the isotropic Langevin rotational noise with concentration kappa.

    Planar rotations use a wrapped Gaussian with variance 1/(2 kappa), the
    matched concentration of the Langevin density; 3D samples a uniform axis
    and an angle drawn from the exact Langevin angle density by inverse-CDF.
    """
    if dimension == 2:
        std = np.sqrt(0.5 / kappa) if kappa > 0 else np.pi
        return rot2(rng.normal(0.0, std))
    theta_grid, cdf = _langevin_angle_cdf_grid(kappa)
    theta = float(np.interp(rng.uniform(), cdf, theta_grid))
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    K = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


# ---------------------------------------------------------------------------
# trajectory synthesis
# ---------------------------------------------------------------------------


def _walk_2d(cfg: GeneratorConfig, count: int, rng: np.random.Generator):
    area = cfg.area_size
    position = rng.uniform(0.2 * area, 0.8 * area, size=2)
    heading = rng.uniform(-np.pi, np.pi)
    rotations = np.empty((count, 2, 2))
    positions = np.empty((count, 2))
    for i in range(count):
        rotations[i] = rot2(heading)
        positions[i] = position
        step = rotations[i][:, 0] * cfg.step_length
        nxt = position + step
        if np.any(nxt < 0.0) or np.any(nxt > area):
            center_dir = 0.5 * area - position
            heading = np.arctan2(center_dir[1], center_dir[0]) + rng.normal(0.0, 0.2)
            step = rot2(heading)[:, 0] * cfg.step_length
            nxt = position + step
        position = nxt
        heading += rng.normal(0.0, cfg.turn_std)
    return rotations, positions


def _walk_3d(cfg: GeneratorConfig, count: int, rng: np.random.Generator):
    area = cfg.area_size
    position = rng.uniform(0.2 * area, 0.8 * area, size=3)
    R = _random_rotation_3d(rng)
    rotations = np.empty((count, 3, 3))
    positions = np.empty((count, 3))
    for i in range(count):
        rotations[i] = R
        positions[i] = position
        step = R[:, 0] * cfg.step_length
        nxt = position + step
        if np.any(nxt < 0.0) or np.any(nxt > area):
            forward = 0.5 * area - position
            forward /= np.linalg.norm(forward)
            R = _frame_from_forward(forward, R)
            nxt = position + R[:, 0] * cfg.step_length
        position = nxt
        increment = sample_langevin_rotation(3, 1.0 / (2.0 * cfg.turn_std**2), rng)
        R = R @ increment
    return rotations, positions


def _random_rotation_3d(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, -1] *= -1
    return q


def _frame_from_forward(forward: np.ndarray, previous: np.ndarray) -> np.ndarray:
    up = previous[:, 1]
    side = up - (up @ forward) * forward
    if np.linalg.norm(side) < 1e-9:
        side = np.array([0.0, 0.0, 1.0]) - forward[2] * forward
    side /= np.linalg.norm(side)
    return np.column_stack([forward, side, np.cross(forward, side)])


def _near_pairs(
    positions_a: np.ndarray, positions_b: np.ndarray, radius: float
) -> np.ndarray:
    """Index pairs (i, j) with |a_i - b_j| <= radius."""
    diff = positions_a[:, None, :] - positions_b[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    return np.argwhere(dist <= radius)


def _connected(problem: Problem) -> bool:
    ids = list(problem.pose_ids) + list(problem.landmark_ids)
    index = {vid: i for i, vid in enumerate(ids)}
    rows, cols = [], []
    for m in problem.rel_pose_measurements:
        rows.append(index[m.from_id])
        cols.append(index[m.to_id])
    for m in problem.range_measurements:
        rows.append(index[m.from_id])
        cols.append(index[m.to_id])
    if not rows:
        return len(ids) <= 1
    graph = sparse.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids))
    )
    count, _ = csgraph.connected_components(graph, directed=False)
    return count == 1


def _generate_once(cfg: GeneratorConfig, rng: np.random.Generator):
    d = cfg.dimension
    if d not in (2, 3):
        raise ValueError("generator supports dimensions 2 and 3")
    if cfg.num_robots < 1 or cfg.num_poses < cfg.num_robots:
        raise ValueError("need at least one pose per robot")
    if cfg.num_robots > len(ROBOT_NAMES):
        raise ValueError(f"at most {len(ROBOT_NAMES)} robots supported")

    per_robot = [cfg.num_poses // cfg.num_robots] * cfg.num_robots
    for i in range(cfg.num_poses % cfg.num_robots):
        per_robot[i] += 1

    pose_ids: list[str] = []
    rotations = []
    positions = []
    robot_slices: list[slice] = []
    for r, count in enumerate(per_robot):
        start = len(pose_ids)
        name = ROBOT_NAMES[r]
        pose_ids.extend(f"{name}{i}" for i in range(count))
        walk = _walk_2d(cfg, count, rng) if d == 2 else _walk_3d(cfg, count, rng)
        rotations.append(walk[0])
        positions.append(walk[1])
        robot_slices.append(slice(start, start + count))
    rotations = np.concatenate(rotations)
    positions = np.concatenate(positions)

    landmark_ids = [f"L{j}" for j in range(cfg.num_landmarks)]
    landmarks = rng.uniform(
        0.1 * cfg.area_size, 0.9 * cfg.area_size, size=(cfg.num_landmarks, d)
    )

    def noisy_rel_pose(i: int, j: int) -> RelativePoseMeasurement:
        rel_rot = rotations[i].T @ rotations[j]
        rel_tran = rotations[i].T @ (positions[j] - positions[i])
        if not cfg.exact:
            rel_rot = rel_rot @ sample_langevin_rotation(d, cfg.kappa, rng)
            rel_tran = rel_tran + rng.normal(0.0, np.sqrt(1.0 / cfg.tau), size=d)
        return RelativePoseMeasurement(
            from_id=pose_ids[i],
            to_id=pose_ids[j],
            rotation=rel_rot,
            translation=rel_tran,
            kappa=cfg.kappa,
            tau=cfg.tau,
        )

    rel_pose: list[RelativePoseMeasurement] = []
    for sl in robot_slices:
        for i in range(sl.start, sl.stop - 1):
            rel_pose.append(noisy_rel_pose(i, i + 1))

    # inter-robot loop closures between spatially close pose pairs
    if cfg.num_loop_closures > 0 and cfg.num_robots > 1:
        radius = 2.5 * cfg.step_length
        candidates = np.zeros((0, 2), dtype=int)
        robot_of = np.concatenate(
            [np.full(sl.stop - sl.start, r) for r, sl in enumerate(robot_slices)]
        )
        while True:
            pairs = _near_pairs(positions, positions, radius)
            pairs = pairs[robot_of[pairs[:, 0]] < robot_of[pairs[:, 1]]]
            if len(pairs) >= cfg.num_loop_closures or radius > 4 * cfg.area_size:
                candidates = pairs
                break
            radius *= 2.0
        if len(candidates) == 0:
            raise ValueError("no loop-closure candidates found")
        chosen = rng.choice(
            len(candidates),
            size=min(cfg.num_loop_closures, len(candidates)),
            replace=False,
        )
        for idx in np.sort(chosen):
            i, j = candidates[idx]
            rel_pose.append(noisy_rel_pose(int(i), int(j)))

    # range measurements: pose-landmark first (landmarks are range-only), the
    # remainder between poses of different robots
    all_positions = np.vstack([positions, landmarks]) if cfg.num_landmarks else positions
    all_ids = pose_ids + landmark_ids
    ranges: list[RangeMeasurement] = []

    def add_range(i: int, j: int) -> None:
        true_dist = float(np.linalg.norm(all_positions[j] - all_positions[i]))
        measured = true_dist
        if not cfg.exact:
            measured = true_dist + rng.normal(0.0, cfg.sigma_range)
        measured = max(measured, 1e-6)
        ranges.append(
            RangeMeasurement(
                from_id=all_ids[i],
                to_id=all_ids[j],
                distance=measured,
                sigma=cfg.sigma_range,
            )
        )

    sensing = cfg.sensing_radius or cfg.area_size / 4.0
    n = len(pose_ids)
    budget = cfg.num_ranges
    if cfg.num_landmarks and budget > 0:
        per_landmark = max(4, budget // (5 * cfg.num_landmarks))
        for j in range(cfg.num_landmarks):
            radius = sensing
            while True:
                near = np.flatnonzero(
                    np.linalg.norm(positions - landmarks[j], axis=1) <= radius
                )
                if len(near) >= min(per_landmark, n) or radius > 4 * cfg.area_size:
                    break
                radius *= 2.0
            take = min(per_landmark, len(near), budget)
            if take > 0:
                chosen = rng.choice(len(near), size=take, replace=False)
                for idx in np.sort(chosen):
                    add_range(int(near[idx]), n + j)
                budget -= take

    if budget > 0 and cfg.num_robots > 1:
        radius = sensing
        robot_of = np.concatenate(
            [np.full(sl.stop - sl.start, r) for r, sl in enumerate(robot_slices)]
        )
        while True:
            pairs = _near_pairs(positions, positions, radius)
            pairs = pairs[robot_of[pairs[:, 0]] < robot_of[pairs[:, 1]]]
            if len(pairs) >= budget or radius > 4 * cfg.area_size:
                break
            radius *= 2.0
        take = min(budget, len(pairs))
        if take > 0:
            chosen = rng.choice(len(pairs), size=take, replace=False)
            for idx in np.sort(chosen):
                i, j = pairs[idx]
                add_range(int(i), int(j))
            budget -= take
    elif budget > 0 and cfg.num_robots == 1 and n > 1:
        # single robot: ranges between temporally distant poses of the walk
        for _ in range(budget):
            i, j = sorted(rng.choice(n, size=2, replace=False))
            add_range(int(i), int(j))
        budget = 0

    problem = Problem(
        dimension=d,
        pose_ids=tuple(pose_ids),
        landmark_ids=tuple(landmark_ids),
        rel_pose_measurements=tuple(rel_pose),
        range_measurements=tuple(ranges),
        robot_partition=derive_robot_partition(pose_ids),
    )
    truth = GroundTruth(
        rotations=rotations,
        translations=positions,
        landmarks=landmarks.reshape(cfg.num_landmarks, d),
    )
    return problem, truth


def generate_synthetic(
    cfg: GeneratorConfig, seed: int = 0
) -> tuple[Problem, GroundTruth]:
    """Generate a random connected instance; resamples up to 10 times if the
    measurement graph comes out disconnected."""
    for attempt in range(10):
        rng = np.random.default_rng((seed, attempt))
        problem, truth = _generate_once(cfg, rng)
        defects = validate(problem)
        if defects:
            raise AssertionError(f"generator produced an invalid problem: {defects}")
        if _connected(problem):
            return problem, truth
        logger.info("instance seed=%d attempt=%d disconnected; resampling", seed, attempt)
    raise ValueError(
        "could not generate a connected measurement graph after 10 attempts; "
        "increase the sensing radius, ranges, or loop closures"
    )


# ---------------------------------------------------------------------------
# sweep harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: int
    seed: int
    status: str
    f_sdp: float
    f_refined: float
    relative_gap: float | None
    certified_rank: int | None
    wall_time_s: float


def _run_instance(args) -> SweepRow:
    sweep, value, seed = args
    from .staircase import StaircaseOptions, cora_solve

    cfg = sweep.instance_config(value)
    started = time.perf_counter()
    try:
        problem, _ = generate_synthetic(cfg, seed=seed)
        report = cora_solve(problem, StaircaseOptions(seed=seed))
        return SweepRow(
            parameter=sweep.parameter,
            value=value,
            seed=seed,
            status=report.status,
            f_sdp=report.f_sdp,
            f_refined=report.f_refined,
            relative_gap=report.relative_gap,
            certified_rank=report.certified_rank,
            wall_time_s=report.wall_times["total_s"],
        )
    except Exception as exc:  # solve failures are recorded, the sweep continues
        logger.warning("instance %s=%d seed=%d failed: %s", sweep.parameter, value, seed, exc)
        return SweepRow(
            parameter=sweep.parameter,
            value=value,
            seed=seed,
            status=f"error: {exc}",
            f_sdp=np.nan,
            f_refined=np.nan,
            relative_gap=None,
            certified_rank=None,
            wall_time_s=time.perf_counter() - started,
        )


def run_sweep(config: SweepConfig, workers: int = 1) -> list[SweepRow]:
    """Solve every (value, seed) instance; deterministic row order."""
    jobs = [
        (config, value, config.seed_base + i)
        for value in config.values
        for i in range(config.instances_per_value)
    ]
    if workers <= 1:
        rows = [_run_instance(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_instance, jobs))
    rows.sort(key=lambda r: (r.value, r.seed))
    return rows


def write_sweep_csv(path: str, rows: list[SweepRow]) -> None:
    """Instance rows followed by per-value summary rows (median and quartiles)."""
    fieldnames = [
        "row_type",
        "parameter",
        "value",
        "seed",
        "status",
        "f_sdp",
        "f_refined",
        "relative_gap",
        "certified_rank",
        "wall_time_s",
        "gap_q1",
        "gap_median",
        "gap_q3",
    ]

    def fmt(x) -> str:
        if x is None:
            return ""
        if isinstance(x, float):
            return f"{x:.17g}"
        return str(x)

    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(fieldnames)
        for r in rows:
            writer.writerow(
                [
                    "instance",
                    r.parameter,
                    r.value,
                    r.seed,
                    r.status,
                    fmt(r.f_sdp),
                    fmt(r.f_refined),
                    fmt(r.relative_gap),
                    fmt(r.certified_rank),
                    fmt(r.wall_time_s),
                    "",
                    "",
                    "",
                ]
            )
        for value in sorted({r.value for r in rows}):
            gaps = [
                r.relative_gap
                for r in rows
                if r.value == value and r.relative_gap is not None
            ]
            if gaps:
                q1, med, q3 = np.percentile(gaps, [25, 50, 75])
            else:
                q1 = med = q3 = 0.0
            writer.writerow(
                [
                    "summary",
                    rows[0].parameter,
                    value,
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    fmt(float(q1)),
                    fmt(float(med)),
                    fmt(float(q3)),
                ]
            )
