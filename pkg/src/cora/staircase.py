"""End-to-end certifiably correct solve: staircase over ranks, certification,
saddle escape, rounding to the original feasible set, and local refinement.

The solver climbs through rank-restricted relaxations: optimize at rank p,
test the candidate's certificate; on failure, lift by a zero column, perturb
along the certificate's negative eigenvector, and re-optimize at p+1.  A
certified candidate yields a global lower bound, and the refined rank-d
estimate yields the suboptimality gap.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .assembly import (
    ConstraintSet,
    DataMatrix,
    RankDSolution,
    assemble_constraints,
    assemble_data_matrix,
    evaluate_lifted_cost,
    evaluate_map_cost,
)
from .certify import CertResult, build_certificate, certify_solution, saddle_direction
from .manifold import LiftedManifold
from .problem import (
    GroundTruth,
    Problem,
    VariableOrdering,
    build_ordering,
    random_feasible_state,
    require_valid,
)
from .rtr import (
    Preconditioner,
    RtrCallbacks,
    RtrOptions,
    RtrStats,
    build_preconditioner,
    solve_rtr,
)

__all__ = [
    "StaircaseOptions",
    "LevelTrace",
    "RoundingResult",
    "SolveReport",
    "EscapeError",
    "cora_solve",
    "lift_state",
    "escape_saddle",
    "round_solution",
    "refine",
    "suboptimality",
    "odometry_initialization",
    "state_from_solution",
]

logger = logging.getLogger("cora.staircase")


class EscapeError(RuntimeError):
    """No descending step found along the saddle direction."""


@dataclass
class StaircaseOptions:
    """Configuration of the staircase solve."""

    initial_rank: int | None = None  # default d + 1
    max_rank: int | None = None  # default d + 10
    beta: float | None = None  # certificate PSD tolerance; default scales with S
    mu: float | None = None  # regularized-cholesky shift override
    rtr: RtrOptions = field(default_factory=RtrOptions)
    seed: int = 0
    initialization: str = "random"  # "random" | "odometry" | "given"
    initial_state: np.ndarray | None = None
    escape_max_halvings: int = 30
    refine: bool = True


@dataclass
class LevelTrace:
    """Diagnostics for one rank of the staircase."""

    rank: int
    cost: float
    grad_norm: float
    outer_iterations: int
    inner_iterations: int
    multiplier_residual: float
    certified: bool
    cert_status: str
    min_eigenvalue: float | None = None
    escape_halvings: int | None = None
    wall_time_s: float = 0.0


@dataclass
class RoundingResult:
    """Rank-d projection of a lifted candidate."""

    solution: RankDSolution
    singular_values: np.ndarray
    rank_d_residual: float


@dataclass
class SolveReport:
    """Everything the solve produced: bounds, gap, estimate, and diagnostics."""

    status: str  # "certified" | "uncertified" | "inconclusive" | "escape_stalled"
    f_sdp: float
    f_refined: float
    gap: float
    relative_gap: float | None
    certified_rank: int | None
    levels: list[LevelTrace]
    wall_times: dict[str, float]
    solution: RankDSolution
    rounding: RoundingResult
    multiplier_residual: float
    min_eigenvalue: float | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "f_sdp": self.f_sdp,
            "f_refined": self.f_refined,
            "gap": self.gap,
            "relative_gap": self.relative_gap,
            "certified_rank": self.certified_rank,
            "multiplier_residual": self.multiplier_residual,
            "min_eigenvalue": self.min_eigenvalue,
            "rank_d_residual": self.rounding.rank_d_residual,
            "singular_values": [float(s) for s in self.rounding.singular_values],
            "levels": [
                {
                    "rank": t.rank,
                    "cost": t.cost,
                    "grad_norm": t.grad_norm,
                    "outer_iterations": t.outer_iterations,
                    "inner_iterations": t.inner_iterations,
                    "multiplier_residual": t.multiplier_residual,
                    "certified": t.certified,
                    "cert_status": t.cert_status,
                    "min_eigenvalue": t.min_eigenvalue,
                    "escape_halvings": t.escape_halvings,
                    "wall_time_s": t.wall_time_s,
                }
                for t in self.levels
            ],
            "wall_times": self.wall_times,
        }


# ---------------------------------------------------------------------------
# staircase building blocks
# ---------------------------------------------------------------------------


def lift_state(X: np.ndarray) -> np.ndarray:
    """Append a zero column; preserves feasibility, cost, and gradient norm."""
    return np.hstack([X, np.zeros((X.shape[0], 1))])


def _objective_callbacks(
    Q: DataMatrix, manifold: LiftedManifold, precon: Preconditioner | None
) -> RtrCallbacks:
    """Cost/grad/Hessian hooks sharing one cached Q @ X per iterate."""
    Qm = Q.matrix
    cache: dict[str, Any] = {"X": None, "QX": None}

    def qx(X: np.ndarray) -> np.ndarray:
        if cache["X"] is not X:
            cache["X"] = X
            cache["QX"] = Qm @ X
        return cache["QX"]

    def cost(X):
        return float(np.sum(qx(X) * X))

    def grad(X):
        return manifold.project_tangent(X, 2.0 * qx(X), check=False)

    def hess_vec(X, V):
        return manifold.riemannian_hessian_vec(Qm, X, V, QX=qx(X), check=False)

    precondition = None
    if precon is not None and precon.kind != "none":
        def precondition(X, r):
            return manifold.project_tangent(X, precon.apply(r), check=False)

    return RtrCallbacks(
        cost=cost,
        grad=grad,
        hess_vec=hess_vec,
        retract=manifold.retract,
        precondition=precondition,
        manifold_dim=manifold.dim,
    )


def escape_saddle(
    Q: DataMatrix,
    S,
    manifold: LiftedManifold,
    X_plus: np.ndarray,
    v: np.ndarray,
    f0: float,
    max_halvings: int = 30,
) -> tuple[np.ndarray, int]:
    """Backtrack along the lifted saddle direction until the cost drops.

    Returns the retracted state for the largest step in {1, 1/2, ...} whose
    cost is below f0 minus a relative decrease margin, together with the
    number of halvings used.
    """
    direction = saddle_direction(S, X_plus[:, :-1], v)
    threshold = f0 - 1e-12 * (1.0 + abs(f0))
    t = 1.0
    for halving in range(max_halvings + 1):
        X_try = manifold.retract(X_plus, t * direction)
        if evaluate_lifted_cost(Q, X_try) < threshold:
            return X_try, halving
        t *= 0.5
    raise EscapeError(
        "no descending step along the saddle direction; the candidate may be "
        "certified within the PSD tolerance (consider re-checking beta)"
    )


def _nearest_special_orthogonal(blocks: np.ndarray) -> np.ndarray:
    """Batched projection of (n, d, d) matrices onto SO(d)."""
    U, _, Vt = np.linalg.svd(blocks)
    dets = np.linalg.det(U @ Vt)
    U = U.copy()
    U[:, :, -1] *= np.sign(dets)[:, None]
    return U @ Vt


def round_solution(X: np.ndarray, ordering: VariableOrdering) -> RoundingResult:
    """Project a lifted candidate onto the original feasible set.

    Takes the dominant rank-d factor of X via a thin SVD, fixes the global
    reflection so the majority of rotation blocks land in SO(d), then projects
    each block to its nearest special-orthogonal matrix.
    """
    d = ordering.dimension
    n, l = ordering.num_poses, ordering.num_landmarks

    U, s, _ = np.linalg.svd(X, full_matrices=False)
    Xd = U[:, :d] * s[:d]
    spectrum = s[: d + 3]
    residual = float(np.sqrt(np.sum(s[d:] ** 2)))

    if n:
        blocks = Xd[ordering.rotation_block].reshape(n, d, d)
        Ub, _, Vtb = np.linalg.svd(blocks)
        dets = np.linalg.det(Ub @ Vtb)
        if 2 * int(np.sum(dets < 0)) > n:
            Xd = Xd.copy()
            Xd[:, -1] *= -1.0
            blocks = Xd[ordering.rotation_block].reshape(n, d, d)
        # blocks hold transposed rotations; project B' onto SO(d)
        rotations = _nearest_special_orthogonal(np.transpose(blocks, (0, 2, 1)))
    else:
        rotations = np.zeros((0, d, d))

    trans = Xd[ordering.translation_block]
    return RoundingResult(
        solution=RankDSolution(
            rotations=rotations,
            translations=trans[:n].copy(),
            landmarks=trans[n:].copy(),
        ),
        singular_values=spectrum,
        rank_d_residual=residual,
    )


def state_from_solution(
    problem: Problem,
    ordering: VariableOrdering,
    sol: RankDSolution,
    p: int | None = None,
) -> np.ndarray:
    """Embed a rank-d solution as a feasible stacked state of rank p.

    Range rows are set to their cost-optimal unit vectors, the normalized
    translation differences of their endpoints.
    """
    d = ordering.dimension
    if p is None:
        p = d
    n, l = ordering.num_poses, ordering.num_landmarks
    X = np.zeros((ordering.num_rows, p))

    if n:
        X[ordering.rotation_block, :d] = np.transpose(sol.rotations, (0, 2, 1)).reshape(
            n * d, d
        )
    trans = np.vstack([sol.translations.reshape(n, d), sol.landmarks.reshape(l, d)])
    X[ordering.translation_block, :d] = trans

    index = {pid: i for i, pid in enumerate(problem.pose_ids)}
    index.update({lid: n + i for i, lid in enumerate(problem.landmark_ids)})
    for e, meas in enumerate(problem.range_measurements):
        delta = trans[index[meas.to_id]] - trans[index[meas.from_id]]
        nrm = np.linalg.norm(delta)
        if nrm > 0.0:
            X[ordering.range_row(e), :d] = delta / nrm
        else:
            X[ordering.range_row(e), 0] = 1.0
    return X


def refine(
    problem: Problem,
    rounded: RankDSolution,
    options: StaircaseOptions | None = None,
    Q: DataMatrix | None = None,
    ordering: VariableOrdering | None = None,
    precon: Preconditioner | None = None,
) -> tuple[RankDSolution, float, RtrStats]:
    """Locally optimize the rank-d problem starting from a rounded solution.

    Optimizes the lifted cost at rank d (rotation blocks stay in the SO(d)
    component under the QR retraction) and reports the original estimation
    cost.  Never increases the cost relative to the rounded input.
    """
    options = options or StaircaseOptions()
    if ordering is None:
        ordering = build_ordering(problem)
    if Q is None:
        Q = assemble_data_matrix(problem, ordering)
    d = problem.dimension

    X0 = state_from_solution(problem, ordering, rounded)
    manifold = LiftedManifold(ordering, d)
    if precon is None:
        precon = build_preconditioner(
            options.rtr.preconditioner, Q, problem, ordering, mu=options.mu
        )
    rtr_options = options.rtr.with_scale(1.0 + Q.norm_inf())
    X, stats = solve_rtr(_objective_callbacks(Q, manifold, precon), X0, rtr_options)

    n = ordering.num_poses
    if n:
        blocks = X[ordering.rotation_block].reshape(n, d, d)
        rotations = _nearest_special_orthogonal(np.transpose(blocks, (0, 2, 1)))
    else:
        rotations = np.zeros((0, d, d))
    trans = X[ordering.translation_block]
    refined = RankDSolution(
        rotations=rotations,
        translations=trans[:n].copy(),
        landmarks=trans[n:].copy(),
    )
    f_refined = evaluate_map_cost(problem, refined)

    f_rounded = evaluate_map_cost(problem, rounded)
    if f_refined > f_rounded + 1e-12 * (1.0 + abs(f_rounded)):
        logger.debug("refinement did not improve; keeping the rounded estimate")
        return rounded, f_rounded, stats
    return refined, f_refined, stats


def suboptimality(f_sdp: float, f_refined: float) -> tuple[float, float | None]:
    """Absolute and relative optimality gap between the bound and the estimate.

    Small negative gaps (within numerical noise) are clamped to zero; the
    relative gap is None for (near) zero-cost problems.
    """
    gap = f_refined - f_sdp
    if gap < 0.0 and gap >= -1e-8 * (1.0 + abs(f_sdp)):
        gap = 0.0
    if f_sdp <= 1e-12 * max(1.0, abs(f_refined)):
        return gap, None
    return gap, gap / f_sdp


def odometry_initialization(
    problem: Problem, ordering: VariableOrdering
) -> RankDSolution:
    """Chain poses by composing relative measurements robot by robot.

    Each robot starts at the identity; landmarks are placed at the centroid of
    the poses that observe them through range measurements.
    """
    d = problem.dimension
    n, l = problem.num_poses, problem.num_landmarks
    rotations = np.tile(np.eye(d), (n, 1, 1))
    translations = np.zeros((n, d))

    groups: dict[str, list[str]] = {}
    for pid in problem.pose_ids:
        robot = problem.robot_partition.get(pid, "")
        groups.setdefault(robot, []).append(pid)

    edges = {}
    for m in problem.rel_pose_measurements:
        edges.setdefault((m.from_id, m.to_id), m)

    pose_index = {pid: i for i, pid in enumerate(problem.pose_ids)}
    for chain in groups.values():
        for prev, cur in zip(chain, chain[1:]):
            i, j = pose_index[prev], pose_index[cur]
            meas = edges.get((prev, cur))
            if meas is None:
                rotations[j] = rotations[i]
                translations[j] = translations[i]
                continue
            rotations[j] = rotations[i] @ meas.rotation
            translations[j] = translations[i] + rotations[i] @ meas.translation

    landmarks = np.zeros((l, d))
    if l:
        landmark_index = {lid: i for i, lid in enumerate(problem.landmark_ids)}
        sums = np.zeros((l, d))
        counts = np.zeros(l)
        for m in problem.range_measurements:
            for lm_id, pose_id in ((m.to_id, m.from_id), (m.from_id, m.to_id)):
                if lm_id in landmark_index and pose_id in pose_index:
                    j = landmark_index[lm_id]
                    sums[j] += translations[pose_index[pose_id]]
                    counts[j] += 1
        nonzero = counts > 0
        landmarks[nonzero] = sums[nonzero] / counts[nonzero, None]

    return RankDSolution(rotations=rotations, translations=translations, landmarks=landmarks)


def _initial_state(
    problem: Problem,
    ordering: VariableOrdering,
    p0: int,
    options: StaircaseOptions,
    rng: np.random.Generator,
) -> np.ndarray:
    mode = options.initialization
    if mode == "given":
        X = options.initial_state
        if X is None:
            raise ValueError("initialization 'given' requires initial_state")
        X = np.array(X, dtype=float)
        if X.shape[0] != ordering.num_rows:
            raise ValueError(
                f"initial state has {X.shape[0]} rows, expected {ordering.num_rows}"
            )
        if X.shape[1] > p0:
            raise ValueError("initial state rank exceeds the initial staircase rank")
        if X.shape[1] < p0:
            X = np.hstack([X, np.zeros((X.shape[0], p0 - X.shape[1]))])
        return X
    if mode == "odometry":
        sol = odometry_initialization(problem, ordering)
        X = state_from_solution(problem, ordering, sol, p=p0)
        manifold = LiftedManifold(ordering, p0)
        # nudge off the rank-d flat, which is invariant under the solver updates
        V = manifold.random_tangent(X, rng)
        return manifold.retract(X, 1e-6 * max(1.0, float(np.linalg.norm(X))) * V)
    if mode == "random":
        return random_feasible_state(problem, p0, rng, ordering=ordering)
    raise ValueError(f"unknown initialization mode '{mode}'")


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


def cora_solve(problem: Problem, options: StaircaseOptions | None = None) -> SolveReport:
    """Solve, certify, round, and refine a range-aided SLAM problem."""
    options = options or StaircaseOptions()
    t_start = time.perf_counter()
    require_valid(problem)

    d = problem.dimension
    ordering = build_ordering(problem)
    p0 = options.initial_rank if options.initial_rank is not None else d + 1
    p_max = options.max_rank if options.max_rank is not None else d + 10
    if not (d <= p0 <= p_max <= ordering.num_rows):
        raise ValueError(
            f"invalid rank schedule: need d={d} <= p0={p0} <= p_max={p_max} <= k={ordering.num_rows}"
        )

    wall: dict[str, float] = {}
    t0 = time.perf_counter()
    Q = assemble_data_matrix(problem, ordering)
    constraints = assemble_constraints(problem, ordering)
    precon = build_preconditioner(
        options.rtr.preconditioner, Q, problem, ordering, mu=options.mu
    )
    wall["assembly_s"] = time.perf_counter() - t0

    rng = np.random.default_rng(options.seed)
    X = _initial_state(problem, ordering, p0, options, rng)
    rtr_options = options.rtr.with_scale(1.0 + Q.norm_inf())

    levels: list[LevelTrace] = []
    status = "uncertified"
    certified_rank: int | None = None
    cert: CertResult | None = None
    p = p0

    t0 = time.perf_counter()
    while True:
        t_level = time.perf_counter()
        manifold = LiftedManifold(ordering, p)
        X, stats = solve_rtr(_objective_callbacks(Q, manifold, precon), X, rtr_options)
        cert = certify_solution(
            Q.matrix, constraints, X, beta=options.beta, compute_direction=True
        )
        trace = LevelTrace(
            rank=p,
            cost=stats.final_cost,
            grad_norm=stats.final_grad_norm,
            outer_iterations=stats.outer_iterations,
            inner_iterations=stats.inner_iterations,
            multiplier_residual=cert.multipliers.residual,
            certified=cert.certified,
            cert_status=cert.status,
            min_eigenvalue=cert.min_eigenvalue,
            wall_time_s=time.perf_counter() - t_level,
        )
        levels.append(trace)
        logger.info(
            "rank %d: cost %.6e, |grad| %.2e, %s",
            p,
            stats.final_cost,
            stats.final_grad_norm,
            cert.status,
        )

        if cert.certified:
            status = "certified"
            certified_rank = p
            break
        if cert.status == "inconclusive":
            status = "inconclusive"
            break
        if p >= p_max or cert.eigenvector is None:
            status = "uncertified"
            break

        S = build_certificate(Q.matrix, constraints, cert.multipliers.values)
        X_plus = lift_state(X)
        manifold_up = LiftedManifold(ordering, p + 1)
        try:
            X, halvings = escape_saddle(
                Q,
                S,
                manifold_up,
                X_plus,
                cert.eigenvector,
                stats.final_cost,
                max_halvings=options.escape_max_halvings,
            )
            trace.escape_halvings = halvings
        except EscapeError:
            logger.warning("saddle escape stalled at rank %d", p)
            status = "escape_stalled"
            break
        p += 1
    wall["staircase_s"] = time.perf_counter() - t0

    f_sdp = evaluate_lifted_cost(Q, X)

    t0 = time.perf_counter()
    rounding = round_solution(X, ordering)
    wall["rounding_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if options.refine:
        solution, f_refined, _ = refine(
            problem, rounding.solution, options, Q=Q, ordering=ordering, precon=precon
        )
    else:
        solution = rounding.solution
        f_refined = evaluate_map_cost(problem, solution)
    wall["refine_s"] = time.perf_counter() - t0

    gap, relative_gap = suboptimality(f_sdp, f_refined)
    wall["total_s"] = time.perf_counter() - t_start

    return SolveReport(
        status=status,
        f_sdp=f_sdp,
        f_refined=f_refined,
        gap=gap,
        relative_gap=relative_gap,
        certified_rank=certified_rank,
        levels=levels,
        wall_times=wall,
        solution=solution,
        rounding=rounding,
        multiplier_residual=cert.multipliers.residual if cert else np.nan,
        min_eigenvalue=cert.min_eigenvalue if cert else None,
    )
