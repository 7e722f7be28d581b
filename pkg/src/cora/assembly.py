"""Assembly of the sparse quadratic cost matrix and the feasible-set constraints.

The cost matrix Q is accumulated edge by edge as a sum of small outer-product
stamps, one per measurement residual, so that tr(Q X X') reproduces the
per-edge quadratic cost for every stacked state X.  Constraints come in two
families: d(d+1)/2 orthonormality constraints per pose and one unit-norm
constraint per range measurement, each supported on a single diagonal block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sparse

from .problem import Problem, VariableOrdering, build_ordering

__all__ = [
    "DataMatrix",
    "ConstraintSet",
    "RankDSolution",
    "assemble_data_matrix",
    "assemble_constraints",
    "evaluate_lifted_cost",
    "evaluate_qcqp_cost_direct",
    "evaluate_map_cost",
    "euclidean_gradient",
    "write_matrix_market",
]


@dataclass(frozen=True)
class DataMatrix:
    """Sparse symmetric PSD matrix encoding the quadratic cost."""

    matrix: sparse.csc_matrix
    ordering: VariableOrdering

    @property
    def shape(self):
        return self.matrix.shape

    def norm_inf(self) -> float:
        """Max absolute row sum; cheap operator-norm bound used for scaling."""
        return float(abs(self.matrix).sum(axis=1).max()) if self.matrix.nnz else 0.0


@dataclass(frozen=True)
class ConstraintSet:
    """Pairs (A_i, b_i) stored as flat sparse triples.

    Constraint i owns the triple slice ``offsets[i]:offsets[i+1]`` of
    (rows, cols, vals).  Constraints are ordered canonically: for each pose in
    variable order the d(d+1)/2 orthonormality constraints over the upper
    triangle in row-major order, then one unit-norm constraint per range
    measurement in measurement order.
    """

    ordering: VariableOrdering
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    offsets: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return len(self.b)

    def matrix(self, i: int) -> sparse.csc_matrix:
        """Materialize A_i as a full k x k sparse matrix."""
        k = self.ordering.num_rows
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return sparse.coo_matrix(
            (self.vals[sl], (self.rows[sl], self.cols[sl])), shape=(k, k)
        ).tocsc()

    def evaluate(self, i: int, X: np.ndarray) -> float:
        """tr(A_i X X') without forming the k x k matrix."""
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return float(
            np.sum(self.vals[sl] * np.sum(X[self.rows[sl]] * X[self.cols[sl]], axis=1))
        )

    def weighted_sum(self, lam: np.ndarray) -> sparse.csc_matrix:
        """Sum of lam[i] * A_i as a sparse matrix."""
        counts = np.diff(self.offsets)
        scale = np.repeat(np.asarray(lam, dtype=float), counts)
        k = self.ordering.num_rows
        return sparse.coo_matrix(
            (self.vals * scale, (self.rows, self.cols)), shape=(k, k)
        ).tocsc()


@dataclass(frozen=True)
class RankDSolution:
    """A feasible estimate of the original problem: SO(d) rotations plus translations."""

    rotations: np.ndarray  # (n, d, d)
    translations: np.ndarray  # (n, d)
    landmarks: np.ndarray  # (l, d)


def assemble_data_matrix(
    problem: Problem, ordering: VariableOrdering | None = None
) -> DataMatrix:
    """Stamp every measurement residual into the sparse cost matrix.

    Each residual row is a fixed linear combination c of state rows with
    weight w; it contributes w * c c' to Q.  Relative-pose edges contribute a
    rotational stamp per column of the measured rotation (skipped when
    kappa = 0) and one translational stamp; range edges contribute a single
    stamp coupling the unit-vector row with the two endpoint translations.
    """
    if ordering is None:
        ordering = build_ordering(problem)
    d = problem.dimension

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []

    def stamp(idx: np.ndarray, coeff: np.ndarray, weight: float) -> None:
        outer = weight * np.outer(coeff, coeff)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(outer.ravel())

    for m in problem.rel_pose_measurements:
        from_rot = ordering.rotation_rows(m.from_id)
        from_rows = np.arange(from_rot.start, from_rot.stop)
        t_from = ordering.translation_row(m.from_id)
        t_to = ordering.translation_row(m.to_id)

        if m.kappa > 0.0:
            to_rot = ordering.rotation_rows(m.to_id)
            to_rows = np.arange(to_rot.start, to_rot.stop)
            # residual rows of R_to - R_from @ Rtilde, one stamp per column q
            for q in range(d):
                idx = np.concatenate([from_rows, [to_rows[q]]])
                coeff = np.concatenate([-m.rotation[:, q], [1.0]])
                stamp(idx, coeff, m.kappa)

        if m.tau > 0.0:
            # residual t_to - t_from - R_from @ ttilde
            idx = np.concatenate([from_rows, [t_from, t_to]])
            coeff = np.concatenate([-m.translation, [-1.0, 1.0]])
            stamp(idx, coeff, m.tau)

    for e, m in enumerate(problem.range_measurements):
        idx = np.array(
            [
                ordering.range_row(e),
                ordering.translation_row(m.from_id),
                ordering.translation_row(m.to_id),
            ]
        )
        coeff = np.array([-m.distance, -1.0, 1.0])
        stamp(idx, coeff, m.weight)

    k = ordering.num_rows
    if rows:
        Q = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(k, k),
        ).tocsc()
        # duplicate-summation order differs across the two triangles by one
        # ulp; averaging restores exact symmetry (float addition commutes)
        Q = (Q + Q.T) * 0.5
        Q = Q.tocsc()
        Q.sort_indices()
    else:
        Q = sparse.csc_matrix((k, k))
    return DataMatrix(matrix=Q, ordering=ordering)


def assemble_constraints(
    problem: Problem, ordering: VariableOrdering | None = None
) -> ConstraintSet:
    """Build the block-diagonal quadratic constraints of the lifted problem."""
    if ordering is None:
        ordering = build_ordering(problem)
    d = problem.dimension

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    offsets: list[int] = [0]
    b: list[float] = []

    for pid in problem.pose_ids:
        base = ordering.rotation_rows(pid).start
        for k_idx in range(d):
            for l_idx in range(k_idx, d):
                if k_idx == l_idx:
                    rows.append(base + k_idx)
                    cols.append(base + k_idx)
                    vals.append(1.0)
                    b.append(1.0)
                else:
                    rows.extend([base + k_idx, base + l_idx])
                    cols.extend([base + l_idx, base + k_idx])
                    vals.extend([0.5, 0.5])
                    b.append(0.0)
                offsets.append(len(vals))

    for e in range(problem.num_ranges):
        r = ordering.range_row(e)
        rows.append(r)
        cols.append(r)
        vals.append(1.0)
        b.append(1.0)
        offsets.append(len(vals))

    return ConstraintSet(
        ordering=ordering,
        rows=np.asarray(rows, dtype=np.int64),
        cols=np.asarray(cols, dtype=np.int64),
        vals=np.asarray(vals, dtype=float),
        offsets=np.asarray(offsets, dtype=np.int64),
        b=np.asarray(b, dtype=float),
    )


def _as_sparse(Q: DataMatrix | sparse.spmatrix) -> sparse.spmatrix:
    return Q.matrix if isinstance(Q, DataMatrix) else Q


def evaluate_lifted_cost(Q: DataMatrix | sparse.spmatrix, X: np.ndarray) -> float:
    """tr(Q X X') for a stacked state X."""
    M = _as_sparse(Q)
    if X.shape[0] != M.shape[0]:
        raise ValueError(f"state has {X.shape[0]} rows, expected {M.shape[0]}")
    return float(np.sum((M @ X) * X))


def euclidean_gradient(Q: DataMatrix | sparse.spmatrix, X: np.ndarray) -> np.ndarray:
    """Ambient gradient 2 Q X of the lifted cost."""
    M = _as_sparse(Q)
    if X.shape[0] != M.shape[0]:
        raise ValueError(f"state has {X.shape[0]} rows, expected {M.shape[0]}")
    return 2.0 * (M @ X)


def evaluate_qcqp_cost_direct(
    problem: Problem, ordering: VariableOrdering, X: np.ndarray
) -> float:
    """Sum the quadratic cost edge by edge without forming Q.

    Serves as the independent oracle for the assembled matrix: the value must
    match tr(Q X X') for every X, feasible or not.
    """
    if X.shape[0] != ordering.num_rows:
        raise ValueError(f"state has {X.shape[0]} rows, expected {ordering.num_rows}")
    d = problem.dimension
    total = 0.0

    for m in problem.rel_pose_measurements:
        B_from = X[ordering.rotation_rows(m.from_id)]
        t_from = X[ordering.translation_row(m.from_id)]
        t_to = X[ordering.translation_row(m.to_id)]
        if m.kappa > 0.0:
            B_to = X[ordering.rotation_rows(m.to_id)]
            resid = B_to - m.rotation.T @ B_from
            total += m.kappa * float(np.sum(resid * resid))
        if m.tau > 0.0:
            resid = t_to - t_from - m.translation @ B_from
            total += m.tau * float(np.sum(resid * resid))

    for e, m in enumerate(problem.range_measurements):
        r = X[ordering.range_row(e)]
        t_from = X[ordering.translation_row(m.from_id)]
        t_to = X[ordering.translation_row(m.to_id)]
        resid = t_to - t_from - m.distance * r
        total += m.weight * float(np.sum(resid * resid))

    return total


def evaluate_map_cost(problem: Problem, sol: RankDSolution) -> float:
    """Original estimation cost at a rank-d solution.

    Range terms take their analytic form (|dt| - distance)^2 / sigma^2, which
    equals the lifted cost minimized over the unit auxiliary vectors.
    """
    d = problem.dimension
    pose_index = {pid: i for i, pid in enumerate(problem.pose_ids)}
    landmark_index = {lid: i for i, lid in enumerate(problem.landmark_ids)}

    for i, R in enumerate(sol.rotations):
        if np.linalg.norm(R.T @ R - np.eye(d)) > 1e-6 or np.linalg.det(R) <= 0:
            raise ValueError(f"rotation {i} is not in SO({d})")

    def translation_of(var_id: str) -> np.ndarray:
        if var_id in pose_index:
            return sol.translations[pose_index[var_id]]
        return sol.landmarks[landmark_index[var_id]]

    total = 0.0
    for m in problem.rel_pose_measurements:
        R_from = sol.rotations[pose_index[m.from_id]]
        t_from = translation_of(m.from_id)
        t_to = translation_of(m.to_id)
        if m.kappa > 0.0:
            R_to = sol.rotations[pose_index[m.to_id]]
            resid = R_to - R_from @ m.rotation
            total += m.kappa * float(np.sum(resid * resid))
        if m.tau > 0.0:
            resid = t_to - t_from - R_from @ m.translation
            total += m.tau * float(resid @ resid)

    for m in problem.range_measurements:
        delta = np.linalg.norm(translation_of(m.to_id) - translation_of(m.from_id))
        total += m.weight * (delta - m.distance) ** 2

    return total


def write_matrix_market(Q: DataMatrix | sparse.spmatrix, path: str) -> None:
    """Export in symmetric Matrix Market coordinate format (1-based) for debugging."""
    scipy.io.mmwrite(path, sparse.coo_matrix(_as_sparse(Q)), symmetry="symmetric")
