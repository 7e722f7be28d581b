"""Optimality certification of rank-restricted SDP candidates.

At a feasible stationary point the Lagrange multipliers are uniquely
determined (the constraint gradients are linearly independent everywhere on
the feasible set), so they can be recovered blockwise in closed form.  The
certificate matrix S = Q + sum_i lambda_i A_i is positive semidefinite exactly
when the candidate solves the full convex relaxation; S's negative eigenspace
provides second-order descent directions for escaping saddles after lifting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .assembly import ConstraintSet, DataMatrix

__all__ = [
    "MultiplierVector",
    "CertResult",
    "MinEigResult",
    "adjoint_constraint_jacobian",
    "compute_multipliers",
    "build_certificate",
    "default_beta",
    "check_psd",
    "min_eigenpair",
    "saddle_direction",
    "certify_solution",
]

logger = logging.getLogger("cora.certify")

DENSE_EIG_CUTOFF = 512


@dataclass(frozen=True)
class MultiplierVector:
    """Lagrange multipliers ordered like the constraint set, with the stationarity residual."""

    values: np.ndarray
    residual: float


@dataclass(frozen=True)
class MinEigResult:
    value: float
    vector: np.ndarray
    residual: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class CertResult:
    """Outcome of the optimality test on a candidate solution."""

    certified: bool
    status: str  # "certified" | "not_certified" | "inconclusive"
    beta: float
    multipliers: MultiplierVector
    min_eigenvalue: float | None = None
    eigenvector: np.ndarray | None = None


def _as_sparse(Q: DataMatrix | sparse.spmatrix) -> sparse.spmatrix:
    return Q.matrix if isinstance(Q, DataMatrix) else Q


def adjoint_constraint_jacobian(
    constraints: ConstraintSet, X: np.ndarray
) -> sparse.csc_matrix:
    """Sparse (k*p) x m_c matrix whose columns are vect(A_i X), row-major vect."""
    p = X.shape[1]
    rows_out: list[np.ndarray] = []
    cols_out: list[np.ndarray] = []
    vals_out: list[np.ndarray] = []
    for i in range(len(constraints)):
        sl = slice(constraints.offsets[i], constraints.offsets[i + 1])
        r = constraints.rows[sl]
        c = constraints.cols[sl]
        v = constraints.vals[sl]
        # row r of A_i X equals sum of v * X[c]; vectorized row-major
        entry_rows = (r[:, None] * p + np.arange(p)[None, :]).ravel()
        entry_vals = (v[:, None] * X[c]).ravel()
        rows_out.append(entry_rows)
        cols_out.append(np.full(entry_rows.shape, i, dtype=np.int64))
        vals_out.append(entry_vals)
    k = constraints.ordering.num_rows
    J = sparse.coo_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(k * p, len(constraints)),
    )
    return J.tocsc()


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def compute_multipliers(
    Q: DataMatrix | sparse.spmatrix,
    constraints: ConstraintSet,
    X: np.ndarray,
    QX: np.ndarray | None = None,
) -> MultiplierVector:
    """Least-squares Lagrange multipliers of the stationarity system, blockwise.

    For each rotation block the d(d+1)/2 multipliers are the entries of
    Lambda = -sym((Q X)_block Y'); for each unit row the multiplier is
    -r . (Q X)_row.  The residual is the norm of Q X + (sum lambda_i A_i) X,
    which is zero exactly at stationary points.
    """
    ordering = constraints.ordering
    M = _as_sparse(Q)
    if QX is None:
        QX = M @ X
    d, n, m = ordering.dimension, ordering.num_poses, ordering.num_ranges

    lam = np.empty(len(constraints))
    residual_sq = 0.0

    if n:
        G = QX[ordering.rotation_block].reshape(n, d, -1)
        Y = X[ordering.rotation_block].reshape(n, d, -1)
        Lambda = -_sym(np.einsum("nip,njp->nij", G, Y))
        iu, ju = np.triu_indices(d)
        per_pose = Lambda[:, iu, ju]
        per_pose[:, iu != ju] *= 2.0
        lam[: n * len(iu)] = per_pose.ravel()
        resid = G + np.einsum("nij,njp->nip", Lambda, Y)
        residual_sq += float(np.sum(resid * resid))

    if m:
        r = X[ordering.range_block]
        g = QX[ordering.range_block]
        lam_r = -np.sum(r * g, axis=1)
        lam[n * (d * (d + 1) // 2) :] = lam_r
        resid = g + lam_r[:, None] * r
        residual_sq += float(np.sum(resid * resid))

    residual_sq += float(np.sum(QX[ordering.translation_block] ** 2))
    return MultiplierVector(values=lam, residual=float(np.sqrt(residual_sq)))


def build_certificate(
    Q: DataMatrix | sparse.spmatrix, constraints: ConstraintSet, lam: np.ndarray
) -> sparse.csc_matrix:
    """Certificate matrix S = Q + sum_i lambda_i A_i."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (len(constraints),):
        raise ValueError(f"expected {len(constraints)} multipliers, got {lam.shape}")
    S = _as_sparse(Q) + constraints.weighted_sum(lam)
    return S.tocsc()


def default_beta(S: sparse.spmatrix) -> float:
    """Positive-semidefiniteness tolerance scaled to the certificate magnitude."""
    max_diag = float(np.abs(S.diagonal()).max()) if S.shape[0] else 0.0
    return 1e-6 * (1.0 + max_diag)


def check_psd(S: sparse.spmatrix, beta: float) -> bool:
    """True iff the Cholesky factorization of S + beta*I succeeds."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    dense = np.asarray(S.todense()) if sparse.issparse(S) else np.array(S, dtype=float)
    dense[np.arange(dense.shape[0]), np.arange(dense.shape[0])] += beta
    try:
        scipy.linalg.cholesky(dense, lower=True, check_finite=False)
        return True
    except scipy.linalg.LinAlgError:
        return False


def min_eigenpair(
    S: sparse.spmatrix, tol: float = 1e-8, maxiter: int | None = None
) -> MinEigResult:
    """Extremal eigenpair (lambda_min, v) of a sparse symmetric matrix.

    Runs restarted Lanczos on the spectrally shifted operator c*I - S with c an
    upper Gershgorin bound, so the target eigenvalue becomes the dominant one.
    Small matrices fall back to a dense factorization.  Deterministic start
    vector; non-convergence is reported with the best available estimate.
    """
    k = S.shape[0]
    norm_bound = float(abs(S).sum(axis=1).max()) if k else 0.0

    if k <= DENSE_EIG_CUTOFF:
        dense = np.asarray(S.todense()) if sparse.issparse(S) else np.asarray(S)
        w, V = np.linalg.eigh(dense)
        value, vector = float(w[0]), V[:, 0]
        resid = float(np.linalg.norm(S @ vector - value * vector))
        return MinEigResult(value, vector, resid, True, 0)

    Scsr = S.tocsr()
    diag = Scsr.diagonal()
    row_sums = np.asarray(abs(Scsr).sum(axis=1)).ravel()
    gershgorin = float((row_sums - np.abs(diag) + diag).max())

    def shifted(x):
        return gershgorin * x - Scsr @ x

    op = spla.LinearOperator((k, k), matvec=shifted, dtype=float)
    v0 = np.full(k, 1.0 / np.sqrt(k))
    if maxiter is None:
        maxiter = 10 * k
    try:
        w, V = spla.eigsh(op, k=1, which="LA", v0=v0, tol=tol, maxiter=maxiter)
        converged = True
        iterations = -1
    except spla.ArpackNoConvergence as exc:
        logger.warning("minimum-eigenpair Lanczos did not converge: %s", exc)
        if exc.eigenvalues.size:
            w, V = exc.eigenvalues, exc.eigenvectors
        else:
            w, V = np.array([0.0]), v0[:, None]
        converged = False
        iterations = maxiter
    value = float(gershgorin - w[0])
    vector = V[:, 0]
    resid = float(np.linalg.norm(Scsr @ vector - value * vector))
    if resid > tol * max(norm_bound, 1.0):
        converged = False
    return MinEigResult(value, vector, resid, converged, iterations)


def saddle_direction(
    S: sparse.spmatrix, X: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Second-order descent direction at the zero-padded lift of X.

    Places v in the appended column; the result is tangent at [X | 0] by
    construction and satisfies d2/dt2 f(retract([X|0], t * dir)) = 2 v'Sv < 0.
    """
    curvature = float(v @ (S @ v))
    if curvature >= 0.0:
        raise ValueError(
            f"v is not a negative-curvature direction (v'Sv = {curvature:.3e})"
        )
    direction = np.zeros((X.shape[0], X.shape[1] + 1))
    direction[:, -1] = v
    return direction


def certify_solution(
    Q: DataMatrix | sparse.spmatrix,
    constraints: ConstraintSet,
    X: np.ndarray,
    beta: float | None = None,
    eig_tol: float = 1e-8,
    residual_rel_tol: float = 1e-6,
    compute_direction: bool = True,
) -> CertResult:
    """Full certification pass: multipliers, certificate, PSD test, eigenpair.

    A passing PSD test is reported as inconclusive when the stationarity
    residual is too large relative to |Q X| for the multipliers to be trusted.
    """
    M = _as_sparse(Q)
    QX = M @ X
    mult = compute_multipliers(M, constraints, X, QX=QX)
    S = build_certificate(M, constraints, mult.values)
    if beta is None:
        beta = default_beta(S)

    # the relative rule degenerates when |QX| -> 0 (exact-data optima), so an
    # absolute floor tied to the problem scale also counts as trustworthy
    qx_scale = float(np.linalg.norm(QX))
    q_norm = float(np.asarray(abs(M).sum(axis=1)).max()) if M.nnz else 0.0
    trustworthy = (
        mult.residual <= residual_rel_tol * qx_scale
        or mult.residual <= 1e-10 * (1.0 + q_norm)
    )

    if check_psd(S, beta):
        if trustworthy:
            return CertResult(True, "certified", beta, mult)
        logger.info(
            "PSD test passed but stationarity residual %.3e exceeds %.1e * |QX|",
            mult.residual,
            residual_rel_tol,
        )
        return CertResult(False, "inconclusive", beta, mult)

    if not compute_direction:
        return CertResult(False, "not_certified", beta, mult)

    eig = min_eigenpair(S, tol=eig_tol)
    if eig.value >= -beta:
        # Cholesky failed on roundoff only; beta absorbs the negativity
        status = "certified" if trustworthy else "inconclusive"
        return CertResult(
            status == "certified", status, beta, mult, eig.value, eig.vector
        )
    return CertResult(False, "not_certified", beta, mult, eig.value, eig.vector)
