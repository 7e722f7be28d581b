"""Riemannian trust-region solver with truncated conjugate gradients.

The trust-region subproblem is solved by a preconditioned Steihaug-Toint
truncated CG.  Preconditioners act row-space-wise on (k, p) matrices and are
built from the data matrix: inverted diagonal (Jacobi), inverted variable
blocks (block-Jacobi), cached factorizations of the block-diagonal
approximation of Q (block Cholesky), or a factorization of Q + mu*I
(regularized Cholesky).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .assembly import DataMatrix
from .problem import Problem, VariableOrdering

__all__ = [
    "PRECONDITIONER_KINDS",
    "RtrOptions",
    "RtrStats",
    "Preconditioner",
    "build_preconditioner",
    "apply_preconditioner",
    "solve_rtr",
    "DisconnectedGraphError",
]

logger = logging.getLogger("cora.rtr")

PRECONDITIONER_KINDS = (
    "block-cholesky",
    "regularized-cholesky",
    "jacobi",
    "block-jacobi",
    "none",
)

CONDITION_TARGET = 1e6


class DisconnectedGraphError(ValueError):
    """Raised when the translation block is singular after pinning."""

    def __init__(self, components: np.ndarray):
        self.components = components
        groups: dict[int, int] = {}
        for c in components:
            groups[int(c)] = groups.get(int(c), 0) + 1
        super().__init__(
            "measurement graph is disconnected: "
            f"{len(groups)} components with sizes {sorted(groups.values(), reverse=True)}"
        )


# ---------------------------------------------------------------------------
# preconditioners
# ---------------------------------------------------------------------------


class Preconditioner:
    """Symmetric positive-definite operator applied to (k, p) tangent matrices."""

    def __init__(self, kind: str, k: int, apply_fn: Callable[[np.ndarray], np.ndarray]):
        self.kind = kind
        self.k = k
        self._apply = apply_fn

    def apply(self, V: np.ndarray) -> np.ndarray:
        return self._apply(V)


def _estimate_lambda_max(M: sparse.spmatrix, iterations: int = 50) -> float:
    """Deterministic power iteration bound on the top eigenvalue."""
    k = M.shape[0]
    if k == 0:
        return 0.0
    v = np.full(k, 1.0 / np.sqrt(k))
    lam = 0.0
    for _ in range(iterations):
        w = M @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        lam = float(v @ w)
        v = w / nrm
    return max(lam, 0.0)


def _factor_spd(M: sparse.spmatrix):
    """Sparse LU of a (nominally) SPD matrix, used for forward/back solves."""
    return spla.splu(M.tocsc())


def _translation_coupling_components(
    Q: sparse.spmatrix, ordering: VariableOrdering
) -> np.ndarray:
    """Connected components of the translation coupling graph implied by Q."""
    sl = ordering.translation_block
    block = abs(Q[sl, sl].tocsr())
    block.setdiag(1.0)
    _, labels = csgraph.connected_components(block, directed=False)
    return labels


def build_preconditioner(
    kind: str,
    Q: DataMatrix | sparse.spmatrix,
    problem: Problem | None = None,
    ordering: VariableOrdering | None = None,
    mu: float | None = None,
) -> Preconditioner:
    """Build and cache the factorizations of the requested preconditioner.

    ``block-cholesky`` inverts the three diagonal blocks of Q separately: the
    rotation block is factored, the range block is diagonal, and the
    translation block (a singular sum of graph Laplacians) is pinned by
    deleting its last row and column before factoring; applying it zero-pads
    the pinned coordinate.
    """
    if kind not in PRECONDITIONER_KINDS:
        raise ValueError(f"unknown preconditioner kind '{kind}'")
    if isinstance(Q, DataMatrix):
        if ordering is None:
            ordering = Q.ordering
        Q = Q.matrix
    k = Q.shape[0]

    if kind == "none":
        return Preconditioner(kind, k, lambda V: V)

    if kind == "jacobi":
        diag = np.asarray(Q.diagonal(), dtype=float).copy()
        diag[diag == 0.0] = 1.0
        inv = 1.0 / diag
        return Preconditioner(kind, k, lambda V: inv[:, None] * V)

    if kind == "regularized-cholesky":
        lam_max = _estimate_lambda_max(Q)
        max_diag = float(Q.diagonal().max()) if k else 1.0
        if mu is None:
            mu = 1e-6 * max(max_diag, 1e-12)
            # Q is PSD with a nontrivial kernel, so the condition bound is
            # (lam_max + mu) / mu; double mu until it clears the target.
            while (lam_max + mu) / mu > CONDITION_TARGET:
                mu *= 2.0
        lu = _factor_spd(Q + mu * sparse.identity(k, format="csc"))
        return Preconditioner(kind, k, lambda V: lu.solve(V))

    if ordering is None:
        raise ValueError(f"preconditioner '{kind}' requires a variable ordering")

    rot = ordering.rotation_block
    rng_block = ordering.range_block
    tr = ordering.translation_block
    d = ordering.dimension
    n = ordering.num_poses

    range_diag = np.asarray(Q.diagonal()[rng_block], dtype=float).copy()
    range_diag[range_diag == 0.0] = 1.0
    range_inv = 1.0 / range_diag

    if kind == "block-jacobi":
        rot_inv = None
        if n:
            blocks = np.zeros((n, d, d))
            rot_sparse = Q[rot, rot].tocsr()
            for i in range(n):
                sl = slice(d * i, d * (i + 1))
                block = rot_sparse[sl, sl].toarray()
                # guard: floor tiny eigenvalues so the block stays invertible
                w, U = np.linalg.eigh(0.5 * (block + block.T))
                w = np.maximum(w, 1e-12 * max(1.0, w.max() if w.size else 1.0))
                blocks[i] = (U / w) @ U.T
            rot_inv = blocks
        tr_diag = np.asarray(Q.diagonal()[tr], dtype=float).copy()
        tr_diag[tr_diag == 0.0] = 1.0
        tr_inv = 1.0 / tr_diag

        def apply_block_jacobi(V: np.ndarray) -> np.ndarray:
            out = np.empty_like(V)
            if n:
                W = V[rot].reshape(n, d, -1)
                out[rot] = np.einsum("nij,njp->nip", rot_inv, W).reshape(n * d, -1)
            out[rng_block] = range_inv[:, None] * V[rng_block]
            out[tr] = tr_inv[:, None] * V[tr]
            return out

        return Preconditioner(kind, k, apply_block_jacobi)

    # block-cholesky
    rot_lu = None
    if n:
        rot_block = Q[rot, rot].tocsc()
        try:
            rot_lu = _factor_spd(rot_block)
        except RuntimeError:
            # translation-only edges can leave the rotation Laplacian singular
            eps = 1e-10 * max(1.0, float(rot_block.diagonal().max()))
            rot_lu = _factor_spd(rot_block + eps * sparse.identity(n * d, format="csc"))

    tr_size = ordering.num_poses + ordering.num_landmarks
    tr_lu = None
    if tr_size > 1:
        labels = _translation_coupling_components(Q, ordering)
        if labels.max() > 0:
            raise DisconnectedGraphError(labels)
        pinned = Q[tr, tr].tocsc()[: tr_size - 1, : tr_size - 1]
        try:
            tr_lu = _factor_spd(pinned)
            if not np.all(np.isfinite(tr_lu.U.diagonal())) or np.any(
                tr_lu.U.diagonal() == 0.0
            ):
                raise RuntimeError("singular pinned translation block")
        except RuntimeError as exc:
            raise DisconnectedGraphError(labels) from exc

    def apply_block_cholesky(V: np.ndarray) -> np.ndarray:
        out = np.empty_like(V)
        if rot_lu is not None:
            out[rot] = rot_lu.solve(V[rot])
        out[rng_block] = range_inv[:, None] * V[rng_block]
        if tr_lu is not None:
            out[tr.start : tr.stop - 1] = tr_lu.solve(V[tr.start : tr.stop - 1])
            out[tr.stop - 1] = 0.0
        elif tr_size == 1:
            out[tr.start] = 0.0
        return out

    return Preconditioner(kind, k, apply_block_cholesky)


def apply_preconditioner(precon: Preconditioner, V: np.ndarray) -> np.ndarray:
    """Apply the cached inverse operator to a (k, p) matrix."""
    if V.shape[0] != precon.k:
        raise ValueError(f"input has {V.shape[0]} rows, expected {precon.k}")
    return precon.apply(V)


# ---------------------------------------------------------------------------
# trust-region solver
# ---------------------------------------------------------------------------


@dataclass
class RtrOptions:
    """Tuning knobs for the trust-region solver.

    The gradient-norm stop threshold is max(grad_norm_abs,
    grad_norm_tol * grad_norm_scale); callers typically set the scale to
    1 + |Q| so the relative tolerance tracks the cost scale.
    """

    grad_norm_tol: float = 1e-8
    grad_norm_scale: float = 1.0
    grad_norm_abs: float = 0.0
    max_outer_iterations: int = 1000
    max_inner_iterations: int | None = None  # default: number of state rows
    initial_trust_radius: float | None = None
    max_trust_radius: float | None = None
    min_trust_radius: float = 1e-12
    tcg_kappa: float = 0.1
    tcg_theta: float = 0.5
    rho_accept: float = 0.1
    preconditioner: str = "block-cholesky"

    def __post_init__(self):
        for name in ("grad_norm_tol", "grad_norm_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_norm_abs < 0:
            raise ValueError("grad_norm_abs must be nonnegative")
        if self.max_outer_iterations <= 0:
            raise ValueError("max_outer_iterations must be positive")

    @property
    def grad_norm_threshold(self) -> float:
        return max(self.grad_norm_abs, self.grad_norm_tol * self.grad_norm_scale)

    def with_scale(self, scale: float) -> "RtrOptions":
        return replace(self, grad_norm_scale=scale)


@dataclass
class RtrStats:
    outer_iterations: int = 0
    inner_iterations: int = 0
    final_cost: float = np.nan
    final_grad_norm: float = np.nan
    wall_time_s: float = 0.0
    stop_reason: str = ""
    cost_trace: list[float] = field(default_factory=list)


@dataclass
class RtrCallbacks:
    """Problem hooks for :func:`solve_rtr`; all vectors are (k, p) arrays."""

    cost: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess_vec: Callable[[np.ndarray, np.ndarray], np.ndarray]
    retract: Callable[[np.ndarray, np.ndarray], np.ndarray]
    precondition: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    manifold_dim: int | None = None


def _tcg(
    cb: RtrCallbacks,
    X: np.ndarray,
    grad: np.ndarray,
    radius: float,
    options: RtrOptions,
    max_inner: int,
):
    """Preconditioned Steihaug-Toint truncated CG on the TR subproblem."""
    inner = lambda U, V: float(np.sum(U * V))
    precon = cb.precondition or (lambda X, r: r)

    eta = np.zeros_like(grad)
    Heta = np.zeros_like(grad)
    r = grad.copy()
    e_Pe = 0.0

    norm_r0 = np.sqrt(inner(r, r))
    z = precon(X, r)
    z_r = inner(z, r)
    if norm_r0 == 0.0 or z_r <= 0.0:
        return eta, Heta, 0, "zero residual"
    d_Pd = z_r
    delta = -z
    e_Pd = 0.0
    model_value = 0.0
    target = norm_r0 * min(options.tcg_kappa, norm_r0**options.tcg_theta)

    stop = "max inner iterations"
    iterations = 0
    for j in range(max_inner):
        iterations = j + 1
        Hdelta = cb.hess_vec(X, delta)
        d_Hd = inner(delta, Hdelta)

        if d_Hd <= 0.0:
            # negative curvature: follow delta to the trust-region boundary
            disc = e_Pd * e_Pd + d_Pd * (radius * radius - e_Pe)
            tau = (-e_Pd + np.sqrt(max(disc, 0.0))) / d_Pd
            eta = eta + tau * delta
            Heta = Heta + tau * Hdelta
            stop = "negative curvature"
            break

        alpha = z_r / d_Hd
        e_Pe_new = e_Pe + 2.0 * alpha * e_Pd + alpha * alpha * d_Pd
        if e_Pe_new >= radius * radius:
            disc = e_Pd * e_Pd + d_Pd * (radius * radius - e_Pe)
            tau = (-e_Pd + np.sqrt(max(disc, 0.0))) / d_Pd
            eta = eta + tau * delta
            Heta = Heta + tau * Hdelta
            stop = "exceeded trust region"
            break

        eta_new = eta + alpha * delta
        Heta_new = Heta + alpha * Hdelta
        new_model_value = inner(eta_new, grad) + 0.5 * inner(eta_new, Heta_new)
        if new_model_value >= model_value:
            stop = "model value did not decrease"
            break
        eta, Heta, model_value, e_Pe = eta_new, Heta_new, new_model_value, e_Pe_new

        r = r + alpha * Hdelta
        norm_r = np.sqrt(inner(r, r))
        if norm_r <= target:
            stop = "reached residual target"
            break

        z = precon(X, r)
        z_r_new = inner(z, r)
        if z_r == 0.0 or not np.isfinite(z_r_new):
            stop = "preconditioner breakdown"
            break
        beta = z_r_new / z_r
        z_r = z_r_new
        delta = -z + beta * delta
        e_Pd = beta * (e_Pd + alpha * d_Pd)
        d_Pd = z_r + beta * beta * d_Pd

    return eta, Heta, iterations, stop


def solve_rtr(
    callbacks: RtrCallbacks, X0: np.ndarray, options: RtrOptions | None = None
) -> tuple[np.ndarray, RtrStats]:
    """Minimize the callback cost over the manifold starting from X0.

    Accepted costs are monotone non-increasing; terminates when the Riemannian
    gradient norm drops below the configured threshold, the outer-iteration
    cap is reached, or the trust radius collapses.
    """
    options = options or RtrOptions()
    start = time.perf_counter()

    if callbacks.manifold_dim is not None:
        radius_cap = np.sqrt(callbacks.manifold_dim)
    else:
        radius_cap = np.sqrt(float(X0.size))
    radius_max = options.max_trust_radius or radius_cap
    radius = options.initial_trust_radius or radius_max / 8.0
    max_inner = options.max_inner_iterations or X0.shape[0]

    X = np.array(X0, dtype=float)
    fx = callbacks.cost(X)
    if not np.isfinite(fx):
        raise ValueError("initial cost is not finite; check problem scaling")
    gx = callbacks.grad(X)
    gnorm = float(np.linalg.norm(gx))
    threshold = options.grad_norm_threshold

    stats = RtrStats(cost_trace=[fx])
    stop_reason = ""

    for outer in range(options.max_outer_iterations):
        if gnorm <= threshold:
            stop_reason = "gradient norm below tolerance"
            break
        if radius < options.min_trust_radius:
            stop_reason = "trust radius collapsed"
            break

        eta, Heta, inner_its, tcg_stop = _tcg(
            callbacks, X, gx, radius, options, max_inner
        )
        stats.inner_iterations += inner_its
        stats.outer_iterations = outer + 1

        X_prop = callbacks.retract(X, eta)
        f_prop = callbacks.cost(X_prop)
        if not np.isfinite(f_prop):
            raise ValueError("cost became non-finite during optimization")

        rho_num = fx - f_prop
        rho_den = -float(np.sum(gx * eta)) - 0.5 * float(np.sum(eta * Heta))
        reg = np.finfo(float).eps * max(1.0, abs(fx)) * 1e3
        model_decreased = rho_den + reg >= 0.0
        rho = (rho_num + reg) / (rho_den + reg) if rho_den + reg != 0.0 else -np.inf

        if rho < 0.25 or not model_decreased or not np.isfinite(rho):
            radius = radius / 4.0
        elif rho > 0.75 and tcg_stop in ("negative curvature", "exceeded trust region"):
            radius = min(2.0 * radius, radius_max)

        if model_decreased and rho > options.rho_accept and rho_num > 0.0:
            X = X_prop
            fx = f_prop
            gx = callbacks.grad(X)
            gnorm = float(np.linalg.norm(gx))
            stats.cost_trace.append(fx)
    else:
        stop_reason = "max outer iterations"

    if not stop_reason:
        stop_reason = (
            "gradient norm below tolerance" if gnorm <= threshold else "trust radius collapsed"
        )

    stats.final_cost = fx
    stats.final_grad_norm = gnorm
    stats.stop_reason = stop_reason
    stats.wall_time_s = time.perf_counter() - start
    logger.debug(
        "rtr done: f=%.6e |g|=%.3e outer=%d inner=%d (%s)",
        fx,
        gnorm,
        stats.outer_iterations,
        stats.inner_iterations,
        stop_reason,
    )
    return X, stats
