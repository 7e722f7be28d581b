"""Product manifold of lifted rotation blocks, unit-norm rows, and free translations.

States are dense (k, p) arrays laid out by a :class:`VariableOrdering`.  Each
pose contributes d rows whose transpose is a Stiefel element (d orthonormal
rows), each range measurement one unit-norm row, and each translation one
unconstrained row.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sparse

from .assembly import DataMatrix
from .problem import VariableOrdering

__all__ = ["LiftedManifold", "FEASIBILITY_TOL"]

FEASIBILITY_TOL = 1e-9


class LiftedManifold:
    """Geometry of the rank-p feasible set for a given variable ordering."""

    def __init__(self, ordering: VariableOrdering, p: int):
        if p < ordering.dimension:
            raise ValueError(f"rank p={p} must be at least d={ordering.dimension}")
        self.ordering = ordering
        self.p = p
        self.d = ordering.dimension
        self.n = ordering.num_poses
        self.m = ordering.num_ranges
        self.num_translations = ordering.num_poses + ordering.num_landmarks
        self.k = ordering.num_rows

    # ---- block views ------------------------------------------------------

    def rotation_blocks(self, X: np.ndarray) -> np.ndarray:
        """(n, d, p) view of the stacked rotation rows."""
        return X[self.ordering.rotation_block].reshape(self.n, self.d, self.p)

    def range_rows(self, X: np.ndarray) -> np.ndarray:
        return X[self.ordering.range_block]

    def translation_rows(self, X: np.ndarray) -> np.ndarray:
        return X[self.ordering.translation_block]

    # ---- basic geometry ---------------------------------------------------

    @property
    def dim(self) -> int:
        """Intrinsic dimension of the product manifold."""
        d, p = self.d, self.p
        stiefel = self.n * (d * p - d * (d + 1) // 2)
        sphere = self.m * (p - 1)
        return stiefel + sphere + self.num_translations * p

    @staticmethod
    def inner(U: np.ndarray, V: np.ndarray) -> float:
        return float(np.sum(U * V))

    @staticmethod
    def norm(V: np.ndarray) -> float:
        return float(np.linalg.norm(V))

    def zero_vector(self) -> np.ndarray:
        return np.zeros((self.k, self.p))

    def feasibility_error(self, X: np.ndarray) -> float:
        """Largest constraint violation over all blocks."""
        err = 0.0
        if self.n:
            Y = self.rotation_blocks(X)
            gram = np.einsum("nip,njp->nij", Y, Y)
            err = float(np.abs(gram - np.eye(self.d)).max())
        if self.m:
            norms = np.linalg.norm(self.range_rows(X), axis=1)
            err = max(err, float(np.abs(norms - 1.0).max()))
        return err

    def check_point(self, X: np.ndarray, tol: float = FEASIBILITY_TOL) -> None:
        if X.shape != (self.k, self.p):
            raise ValueError(f"state has shape {X.shape}, expected {(self.k, self.p)}")
        err = self.feasibility_error(X)
        if err > tol:
            raise ValueError(f"state is infeasible: max constraint violation {err:.3e}")

    def tangent_error(self, X: np.ndarray, V: np.ndarray) -> float:
        """Largest violation of the tangency conditions of V at X."""
        err = 0.0
        if self.n:
            Y = self.rotation_blocks(X)
            W = self.rotation_blocks(V)
            sym = np.einsum("nip,njp->nij", Y, W)
            sym = 0.5 * (sym + np.transpose(sym, (0, 2, 1)))
            err = float(np.abs(sym).max())
        if self.m:
            dots = np.sum(self.range_rows(X) * self.range_rows(V), axis=1)
            err = max(err, float(np.abs(dots).max()))
        return err

    # ---- projection / retraction -----------------------------------------

    def project_tangent(
        self, X: np.ndarray, V: np.ndarray, check: bool = True
    ) -> np.ndarray:
        """Orthogonal projection of an ambient matrix onto the tangent space at X.

        Per rotation block removes the symmetric part of the block Gram
        coupling, per range row the radial component; translation rows pass
        through.  Idempotent and self-adjoint.
        """
        if check:
            self.check_point(X)
        out = np.array(V, dtype=float, copy=True)
        if self.n:
            Y = self.rotation_blocks(X)
            W = self.rotation_blocks(out)
            sym = np.einsum("nip,njp->nij", W, Y)
            sym = 0.5 * (sym + np.transpose(sym, (0, 2, 1)))
            W -= np.einsum("nij,njp->nip", sym, Y)
        if self.m:
            r = self.range_rows(X)
            v = self.range_rows(out)
            v -= np.sum(r * v, axis=1, keepdims=True) * r
        return out

    def retract(self, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        """First-order retraction: QR per rotation block, normalization per range row."""
        if not np.any(V):
            return X.copy()
        out = X + V
        if self.n:
            blocks = self.rotation_blocks(out)
            # thin QR of the (p, d) transposed blocks, R forced to positive diagonal
            q, r = np.linalg.qr(np.transpose(blocks, (0, 2, 1)))
            signs = np.sign(np.einsum("nii->ni", r))
            signs[signs == 0] = 1.0
            q = q * signs[:, None, :]
            out[self.ordering.rotation_block] = np.transpose(q, (0, 2, 1)).reshape(
                self.n * self.d, self.p
            )
        if self.m:
            rows = self.range_rows(out)
            out[self.ordering.range_block] = rows / np.linalg.norm(
                rows, axis=1, keepdims=True
            )
        return out

    def random_tangent(
        self, X: np.ndarray, rng: np.random.Generator, unit: bool = True
    ) -> np.ndarray:
        V = self.project_tangent(X, rng.standard_normal((self.k, self.p)), check=False)
        if unit:
            nrm = np.linalg.norm(V)
            if nrm > 0:
                V = V / nrm
        return V

    # ---- Riemannian derivatives -------------------------------------------

    def riemannian_gradient(
        self,
        Q: DataMatrix | sparse.spmatrix,
        X: np.ndarray,
        QX: np.ndarray | None = None,
    ) -> np.ndarray:
        """Tangent projection of the ambient gradient 2 Q X."""
        M = Q.matrix if isinstance(Q, DataMatrix) else Q
        if QX is None:
            QX = M @ X
        return self.project_tangent(X, 2.0 * QX, check=False)

    def riemannian_hessian_vec(
        self,
        Q: DataMatrix | sparse.spmatrix,
        X: np.ndarray,
        V: np.ndarray,
        QX: np.ndarray | None = None,
        check: bool = True,
    ) -> np.ndarray:
        """Riemannian Hessian of the lifted cost applied to a tangent vector.

        Projection of the ambient Hessian 2 Q V minus the curvature term built
        from the ambient gradient: per rotation block sym(G Y') V, per range
        row (r . g) v, with G = 2 Q X.
        """
        if check and self.tangent_error(X, V) > 1e-6:
            raise ValueError("V is not tangent at X")
        M = Q.matrix if isinstance(Q, DataMatrix) else Q
        if QX is None:
            QX = M @ X
        ambient = 2.0 * (M @ V)
        if self.n:
            Y = self.rotation_blocks(X)
            G = self.rotation_blocks(2.0 * QX)
            W = self.rotation_blocks(V)
            sym = np.einsum("nip,njp->nij", G, Y)
            sym = 0.5 * (sym + np.transpose(sym, (0, 2, 1)))
            ambient[self.ordering.rotation_block] -= np.einsum(
                "nij,njp->nip", sym, W
            ).reshape(self.n * self.d, self.p)
        if self.m:
            r = self.range_rows(X)
            g = 2.0 * QX[self.ordering.range_block]
            v = self.range_rows(V)
            ambient[self.ordering.range_block] -= (
                np.sum(r * g, axis=1, keepdims=True) * v
            )
        return self.project_tangent(X, ambient, check=False)
