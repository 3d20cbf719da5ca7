"""Cost, derivatives, reduced block problems, certificate operator and
block preconditioner for the rank-restricted problem

    min_X  f(X) = <Q, X^T X>   over X in (St(d, r) x R^r)^n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import manifold as mf
from .posegraph import BlockPartition, pose_columns


def _check_dims(Q: sp.spmatrix, X: np.ndarray) -> None:
    if X.ndim != 2 or Q.shape[0] != X.shape[1]:
        raise ValueError(f"dimension mismatch: Q is {Q.shape}, X is {X.shape}")


def right_multiply(X: np.ndarray, Q: sp.spmatrix) -> np.ndarray:
    """``X @ Q`` for dense X and sparse symmetric Q."""
    return np.asarray((Q @ X.T).T)


def cost(Q: sp.spmatrix, X: np.ndarray) -> float:
    """<Q, X^T X> = trace(X Q X^T)."""
    _check_dims(Q, X)
    return float(np.vdot(X, right_multiply(X, Q)))


def euclidean_gradient(Q: sp.spmatrix, X: np.ndarray) -> np.ndarray:
    _check_dims(Q, X)
    return 2.0 * right_multiply(X, Q)


def riemannian_gradient(Q: sp.spmatrix, X: np.ndarray, d: int) -> np.ndarray:
    return mf.project_to_tangent(X, euclidean_gradient(Q, X), d)


def multiplier_blocks(Q: sp.spmatrix, X: np.ndarray, d: int) -> np.ndarray:
    """The ``(n, d, d)`` nonzero blocks of Lambda(X) = SymBlockDiag+(X^T X Q).

    Only the diagonal blocks ``Y_i^T (XQ)_{Y_i}`` are formed; X^T X Q never is.
    """
    return mf.sym_block_products(X, right_multiply(X, Q), d)


def hessian_vec(Q: sp.spmatrix, X: np.ndarray, eta: np.ndarray, d: int,
                Lam: np.ndarray | None = None) -> np.ndarray:
    """Riemannian Hessian ``2 proj(eta S(X))`` with S = Q - Lambda(X)."""
    if Lam is None:
        Lam = multiplier_blocks(Q, X, d)
    etaS = right_multiply(eta, Q) - mf.right_multiply_blocks(eta, Lam, d)
    return 2.0 * mf.project_to_tangent(X, etaS, d)


class CertificateOperator:
    """Matrix-free S(X) = Q - Lambda(X).

    ``apply`` accepts a length-(d+1)n vector or an ``r x (d+1)n`` matrix whose
    rows are such vectors.
    """

    def __init__(self, Q: sp.spmatrix, Lam: np.ndarray, d: int):
        self.Q = sp.csr_matrix(Q)
        self.Lam = np.asarray(Lam)
        self.d = d
        self.n = self.Lam.shape[0]
        self.dim = self.n * (d + 1)

    def apply(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            return self.Q @ w - mf.right_multiply_blocks(w[None, :], self.Lam, self.d)[0]
        return right_multiply(w, self.Q) - mf.right_multiply_blocks(w, self.Lam, self.d)

    __call__ = apply

    def dense(self) -> np.ndarray:
        """Dense S, for small-instance checks only."""
        D = self.d + 1
        L = np.zeros((self.dim, self.dim))
        for i in range(self.n):
            L[i * D:i * D + self.d, i * D:i * D + self.d] = self.Lam[i]
        return self.Q.toarray() - L


def certificate(Q: sp.spmatrix, X: np.ndarray, d: int) -> CertificateOperator:
    return CertificateOperator(Q, multiplier_blocks(Q, X, d), d)


def apply_certificate(S: CertificateOperator, w: np.ndarray) -> np.ndarray:
    return S.apply(w)


class Preconditioner:
    """Cached sparse LU factor of ``Q_b + lam I``.

    ``apply(w)`` returns ``w (Q_b + lam I)^{-1}`` for a row-stacked ``w``;
    ``apply_tangent`` additionally projects onto the tangent space at ``X``.
    """

    def __init__(self, Q_b: sp.spmatrix, lam: float | None = None, lam_scale: float = 1e-3):
        Q_b = sp.csc_matrix(Q_b)
        if lam is None:
            lam = lam_scale * float(np.mean(Q_b.diagonal()))
        if not lam > 0:
            raise ValueError("preconditioner regularization must be positive")
        self.lam = lam
        self.M = (Q_b + lam * sp.identity(Q_b.shape[0], format="csc")).tocsc()
        try:
            self._lu = splu(self.M)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"preconditioner factorization failed: {exc}") from None

    def apply(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            return self._lu.solve(w)
        return self._lu.solve(np.ascontiguousarray(w.T)).T

    def apply_tangent(self, X: np.ndarray, eta: np.ndarray, d: int) -> np.ndarray:
        return mf.project_to_tangent(X, self.apply(eta), d)


def build_preconditioner(Q_b: sp.spmatrix, lam: float | None = None) -> Preconditioner:
    return Preconditioner(Q_b, lam)


@dataclass
class ReducedProblem:
    """f_b(X_b) = <Q_b, X_b^T X_b> + 2 <F_b, X_b> + const, all other blocks frozen."""

    b: int
    d: int
    Q_b: sp.csr_matrix
    F_b: np.ndarray
    const: float = 0.0

    def cost(self, X_b: np.ndarray) -> float:
        return float(np.vdot(X_b, right_multiply(X_b, self.Q_b)) + 2.0 * np.vdot(self.F_b, X_b) + self.const)

    def euclidean_gradient(self, X_b: np.ndarray) -> np.ndarray:
        return 2.0 * (right_multiply(X_b, self.Q_b) + self.F_b)

    def gradient(self, X_b: np.ndarray) -> np.ndarray:
        return mf.project_to_tangent(X_b, self.euclidean_gradient(X_b), self.d)

    def weingarten_blocks(self, X_b: np.ndarray, G: np.ndarray | None = None) -> np.ndarray:
        if G is None:
            G = self.euclidean_gradient(X_b)
        return mf.sym_block_products(X_b, G, self.d)

    def hessian_vec(self, X_b: np.ndarray, eta: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
        """proj(2 eta Q_b - eta SymBlockDiag+(X_b^T G)) where G is the Euclidean gradient."""
        if W is None:
            W = self.weingarten_blocks(X_b)
        amb = 2.0 * right_multiply(eta, self.Q_b) - mf.right_multiply_blocks(eta, W, self.d)
        return mf.project_to_tangent(X_b, amb, self.d)

    def cost_change(self, X_b: np.ndarray, X_new: np.ndarray) -> float:
        """f_b(X_new) - f_b(X_b) without subtracting two large numbers."""
        D = X_new - X_b
        return float(2.0 * np.vdot(right_multiply(X_b, self.Q_b) + self.F_b, D)
                     + np.vdot(right_multiply(D, self.Q_b), D))


def reduce(Q: sp.spmatrix, X: np.ndarray, part: BlockPartition, b: int, d: int) -> ReducedProblem:
    """Reduced problem of robot ``b`` with every other block held at its value in ``X``."""
    Q = sp.csr_matrix(Q)
    cols = pose_columns(part.poses_of[b], d)
    mask = np.ones(Q.shape[0], dtype=bool)
    mask[cols] = False
    other = np.flatnonzero(mask)
    Q_b = Q[cols][:, cols].tocsr()
    Q_ob = Q[other][:, cols]
    X_o = X[:, other]
    F_b = np.asarray((Q_ob.T @ X_o.T).T) if other.size else np.zeros((X.shape[0], cols.size))
    const = float(np.vdot(X_o, right_multiply(X_o, Q[other][:, other]))) if other.size else 0.0
    return ReducedProblem(b, d, Q_b, F_b, const)
