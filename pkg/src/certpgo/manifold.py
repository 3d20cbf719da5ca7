"""Geometry of the product manifold (St(d, r) x R^r)^n.

A lifted state is stored as a plain ``r x (d+1)n`` array ``X = [Y_1 p_1 ... Y_n p_n]``
together with the pose dimension ``d``. Tangent vectors share that layout. All
functions here are stateless.
"""

from __future__ import annotations

import numpy as np

from .posegraph import Poses, rng_from_seed

SINGULAR_RTOL = 1e-12


class SingularityError(np.linalg.LinAlgError):
    """A matrix handed to the Stiefel projection is (numerically) rank deficient."""


def blocks(X: np.ndarray, d: int) -> np.ndarray:
    """View ``X`` as an ``(r, n, d+1)`` array (no copy)."""
    r = X.shape[0]
    return X.reshape(r, -1, d + 1)


def stiefel_part(X: np.ndarray, d: int) -> np.ndarray:
    """The Stiefel blocks as an ``(n, r, d)`` array."""
    return blocks(X, d)[:, :, :d].transpose(1, 0, 2)


def translation_part(X: np.ndarray, d: int) -> np.ndarray:
    """The lifted translations as an ``(r, n)`` array."""
    return blocks(X, d)[:, :, d]


def assemble(Y: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Inverse of (stiefel_part, translation_part)."""
    n, r, d = Y.shape
    B = np.empty((r, n, d + 1))
    B[:, :, :d] = Y.transpose(1, 0, 2)
    B[:, :, d] = p
    return B.reshape(r, n * (d + 1))


def project_to_stiefel(A: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns (polar factor), batched over leading axes."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    smax = s[..., :1]
    if np.any(s[..., -1:] < SINGULAR_RTOL * smax) or np.any(smax == 0):
        raise SingularityError("rank-deficient argument to Stiefel projection")
    return U @ Vt


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def sym_block_products(X: np.ndarray, U: np.ndarray, d: int) -> np.ndarray:
    """Symmetrized ``Y_i^T U_Yi`` for every pose: the nonzero blocks of SymBlockDiag+(X^T U)."""
    return sym(np.einsum("rnd,rne->nde", blocks(X, d)[:, :, :d], blocks(U, d)[:, :, :d]))


def right_multiply_blocks(X: np.ndarray, S: np.ndarray, d: int) -> np.ndarray:
    """``X @ Diag(S_1, 0, ..., S_n, 0)`` for ``(n, d, d)`` blocks ``S``: translation columns zero."""
    B = blocks(X, d)
    out = np.zeros_like(B)
    out[:, :, :d] = np.einsum("rnd,nde->rne", B[:, :, :d], S)
    return out.reshape(X.shape)


def project_to_tangent(X: np.ndarray, U: np.ndarray, d: int) -> np.ndarray:
    """Orthogonal projection of an ambient ``U`` onto the tangent space at ``X``."""
    return U - right_multiply_blocks(X, sym_block_products(X, U, d), d)


def normal_component(X: np.ndarray, S: np.ndarray, d: int) -> np.ndarray:
    """A normal vector ``X Diag(S_1, 0, ...)`` from symmetric ``(n, d, d)`` blocks."""
    return right_multiply_blocks(X, sym(S), d)


def retract(X: np.ndarray, eta: np.ndarray, d: int) -> np.ndarray:
    """Projection retraction: Stiefel blocks re-orthonormalized, translations shifted."""
    Z = X + eta
    B = blocks(Z, d)
    Y = project_to_stiefel(B[:, :, :d].transpose(1, 0, 2))
    return assemble(Y, B[:, :, d])


def project_to_manifold(Z: np.ndarray, d: int) -> np.ndarray:
    """Blockwise closest point on the manifold (used for the accelerated iterates)."""
    return retract(Z, np.zeros_like(Z), d)


def inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b))


def norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def lift_rank(X: np.ndarray) -> np.ndarray:
    """Append a zero row: the same point of the rank-(r+1) manifold."""
    return np.vstack([X, np.zeros((1, X.shape[1]))])


def random_stiefel(r: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed r x d matrix with orthonormal columns (sign-fixed QR)."""
    if r < d:
        raise ValueError("need r >= d")
    Q, R = np.linalg.qr(rng.standard_normal((r, d)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def random_lift(T: Poses, r: int, seed: int | None = 0, Y_rand: np.ndarray | None = None) -> np.ndarray:
    """``Y_rand @ [R_1 t_1 ... R_n t_n]`` for a random (or supplied) Stiefel ``Y_rand``."""
    d = T.d
    if r < d:
        raise ValueError("lift rank must be at least d")
    if Y_rand is None:
        Y_rand = random_stiefel(r, d, rng_from_seed(seed))
    return Y_rand @ T.matrix()


def random_point(n: int, d: int, r: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Random manifold point with Gaussian lifted translations of the given scale."""
    Y = project_to_stiefel(rng.standard_normal((n, r, d)))
    return assemble(Y, scale * rng.standard_normal((r, n)))


def random_tangent(X: np.ndarray, d: int, rng: np.random.Generator) -> np.ndarray:
    return project_to_tangent(X, rng.standard_normal(X.shape), d)


def stiefel_violation(X: np.ndarray, d: int) -> float:
    """max_i ||Y_i^T Y_i - I||_max, zero on the manifold."""
    Y = stiefel_part(X, d)
    return float(np.abs(np.swapaxes(Y, 1, 2) @ Y - np.eye(d)).max())


def tangent_violation(X: np.ndarray, eta: np.ndarray, d: int) -> float:
    """Size of SymBlockDiag+(eta^T X); zero for tangent vectors."""
    return float(np.abs(sym_block_products(X, eta, d)).max())
