"""Dense symmetric linear algebra primitives.

Matrices are vectorized row-major throughout: entry ``(i, j)`` of an
``N x M`` matrix lands at index ``i * M + j``. Dense ``N**2 x N**2``
operators are only built for oracle checks and are size-guarded.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numba import njit

__all__ = [
    "NotSPDError",
    "SingularTridiagonalError",
    "TridiagonalMatrix",
    "as_spd",
    "is_spd",
    "vectorize",
    "unvectorize",
    "symmetrize",
    "symmetrizer_dense",
    "kron_dense",
    "sym_kron_apply",
    "sym_kron_dense",
    "sym_kron_solve",
    "weighted_frobenius",
    "thomas_solve",
    "tridiagonal_is_pd",
]

#: Largest order ``N`` for which ``N**2 x N**2`` operators are materialized.
DENSE_GUARD = 32
#: Relative pivot threshold for the SPD certificate.
SPD_PIVOT_TOL = 1e-12
#: Relative pivot threshold for the tridiagonal elimination.
THOMAS_PIVOT_TOL = 1e-14


class NotSPDError(ValueError):
    """Raised when a matrix fails the symmetric positive definite certificate."""


class SingularTridiagonalError(np.linalg.LinAlgError):
    """Raised when tridiagonal elimination meets a vanishing pivot."""


def _square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {A.shape}")
    return A


def as_spd(A, name="matrix"):
    """Certify ``A`` as symmetric positive definite.

    The returned array is exactly symmetric (the upper triangle is mirrored
    onto the lower one) and read-only. Certification is a Cholesky
    factorization; it fails if the factorization breaks down or if any
    squared pivot falls below ``1e-12 * max(diag(A))``.

    Raises
    ------
    NotSPDError
        If ``A`` is not finite, not symmetric to 1e-10 relative, or not
        positive definite.
    """
    A = _square(A, name)
    if not np.all(np.isfinite(A)):
        raise NotSPDError(f"{name} has non-finite entries")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * max(scale, 1e-300):
        raise NotSPDError(f"{name} is not symmetric")
    W = np.triu(A) + np.triu(A, 1).T
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise NotSPDError(f"{name} is not positive definite (Cholesky failed)") from None
    pivots = np.diag(L) ** 2
    dmax = np.max(np.diag(W))
    if dmax <= 0 or np.min(pivots) < SPD_PIVOT_TOL * dmax:
        raise NotSPDError(
            f"{name} is numerically singular: smallest Cholesky pivot "
            f"{np.min(pivots):.3e} vs. max diagonal {dmax:.3e}"
        )
    W.setflags(write=False)
    return W


def is_spd(A) -> bool:
    try:
        as_spd(A)
    except (NotSPDError, ValueError):
        return False
    return True


def vectorize(A) -> np.ndarray:
    """Stack the rows of ``A`` into a vector: ``(i, j) -> i * cols + j``."""
    return np.asarray(A, dtype=float).reshape(-1).copy()


def unvectorize(v, rows, cols=None) -> np.ndarray:
    cols = rows if cols is None else cols
    return np.asarray(v, dtype=float).reshape(rows, cols).copy()


def symmetrize(A) -> np.ndarray:
    """Return ``(A + A.T) / 2``."""
    A = _square(A)
    return 0.5 * (A + A.T)


def _check_guard(n):
    if n > DENSE_GUARD:
        raise ValueError(
            f"refusing to materialize a {n**2}x{n**2} operator (N={n} > {DENSE_GUARD})"
        )


def symmetrizer_dense(n) -> np.ndarray:
    """Explicit symmetrization operator on vectorized ``n x n`` matrices.

    Entry ``(ij, kl)`` is ``(delta_ik delta_jl + delta_il delta_jk) / 2``.
    """
    _check_guard(n)
    eye = np.eye(n)
    G = 0.5 * (np.einsum("ik,jl->ijkl", eye, eye) + np.einsum("il,jk->ijkl", eye, eye))
    return G.reshape(n * n, n * n)


def kron_dense(W) -> np.ndarray:
    """Row-major Kronecker covariance ``W (x) W``: entry ``(ij, kl) = W_ik W_jl``."""
    W = _square(W, "W")
    _check_guard(W.shape[0])
    return np.kron(W, W)


def sym_kron_apply(W, K) -> np.ndarray:
    """Action of the symmetric Kronecker product ``W (x)s W`` on ``vec(K)``.

    Returns the matrix ``(W K W^T + W^T K^T W) / 2``.
    """
    W = _square(W, "W")
    K = _square(K, "K")
    if W.shape != K.shape:
        raise ValueError(f"dimension mismatch: W is {W.shape}, K is {K.shape}")
    return 0.5 * (W @ K @ W.T + W.T @ K.T @ W)


def sym_kron_dense(W) -> np.ndarray:
    """Dense symmetric Kronecker product, ``(ij, kl) -> (W_ik W_jl + W_jk W_il) / 2``.

    Oracle use only; guarded to ``N <= 32``.
    """
    W = _square(W, "W")
    n = W.shape[0]
    _check_guard(n)
    V = 0.5 * (np.einsum("ik,jl->ijkl", W, W) + np.einsum("jk,il->ijkl", W, W))
    return V.reshape(n * n, n * n)


def sym_kron_solve(W, K) -> np.ndarray:
    """Solve ``(W (x)s W) vec(X) = vec(K)`` on the symmetric matrices.

    The symmetric Kronecker product is singular on antisymmetric matrices;
    on the symmetric subspace its inverse is ``W^-1 (x)s W^-1``, so the
    (minimum norm) solution for symmetric ``K`` is ``W^-1 K W^-1``.
    """
    W = as_spd(W, "W")
    K = symmetrize(K)
    cho = scipy.linalg.cho_factor(W)
    X = scipy.linalg.cho_solve(cho, scipy.linalg.cho_solve(cho, K).T)
    return symmetrize(X)


def weighted_frobenius(A, W) -> float:
    """Weighted Frobenius norm ``sqrt(tr(A W^-1 A^T W^-1))``."""
    A = _square(A)
    W = as_spd(W, "W")
    if A.shape != W.shape:
        raise ValueError(f"dimension mismatch: A is {A.shape}, W is {W.shape}")
    cho = scipy.linalg.cho_factor(W)
    WiA = scipy.linalg.cho_solve(cho, A)  # W^-1 A
    WiAt = scipy.linalg.cho_solve(cho, A.T)  # W^-1 A^T
    # tr(A W^-1 A^T W^-1) = sum_ij (W^-1 A)_ij (W^-1 A^T)_ji
    val = np.sum(WiA * WiAt.T)
    return float(np.sqrt(max(val, 0.0)))


@dataclass(frozen=True)
class TridiagonalMatrix:
    """Symmetric tridiagonal matrix stored as its diagonal and off-diagonal."""

    diagonal: np.ndarray
    off_diagonal: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.diagonal, dtype=float)
        e = np.ascontiguousarray(self.off_diagonal, dtype=float)
        if d.ndim != 1 or e.ndim != 1 or e.size != max(d.size - 1, 0):
            raise ValueError(
                f"need M diagonal and M-1 off-diagonal entries, got {d.size} and {e.size}"
            )
        object.__setattr__(self, "diagonal", d)
        object.__setattr__(self, "off_diagonal", e)

    @property
    def order(self) -> int:
        return self.diagonal.size

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d, e = self.diagonal, self.off_diagonal
        if x.ndim == 1:
            out = d * x
            out[:-1] += e * x[1:]
            out[1:] += e * x[:-1]
        else:
            out = d[:, None] * x
            out[:-1] += e[:, None] * x[1:]
            out[1:] += e[:, None] * x[:-1]
        return out

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diagonal) + np.diag(self.off_diagonal, 1) + np.diag(self.off_diagonal, -1)


@njit(cache=True)
def _thomas(d, e, rhs, rel_tol):
    # Symmetric diagonal equilibration q_i = |d_i|^(-1/2), then elimination
    # without pivoting. Returns (solution, ok); ok is False on breakdown.
    m, k = rhs.shape
    q = np.empty(m)
    for i in range(m):
        a = abs(d[i])
        q[i] = 1.0 / np.sqrt(a) if a > 0.0 else 1.0
    scale = 0.0
    for i in range(m):
        scale = max(scale, abs(d[i]) * q[i] * q[i])
        if i < m - 1:
            scale = max(scale, abs(e[i]) * q[i] * q[i + 1])
    tol = rel_tol * scale
    c = np.empty(m)
    x = np.empty((m, k))
    piv = d[0] * q[0] * q[0]
    if abs(piv) <= tol:
        return x, False
    inv = 1.0 / piv
    if m > 1:
        c[0] = e[0] * q[0] * q[1] * inv
    for j in range(k):
        x[0, j] = q[0] * rhs[0, j] * inv
    for i in range(1, m):
        ei = e[i - 1] * q[i - 1] * q[i]
        piv = d[i] * q[i] * q[i] - ei * c[i - 1]
        if abs(piv) <= tol:
            return x, False
        inv = 1.0 / piv
        if i < m - 1:
            c[i] = e[i] * q[i] * q[i + 1] * inv
        for j in range(k):
            x[i, j] = (q[i] * rhs[i, j] - ei * x[i - 1, j]) * inv
    for i in range(m - 2, -1, -1):
        for j in range(k):
            x[i, j] -= c[i] * x[i + 1, j]
    for i in range(m):
        for j in range(k):
            x[i, j] *= q[i]
    return x, True


def thomas_solve(T: TridiagonalMatrix, rhs, fallback=True) -> np.ndarray:
    """Solve ``T x = rhs`` by tridiagonal elimination without pivoting.

    ``rhs`` may be a vector or an ``M x K`` matrix; cost is ``O(M K)``.
    The system is first scaled symmetrically to unit diagonal magnitude; a
    pivot of the scaled matrix with magnitude at most ``1e-14 * max|T|``
    counts as breakdown.
    On breakdown a dense partially pivoted LU solve is used and a
    ``RuntimeWarning`` is issued; with ``fallback=False`` a
    :class:`SingularTridiagonalError` is raised instead.
    """
    rhs = np.asarray(rhs, dtype=float)
    vector = rhs.ndim == 1
    R = np.ascontiguousarray(rhs.reshape(-1, 1) if vector else rhs)
    if R.shape[0] != T.order:
        raise ValueError(f"rhs has {R.shape[0]} rows, matrix has order {T.order}")
    if T.order == 0:
        return rhs.copy()
    d = np.ascontiguousarray(T.diagonal, dtype=float)
    e = np.ascontiguousarray(T.off_diagonal, dtype=float)
    x, ok = _thomas(d, e, R, THOMAS_PIVOT_TOL)
    if not ok:
        if not fallback:
            raise SingularTridiagonalError("pivot breakdown in tridiagonal elimination")
        warnings.warn(
            "pivot breakdown in tridiagonal elimination; using dense pivoted solve",
            RuntimeWarning,
            stacklevel=2,
        )
        x = scipy.linalg.solve(T.to_dense(), R)
    return x[:, 0] if vector else x


@njit(cache=True)
def _ldl_pivots_positive(d, e):
    piv = d[0]
    if not piv > 0.0:
        return False
    for i in range(1, d.shape[0]):
        piv = d[i] - e[i - 1] * e[i - 1] / piv
        if not piv > 0.0:
            return False
    return True


def tridiagonal_is_pd(T: TridiagonalMatrix) -> bool:
    """True if all pivots of the unpivoted ``L D L^T`` factorization are positive.

    For a symmetric tridiagonal matrix this is equivalent to positive
    definiteness and costs ``O(M)``.
    """
    if T.order == 0:
        return True
    return bool(_ldl_pivots_positive(np.ascontiguousarray(T.diagonal, dtype=float),
                                     np.ascontiguousarray(T.off_diagonal, dtype=float)))
