"""Exact Gaussian posteriors over matrices from noise-free projections.

A belief over an ``N x N`` matrix is a :class:`MatrixGaussian`: a mean and
a covariance factor ``W``. The covariance itself is ``W (x) W`` (Kronecker,
general square matrices) or ``W (x)s W`` (symmetric Kronecker, symmetric
matrices) and is never materialized outside the oracle.

Direct mode infers ``B`` from ``Y = B S``; inverse mode infers ``H = B^-1``
from ``S = H Y``. Inverse mode is direct mode with ``S`` and ``Y`` swapped.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import as_spd

__all__ = [
    "KRONECKER",
    "SYMMETRIC",
    "DIRECT",
    "INVERSE",
    "RANK_TOL",
    "RankDeficientError",
    "MatrixGaussian",
    "ObservationSet",
    "posterior_asymmetric",
    "posterior_symmetric",
    "posterior_inverse",
    "dense_condition",
    "observation_operator",
    "numerical_rank",
]

logger = logging.getLogger(__name__)

KRONECKER = "kronecker"
SYMMETRIC = "symmetric"
DIRECT = "direct"
INVERSE = "inverse"

#: Relative tolerance for rank and nullspace decisions.
RANK_TOL = 1e-10
#: Largest dimension accepted by :func:`dense_condition`.
ORACLE_GUARD = 1024


class RankDeficientError(ValueError):
    """The projection matrix does not have full column rank."""


def numerical_rank(A, tol=RANK_TOL) -> int:
    """Number of eigenvalues (symmetric ``A``) above ``tol * max|eig|``."""
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    top = np.max(np.abs(ev), initial=0.0)
    if top == 0:
        return 0
    return int(np.sum(ev > tol * top))


def _check_full_rank(A, name):
    if A.shape[1] == 0:
        return
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] > RANK_TOL * sv[0]:
        return
    # Locate the first column that is (numerically) in the span of its predecessors.
    R = scipy.linalg.qr(A, mode="r")[0]
    diag = np.abs(np.diag(R))
    small = np.flatnonzero(diag <= RANK_TOL * np.max(diag))
    bad = int(small[0]) if small.size else int(np.argmin(diag))
    raise RankDeficientError(
        f"{name} is rank deficient: column {bad} is linearly dependent on "
        f"the preceding columns (sigma_min/sigma_max = {sv[-1] / sv[0]:.2e})"
    )


@dataclass(frozen=True)
class ObservationSet:
    """Paired projections ``S, Y`` (``N x M``) with ``Y = B S`` (or ``S = H Y``)."""

    S: np.ndarray
    Y: np.ndarray
    mode: str = DIRECT

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if S.shape != Y.shape:
            raise ValueError(f"S and Y must have equal shapes, got {S.shape} and {Y.shape}")
        if self.mode not in (DIRECT, INVERSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Y))):
            raise ValueError("observations must be finite")
        # The matrix that multiplies the unknown must have full column rank.
        _check_full_rank(S if self.mode == DIRECT else Y, "S" if self.mode == DIRECT else "Y")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]

    def with_mode(self, mode) -> "ObservationSet":
        """The same pairs, treated as observations of ``B`` or of ``H``."""
        return ObservationSet(self.S, self.Y, mode)

    def is_symmetric_consistent(self, rtol=1e-8) -> bool:
        """``S^T Y`` is symmetric, as it must be for a symmetric generating matrix."""
        G = self.S.T @ self.Y
        return bool(np.max(np.abs(G - G.T), initial=0.0) <= rtol * max(np.max(np.abs(G), initial=0.0), 1e-300))


@dataclass(frozen=True)
class MatrixGaussian:
    """Gaussian belief over a square matrix.

    Attributes
    ----------
    mean : ndarray (N, N)
    cov_factor : ndarray (N, N)
        ``W`` for a prior, the Schur complement ``W_M`` for a posterior.
    structure : {"kronecker", "symmetric"}
    mode : {"direct", "inverse"}
    gram_fallback : bool
        Set when the Gram matrix could not be Cholesky factorized and a
        pivoted LU solve was used instead.
    """

    mean: np.ndarray
    cov_factor: np.ndarray
    structure: str = SYMMETRIC
    mode: str = DIRECT
    gram_fallback: bool = field(default=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        W = np.asarray(self.cov_factor, dtype=float)
        if mean.ndim != 2 or mean.shape[0] != mean.shape[1] or W.shape != mean.shape:
            raise ValueError(f"mean {mean.shape} and cov_factor {W.shape} must be equal square shapes")
        if self.structure not in (KRONECKER, SYMMETRIC):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.mode not in (DIRECT, INVERSE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.structure == SYMMETRIC and np.max(np.abs(mean - mean.T), initial=0.0) > 1e-12 * max(
            np.max(np.abs(mean), initial=0.0), 1.0
        ):
            raise ValueError("symmetric Kronecker belief requires a symmetric mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", W)

    @classmethod
    def prior(cls, mean, W, structure=SYMMETRIC, mode=DIRECT) -> "MatrixGaussian":
        return cls(np.asarray(mean, dtype=float), as_spd(W, "W"), structure, mode)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def dense_covariance(self) -> np.ndarray:
        """``N**2 x N**2`` covariance (oracle use, N <= 32)."""
        from .linalg import kron_dense, sym_kron_dense

        if self.structure == KRONECKER:
            return kron_dense(self.cov_factor)
        return sym_kron_dense(self.cov_factor)


def _gram_solve(G, rhs):
    """Solve with the SPD Gram matrix; fall back to LU if Cholesky fails."""
    G = 0.5 * (G + G.T)
    try:
        cho = scipy.linalg.cho_factor(G)
        return scipy.linalg.cho_solve(cho, rhs), False
    except np.linalg.LinAlgError:
        warnings.warn("Gram matrix is not numerically SPD; using pivoted LU", RuntimeWarning, stacklevel=3)
        return scipy.linalg.solve(G, rhs), True


def _check_obs(prior, obs, structure, mode):
    if prior.structure != structure:
        raise ValueError(f"prior must have {structure} structure, got {prior.structure}")
    if prior.mode != mode or obs.mode != mode:
        raise ValueError(f"prior and observations must be in {mode} mode")
    if obs.n != prior.n:
        raise ValueError(f"observations have dimension {obs.n}, prior has {prior.n}")


def _posterior_symmetric_core(B0, W, S, Y):
    WS = W @ S
    Delta = Y - B0 @ S
    n = S.shape[0]
    X, fallback = _gram_solve(S.T @ WS, np.hstack([WS.T, Delta.T]))
    GiWSt, GiDt = X[:, :n], X[:, n:]  # G^-1 S^T W, G^-1 Delta^T
    StD = S.T @ Delta
    mean = B0 + Delta @ GiWSt + WS @ GiDt - GiWSt.T @ StD @ GiWSt
    mean = 0.5 * (mean + mean.T)
    WM = W - WS @ GiWSt
    WM = 0.5 * (WM + WM.T)
    return mean, WM, fallback


def posterior_asymmetric(prior: MatrixGaussian, obs: ObservationSet) -> MatrixGaussian:
    """Posterior under a Kronecker prior ``N(B0, W (x) W)`` after ``Y = B S``.

    Mean ``B0 + (Y - B0 S)(S^T W S)^-1 S^T W``; the covariance is
    ``W (x) W_M`` with ``W_M = W - W S (S^T W S)^-1 S^T W``. Only the right
    factor changes, and it is returned as ``cov_factor``.
    """
    _check_obs(prior, obs, KRONECKER, DIRECT)
    W, S, Y = prior.cov_factor, obs.S, obs.Y
    WS = W @ S
    GiWSt, fallback = _gram_solve(S.T @ WS, WS.T)
    mean = prior.mean + (Y - prior.mean @ S) @ GiWSt
    WM = W - WS @ GiWSt
    return MatrixGaussian(mean, 0.5 * (WM + WM.T), KRONECKER, DIRECT, fallback)


def posterior_symmetric(prior: MatrixGaussian, obs: ObservationSet) -> MatrixGaussian:
    """Posterior under a symmetric Kronecker prior ``N(B0, W (x)s W)`` after ``Y = B S``.

    With ``G = S^T W S`` and ``D = Y - B0 S`` the mean is::

        B0 + D G^-1 S^T W + W S G^-1 D^T - W S G^-1 (S^T D) G^-1 S^T W

    and the covariance is ``W_M (x)s W_M`` with the Schur complement
    ``W_M = W - W S G^-1 S^T W`` (rank ``N - M``).
    """
    _check_obs(prior, obs, SYMMETRIC, DIRECT)
    mean, WM, fallback = _posterior_symmetric_core(prior.mean, prior.cov_factor, obs.S, obs.Y)
    return MatrixGaussian(mean, WM, SYMMETRIC, DIRECT, fallback)


def posterior_inverse(prior: MatrixGaussian, obs: ObservationSet) -> MatrixGaussian:
    """Posterior over ``H = B^-1`` under ``N(H0, W (x)s W)`` after ``S = H Y``.

    Identical to :func:`posterior_symmetric` with the roles of ``S`` and
    ``Y`` exchanged; ``W_M = W - W Y (Y^T W Y)^-1 Y^T W``.
    """
    _check_obs(prior, obs, SYMMETRIC, INVERSE)
    mean, WM, fallback = _posterior_symmetric_core(prior.mean, prior.cov_factor, obs.Y, obs.S)
    return MatrixGaussian(mean, WM, SYMMETRIC, INVERSE, fallback)


def observation_operator(P) -> np.ndarray:
    """Dense ``A`` with ``A^T vec(X) = vec(X P)`` (row-major vec)."""
    P = np.asarray(P, dtype=float)
    return np.kron(np.eye(P.shape[0]), P)


def dense_condition(prior_mean, prior_cov, A, y):
    """Condition ``N(mu, Sigma)`` on the noise-free observation ``A^T v = y``.

    Returns ``(mean, cov, jittered)``. ``A^T Sigma A`` is factorized by
    Cholesky; if that fails, ``1e-12 * trace`` jitter is added to its
    diagonal and ``jittered`` is True. Oracle use only (``D <= 1024``).
    """
    mu = np.asarray(prior_mean, dtype=float).reshape(-1)
    Sigma = np.asarray(prior_cov, dtype=float)
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    D = mu.size
    if D > ORACLE_GUARD:
        raise ValueError(f"dense conditioning limited to D <= {ORACLE_GUARD}, got {D}")
    if A.ndim == 1:
        A = A[:, None]
    if Sigma.shape != (D, D) or A.shape[0] != D or A.shape[1] != y.size:
        raise ValueError("inconsistent shapes for dense conditioning")
    if A.shape[1] == 0:
        return mu.copy(), Sigma.copy(), False
    SA = Sigma @ A
    G = A.T @ SA
    G = 0.5 * (G + G.T)
    jittered = False
    try:
        cho = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError:
        jittered = True
        logger.info("dense_condition: adding jitter to A^T Sigma A")
        cho = scipy.linalg.cho_factor(G + 1e-12 * np.trace(G) * np.eye(G.shape[0]))
    mean = mu + SA @ scipy.linalg.cho_solve(cho, y - A.T @ mu)
    cov = Sigma - SA @ scipy.linalg.cho_solve(cho, SA.T)
    return mean, 0.5 * (cov + cov.T), jittered
