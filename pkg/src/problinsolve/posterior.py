"""Posteriors over the inverse ``H = B^-1`` built from a conjugate gradient trace.

Two covariance models are provided:

* ``BFGS_CG``: the prior implied by running CG (equivalently BFGS with
  ``H_0 = alpha I``). Its covariance factor only lives on the unexplored
  complement, ``W_M = P Omega P`` with ``P = I - Fbar Fbar^T``.
* ``STANDARDIZED``: the prior ``W = H - alpha I`` under which the true ``H``
  sits one standard deviation from the mean, with ``H`` on the unexplored
  complement replaced by the scalar ``Omega = omega^2 I``.

Both models are stored as a scaled identity plus a few low-rank terms built
from ``S``, ``Y`` and the normalized residuals, so a model costs ``O(M^2)``
beyond the trace and entries can be evaluated without forming ``N x N``
matrices.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np
import scipy.linalg

from .cg import CGTrace
from .linalg import TridiagonalMatrix, as_spd, thomas_solve, tridiagonal_is_pd

__all__ = [
    "BFGS_CG",
    "STANDARDIZED",
    "StructuredMatrix",
    "PosteriorModel",
    "OmegaSeries",
    "Stationary",
    "LinearTrend",
    "Structured",
    "parse_rule",
    "normalized_residuals",
    "omega_parametrization",
    "bfgs_cg_posterior",
    "standardized_norm_posterior",
    "omega_series",
    "estimate_omega",
    "curvature_bound",
    "estimate_alpha",
    "element_marginal",
    "element_marginals",
    "expected_frobenius_error",
    "predict_solution",
    "predictive_covariance",
    "calibration_ratio",
    "theta_rescaled",
]

logger = logging.getLogger(__name__)

BFGS_CG = "bfgs_cg"
STANDARDIZED = "standardized"

#: Largest order for which ``N x N`` matrices are materialized.
MATERIALIZE_GUARD = 2048
#: Residuals with ``|F_i| <= FBAR_TOL * |F_0|`` are left out of ``Fbar``.
FBAR_TOL = 1e-14
#: Division guard for the omega series.
OMEGA_DIV_TOL = 1e-14


# ---------------------------------------------------------------------------
# Structured matrices


def _apply_core(core, X):
    if isinstance(core, TridiagonalMatrix):
        return core.matvec(X)
    return core @ X


def _dense_core(core):
    if isinstance(core, TridiagonalMatrix):
        return core.to_dense()
    return np.asarray(core)


@dataclass(frozen=True)
class StructuredMatrix:
    """``scale * I + sum_t U_t C_t V_t^T`` with thin ``U_t, V_t``.

    The cores ``C_t`` are small dense arrays or :class:`TridiagonalMatrix`.
    """

    n: int
    scale: float = 0.0
    terms: tuple = ()

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = self.scale * v
        for U, C, V in self.terms:
            out = out + U @ _apply_core(C, V.T @ v)
        return out

    __matmul__ = matvec

    def entries(self, rows, cols) -> np.ndarray:
        """Entries ``A[rows[k], cols[k]]`` for index arrays of equal length."""
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        out = self.scale * (rows == cols).astype(float)
        for U, C, V in self.terms:
            out = out + np.einsum("pk,kp->p", U[rows], _apply_core(C, V[cols].T))
        return out

    def diagonal(self) -> np.ndarray:
        out = np.full(self.n, float(self.scale))
        for U, C, V in self.terms:
            out += np.einsum("pk,kp->p", U, _apply_core(C, V.T))
        return out

    def trace(self) -> float:
        return float(np.sum(self.diagonal()))

    def to_dense(self) -> np.ndarray:
        if self.n > MATERIALIZE_GUARD:
            raise ValueError(f"refusing to materialize an {self.n}x{self.n} matrix")
        A = self.scale * np.eye(self.n)
        for U, C, V in self.terms:
            A += (U @ _dense_core(C)) @ V.T
        return A

    def frobenius_sq(self) -> float:
        if self.n <= MATERIALIZE_GUARD:
            return float(np.sum(self.to_dense() ** 2))
        # |cI + Z K R^T|^2 = N c^2 + 2c tr(K R^T Z) + tr(K (R^T R) K^T (Z^T Z))
        if not self.terms:
            return self.n * self.scale**2
        Z = np.hstack([U for U, _, _ in self.terms])
        R = np.hstack([V for _, _, V in self.terms])
        K = scipy.linalg.block_diag(*[_dense_core(C) for _, C, _ in self.terms])
        c = self.scale
        val = self.n * c**2 + 2 * c * np.trace(K @ (R.T @ Z))
        val += np.trace(K @ (R.T @ R) @ K.T @ (Z.T @ Z))
        return float(val)


def _as_matrix_like(W):
    if isinstance(W, PosteriorModel):
        return W.cov_factor
    if isinstance(W, StructuredMatrix):
        return W
    return np.asarray(W, dtype=float)


# ---------------------------------------------------------------------------
# Residual basis and the W(Omega) parametrization


def normalized_residuals(trace: CGTrace) -> np.ndarray:
    """Columns ``F_i / |F_i|`` for ``i = 0 .. min(M, N - 1)``.

    ``Fbar`` spans ``F_0 .. F_M`` and therefore contains ``Y``; residuals
    below ``1e-14 |F_0|`` are left out. For ``M = 0`` the result is empty.
    """
    if trace.m == 0:
        return np.zeros((trace.n, 0))
    last = min(trace.m, trace.n - 1)
    norms = trace.residual_norms[: last + 1]
    keep = norms > FBAR_TOL * norms[0]
    return trace.F[:, : last + 1][:, keep] / norms[keep]


def _complement_term(Fbar, omega2):
    # P Omega P with P = I - Fbar Fbar^T and Omega = omega2 I:
    # omega2 (I + Fbar (Fbar^T Fbar - 2 I) Fbar^T)
    k = Fbar.shape[1]
    core = omega2 * (Fbar.T @ Fbar - 2.0 * np.eye(k))
    return (Fbar, core, Fbar)


def omega_parametrization(trace: CGTrace, Omega) -> Union[StructuredMatrix, np.ndarray]:
    """Covariance factor ``S (S^T Y)^-1 S^T + P Omega P`` consistent with the trace.

    Every such matrix maps ``Y`` to ``S``. A scalar ``Omega`` means
    ``Omega * I`` and gives a :class:`StructuredMatrix`; an ``N x N`` SPD
    ``Omega`` gives a dense array.
    """
    S, d = trace.S, trace.curvatures
    Fbar = normalized_residuals(trace)
    span = (S, TridiagonalMatrix(1.0 / d, np.zeros(max(d.size - 1, 0))), S)
    if np.ndim(Omega) == 0:
        omega2 = float(Omega)
        if omega2 < 0:
            raise ValueError("Omega must be nonnegative")
        return StructuredMatrix(trace.n, omega2, (span, _complement_term(Fbar, omega2)))
    Omega = as_spd(Omega, "Omega")
    P = np.eye(trace.n) - Fbar @ Fbar.T
    return (S / d) @ S.T + P @ Omega @ P


# ---------------------------------------------------------------------------
# Posterior models


@dataclass(frozen=True)
class PosteriorModel:
    """Gaussian posterior ``N(H; H_M, W_M (x)s W_M)`` over the inverse.

    Attributes
    ----------
    kind : {"bfgs_cg", "standardized"}
    trace : CGTrace
    alpha : float
        Prior mean scale, ``H_0 = alpha I``.
    omega2 : float
        Scale of ``Omega = omega2 I`` on the unexplored complement.
    gram_inverse : ndarray or None
        ``(Y^T S - alpha Y^T Y)^-1`` for the standardized model.
    gram_fallback : bool
        True if the tridiagonal solve fell back to a dense one.
    """

    kind: str
    trace: CGTrace
    alpha: float
    omega2: float
    gram_inverse: Optional[np.ndarray] = None
    gram_fallback: bool = False
    _shared: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.trace.n

    @property
    def m(self) -> int:
        return self.trace.m

    def _cached(self, key, make):
        # Bases shared between models that differ only in omega2.
        if key not in self._shared:
            self._shared[key] = make()
        return self._shared[key]

    @property
    def Fbar(self) -> np.ndarray:
        return self._cached("Fbar", lambda: normalized_residuals(self.trace))

    @property
    def Y(self) -> np.ndarray:
        return self._cached("Y", lambda: self.trace.Y)

    @property
    def delta(self) -> np.ndarray:
        """``S - alpha Y``."""
        return self._cached("delta", lambda: self.trace.S - self.alpha * self.Y)

    @property
    def span_part(self) -> StructuredMatrix:
        """``S (S^T Y)^-1 S^T`` with the diagonal Gram matrix."""
        d = self.trace.curvatures
        core = TridiagonalMatrix(1.0 / d, np.zeros(max(d.size - 1, 0)))
        return StructuredMatrix(self.n, 0.0, ((self.trace.S, core, self.trace.S),))

    def with_omega2(self, omega2: float) -> "PosteriorModel":
        """Same model with a different ``omega2``; the mean is unchanged."""
        if omega2 < 0:
            raise ValueError("omega2 must be nonnegative")
        return dataclasses.replace(self, omega2=float(omega2), _shared=self._shared)

    @cached_property
    def mean(self) -> StructuredMatrix:
        S, a, d = self.trace.S, self.alpha, self.trace.curvatures
        if self.m == 0:
            return StructuredMatrix(self.n, a)
        if self.kind == STANDARDIZED:
            return StructuredMatrix(self.n, a, ((self.delta, self.gram_inverse, self.delta),))
        # alpha I + Delta D^-1 S^T + S D^-1 Delta^T - S D^-1 (D - alpha T) D^-1 S^T
        zeros = np.zeros(d.size - 1)
        dinv = TridiagonalMatrix(1.0 / d, zeros)
        T = self.trace.gram_yy()
        mixed = TridiagonalMatrix(
            -(d - a * T.diagonal) / d**2,
            a * T.off_diagonal / (d[:-1] * d[1:]),
        )
        return StructuredMatrix(
            self.n,
            a,
            ((self.delta, dinv, S), (S, dinv, self.delta), (S, mixed, S)),
        )

    @cached_property
    def cov_factor(self) -> StructuredMatrix:
        """``W_M``; the posterior covariance is ``W_M (x)s W_M``."""
        w2 = self.omega2
        if self.kind == BFGS_CG:
            if self.m == 0:
                return StructuredMatrix(self.n, w2)
            return StructuredMatrix(self.n, w2, (_complement_term(self.Fbar, w2),))
        if self.m == 0:
            return StructuredMatrix(self.n, w2 - self.alpha)
        # W(Omega) - alpha I - Delta G^-1 Delta^T
        S, d = self.trace.S, self.trace.curvatures
        span = (S, TridiagonalMatrix(1.0 / d, np.zeros(d.size - 1)), S)
        gram = (self.delta, -self.gram_inverse, self.delta)
        return StructuredMatrix(
            self.n, w2 - self.alpha, (span, gram, _complement_term(self.Fbar, w2))
        )

    def mean_dense(self) -> np.ndarray:
        return self.mean.to_dense()

    def cov_dense(self) -> np.ndarray:
        return self.cov_factor.to_dense()


def _check_omega2(omega2):
    omega2 = float(omega2)
    if not np.isfinite(omega2) or omega2 < 0:
        raise ValueError(f"omega2 must be finite and nonnegative, got {omega2}")
    return omega2


def bfgs_cg_posterior(trace: CGTrace, omega2: float, alpha: float = 1.0) -> PosteriorModel:
    """Posterior implied by CG with ``H_0 = alpha I``.

    The mean is the inverse-BFGS estimate, computed in closed form from the
    diagonal ``S^T Y`` and tridiagonal ``Y^T Y``; the covariance factor is
    ``P (omega2 I) P`` on the complement of the explored residuals.
    """
    return PosteriorModel(BFGS_CG, trace, float(alpha), _check_omega2(omega2))


def standardized_norm_posterior(trace: CGTrace, alpha: float, omega2: float) -> PosteriorModel:
    """Posterior under the standardized-norm prior ``W = H - alpha I``.

    The Gram matrix ``Y^T S - alpha Y^T Y`` is tridiagonal and is inverted
    with :func:`thomas_solve` in ``O(M^2)``.

    Raises
    ------
    ValueError
        If ``alpha >= 1 / lambda`` with ``lambda`` from
        :func:`curvature_bound`; then ``H - alpha I`` is certainly not
        positive definite.
    """
    omega2 = _check_omega2(omega2)
    alpha = float(alpha)
    if trace.m == 0:
        return PosteriorModel(STANDARDIZED, trace, alpha, omega2)
    T = trace.gram_yy()
    G = TridiagonalMatrix(trace.curvatures - alpha * T.diagonal, -alpha * T.off_diagonal)
    # G is positive definite exactly when alpha < 1 / curvature_bound(trace);
    # the pivot test checks this in O(M).
    if not tridiagonal_is_pd(G):
        lam = curvature_bound(trace)
        raise ValueError(
            f"alpha = {alpha:.6g} is not below 1/lambda_max(B) ~ {1.0 / lam:.6g}"
        )
    fallback = False
    try:
        Ginv = thomas_solve(G, np.eye(trace.m), fallback=False)
    except np.linalg.LinAlgError:
        fallback = True
        logger.warning("tridiagonal Gram solve broke down; using dense fallback")
        Ginv = thomas_solve(G, np.eye(trace.m), fallback=True)
    Ginv = 0.5 * (Ginv + Ginv.T)
    return PosteriorModel(STANDARDIZED, trace, alpha, omega2, Ginv, fallback)


# ---------------------------------------------------------------------------
# Hyperparameters


@dataclass(frozen=True)
class OmegaSeries:
    """Per-step estimates ``omega_m^2``, ``m = 1 .. M - 1``.

    ``values`` are floored at zero; ``raw`` keeps the unfloored numbers.
    """

    values: np.ndarray
    raw: np.ndarray
    predictive: bool = False

    def __len__(self):
        return self.values.size

    def head(self, k: int) -> "OmegaSeries":
        return OmegaSeries(self.values[:k], self.raw[:k], self.predictive)


def omega_series(trace: CGTrace, predictive=False, geometric=False) -> OmegaSeries:
    """Scale of the unexplored complement implied by each CG step.

    For step ``m`` the covariance ``W(omega^2 I)`` built from the first
    ``m`` steps is asked to reproduce the next curvature
    ``y_{m+1}^T W y_{m+1} = -s_{m+1}^T F_m``, giving::

        omega_m^2 = |F_{m+1}|^-2 [ sum_{i<=m} (F_m^T s_i)^2 / (s_i^T F_{i-1}) - s_{m+1}^T F_m ]

    With ``predictive=True`` the unknown ``|F_{m+1}|`` is replaced by
    ``|F_m|`` (or by ``|F_m|^2 / |F_{m-1}|`` with ``geometric=True``).
    The series stops early if the normalizing residual norm falls below
    ``1e-14``.
    """
    M = trace.m
    if M < 2:
        return OmegaSeries(np.zeros(0), np.zeros(0), predictive)
    S, F, norms = trace.S, trace.F, trace.residual_norms
    # FS[m - 1, i - 1] = F_m^T s_i for m, i = 1 .. M - 1
    FS = F[:, 1:M].T @ S[:, : M - 1]
    sF_prev = np.einsum("ij,ij->j", S[:, : M - 1], F[:, : M - 1])  # s_i^T F_{i-1}
    sF_next = np.einsum("ij,ij->j", S[:, 1:M], F[:, 1:M])  # s_{m+1}^T F_m
    raw = []
    for m in range(1, M):
        if not predictive:
            scale = norms[m + 1]
        elif geometric:
            scale = norms[m] ** 2 / norms[m - 1]
        else:
            scale = norms[m]
        if scale < OMEGA_DIV_TOL:
            logger.info("omega series truncated at step %d: residual norm %.3e", m, scale)
            break
        proj = FS[m - 1, :m]
        raw.append((np.sum(proj**2 / sF_prev[:m]) - sF_next[m - 1]) / scale**2)
    raw = np.asarray(raw, dtype=float)
    values = np.maximum(raw, 0.0)
    if np.any(raw < 0):
        logger.info("floored %d negative omega^2 values", int(np.sum(raw < 0)))
    return OmegaSeries(values, raw, predictive)


@dataclass(frozen=True)
class Stationary:
    """Mean of the series."""


@dataclass(frozen=True)
class LinearTrend:
    """Least-squares line through the series, evaluated at step ``n``."""

    n: int


@dataclass(frozen=True)
class Structured:
    """Stationary estimate, multiplied by ``multiplier`` up to step ``head_steps``."""

    head_steps: int
    multiplier: float


def parse_rule(text: str, n: int):
    """Parse ``stationary``, ``linear[:N]`` or ``structured:L:mult``."""
    parts = str(text).strip().lower().split(":")
    name = parts[0]
    try:
        if name == "stationary" and len(parts) == 1:
            return Stationary()
        if name == "linear" and len(parts) <= 2:
            return LinearTrend(int(parts[1]) if len(parts) == 2 else int(n))
        if name == "structured" and len(parts) == 3:
            return Structured(int(parts[1]), float(parts[2]))
    except ValueError:
        pass
    raise ValueError(f"unknown omega rule {text!r}")


def estimate_omega(series, rule, step: Optional[int] = None) -> float:
    """Collapse an omega series into a single ``omega^2``.

    ``step`` is the current CG step and is required by :class:`Structured`.
    """
    values = np.asarray(series.values if isinstance(series, OmegaSeries) else series, dtype=float)
    if values.size == 0:
        raise ValueError("omega series is empty")
    mean = float(np.mean(values))
    if isinstance(rule, Stationary):
        return mean
    if isinstance(rule, LinearTrend):
        if values.size < 2:
            raise ValueError("a linear trend needs at least two points")
        i = np.arange(1, values.size + 1, dtype=float)
        a, b = np.polyfit(i, values, 1)
        return float(max(a * rule.n + b, mean))
    if isinstance(rule, Structured):
        if step is None:
            raise ValueError("the structured rule needs the current step")
        return mean * rule.multiplier if step <= rule.head_steps else mean
    raise TypeError(f"unknown omega rule {rule!r}")


def curvature_bound(trace: CGTrace) -> float:
    """Largest ``y^T y / s^T y`` over ``s`` in the span of the steps.

    This is the top eigenvalue of the tridiagonal pencil
    ``(Y^T Y, S^T Y)``, computed from residual norms and curvatures without
    extra matvecs. It is a lower bound on ``lambda_max(B)`` that dominates
    every Rayleigh quotient ``s_i^T y_i / s_i^T s_i`` of the trace, and
    ``Y^T S - alpha Y^T Y`` is positive definite exactly when
    ``alpha`` is below its reciprocal.
    """
    if trace.m == 0:
        raise ValueError("empty trace")
    T = trace.gram_yy()
    q = 1.0 / np.sqrt(trace.curvatures)
    d = T.diagonal * q * q
    if T.order == 1:
        return float(d[0])
    e = T.off_diagonal * q[:-1] * q[1:]
    top = scipy.linalg.eigvalsh_tridiagonal(d, e, select="i", select_range=(T.order - 1, T.order - 1))
    return float(top[0])


def estimate_alpha(trace: CGTrace, safety: float = 0.9) -> float:
    """Prior mean scale ``alpha = safety / lambda`` with ``lambda`` from :func:`curvature_bound`.

    Since ``lambda <= lambda_max(B)`` this is a heuristic for staying below
    ``lambda_min(H)``; it does guarantee a positive definite Gram matrix.
    """
    if not 0 < safety < 1:
        raise ValueError("safety must lie in (0, 1)")
    return safety / curvature_bound(trace)


# ---------------------------------------------------------------------------
# Uncertainty outputs


def element_marginals(model: PosteriorModel, rows, cols):
    """Means and variances of ``H[rows[k], cols[k]]``."""
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    W = model.cov_factor
    mean = model.mean.entries(rows, cols)
    wii = W.entries(rows, rows)
    wjj = W.entries(cols, cols)
    wij = W.entries(rows, cols)
    return mean, 0.5 * (wii * wjj + wij**2)


def element_marginal(model: PosteriorModel, i: int, j: int):
    """Mean and variance of the single element ``H[i, j]``."""
    if not (0 <= i < model.n and 0 <= j < model.n):
        raise IndexError(f"index ({i}, {j}) out of range for N={model.n}")
    mean, var = element_marginals(model, [i], [j])
    return float(mean[0]), float(var[0])


def expected_frobenius_error(W) -> float:
    """``sqrt(E |H - H_M|_F^2) = sqrt((tr(W)^2 + |W|_F^2) / 2)``.

    ``W`` is a covariance factor (array or :class:`StructuredMatrix`) or a
    :class:`PosteriorModel`.
    """
    W = _as_matrix_like(W)
    if isinstance(W, StructuredMatrix):
        tr, fro2 = W.trace(), W.frobenius_sq()
    else:
        tr, fro2 = float(np.trace(W)), float(np.sum(W**2))
    return float(np.sqrt(max(0.5 * (tr**2 + fro2), 0.0)))


def _check_rhs(model, b_test):
    b = np.asarray(b_test, dtype=float).reshape(-1)
    if b.size != model.n:
        raise ValueError(f"b_test has length {b.size}, model dimension is {model.n}")
    return b


def predict_solution(model: PosteriorModel, b_test):
    """Mean ``H_M b`` and marginal variances of ``x = H b``.

    The covariance of ``x`` is
    ``Sigma_ij = (W_ij (b^T W b) + (W b)_i (W b)_j) / 2`` with ``W = W_M``.
    """
    b = _check_rhs(model, b_test)
    W = model.cov_factor
    Wb = W.matvec(b)
    var = 0.5 * (W.diagonal() * (b @ Wb) + Wb**2)
    return model.mean.matvec(b), var


def predictive_covariance(model: PosteriorModel, b_test) -> np.ndarray:
    """Full covariance ``Sigma`` of ``x = H b`` (materializes ``N x N``)."""
    b = _check_rhs(model, b_test)
    W = model.cov_dense()
    Wb = W @ b
    Sigma = 0.5 * (W * (b @ Wb) + np.outer(Wb, Wb))
    return 0.5 * (Sigma + Sigma.T)


def calibration_ratio(B_true, B0, W, i: int, j: int) -> float:
    """Squared error of the prior mean in element ``(i, j)`` over its prior variance.

    ``e^2 = 2 (B0 - B)_ij^2 / (W_ii W_jj + W_ij^2)``; values near one
    indicate a calibrated prior.
    """
    B_true = np.asarray(B_true, dtype=float)
    B0 = np.asarray(B0, dtype=float)
    W = np.asarray(W, dtype=float)
    denom = W[i, i] * W[j, j] + W[i, j] ** 2
    if denom <= 0:
        raise ValueError(f"prior variance of element ({i}, {j}) is not positive")
    return float(2.0 * (B0[i, j] - B_true[i, j]) ** 2 / denom)


def theta_rescaled(B) -> np.ndarray:
    """``theta^2 B`` with ``theta = lambda_min / (lambda_min - 1)``.

    Used as a covariance factor with unit prior mean, this removes
    over-confidence: every ``e_ij <= 1``.

    Raises
    ------
    ValueError
        If ``lambda_min(B) <= 1 + 1e-6``.
    """
    B = as_spd(B, "B")
    lam = float(scipy.linalg.eigvalsh(B, subset_by_index=(0, 0))[0])
    if lam <= 1.0 + 1e-6:
        raise ValueError(f"theta rescaling needs lambda_min > 1, got {lam:.6g}")
    theta = lam / (lam - 1.0)
    return theta**2 * np.array(B)
