"""Conjugate gradients with a full trace, and the matching BFGS iteration.

Notation: ``F_i = B x_i - b`` is the residual (gradient of
``x^T B x / 2 - x^T b``) after step ``i``, ``s_i = x_i - x_{i-1}`` the step
and ``y_i = F_i - F_{i-1} = B s_i``. Arrays are stored column-wise, so
``trace.S[:, i - 1]`` is ``s_i`` and ``trace.F[:, i]`` is ``F_i``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .linalg import NotSPDError, TridiagonalMatrix

__all__ = [
    "LinearOperator",
    "aslinearoperator",
    "CGTrace",
    "TraceReport",
    "KrylovReport",
    "cg_solve",
    "bfgs_directions",
    "check_trace",
    "krylov_span_check",
]

logger = logging.getLogger(__name__)

#: Invariant violations above this are warnings ...
WARN_TOL = 1e-6
#: ... and above this hard failures (when requested).
FAIL_TOL = 1e-3
#: Residuals below this fraction of ``|F_0|`` (the default stopping level)
#: are excluded from the invariant checks.
LIVE_TOL = 1e-10


class LinearOperator:
    """A symmetric linear map ``v -> B v`` of dimension ``n``.

    ``dense`` is kept when the operator was built from a matrix; tests and
    oracles use it, the solvers never do.
    """

    def __init__(self, matvec: Callable[[np.ndarray], np.ndarray], n: int, dense=None):
        self._matvec = matvec
        self.n = int(n)
        self.dense = dense

    @classmethod
    def from_dense(cls, B) -> "LinearOperator":
        B = np.asarray(B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ValueError(f"operator matrix must be square, got {B.shape}")
        return cls(lambda v: B @ v, B.shape[0], dense=B)

    @property
    def shape(self):
        return (self.n, self.n)

    def matvec(self, v) -> np.ndarray:
        return np.asarray(self._matvec(np.asarray(v, dtype=float)), dtype=float)

    __matmul__ = matvec

    def check(self, probes=3, seed=0):
        """Probe linearity and symmetry on random vectors.

        Raises
        ------
        NotSPDError
            If ``|B(u + v) - Bu - Bv| > 1e-10 * scale`` or
            ``|u^T B v - v^T B u| > 1e-8 * scale`` on a probe.
        """
        rng = np.random.default_rng(seed)
        for _ in range(probes):
            u, v = rng.standard_normal((2, self.n))
            Bu, Bv, Buv = self.matvec(u), self.matvec(v), self.matvec(u + v)
            scale = np.linalg.norm(Bu) + np.linalg.norm(Bv) + 1e-300
            if np.linalg.norm(Buv - Bu - Bv) > 1e-10 * scale:
                raise NotSPDError("operator is not linear on random probes")
            a, b = u @ Bv, v @ Bu
            if abs(a - b) > 1e-8 * np.linalg.norm(u) * np.linalg.norm(Bv):
                raise NotSPDError("operator is not symmetric on random probes")


def aslinearoperator(B, n=None) -> LinearOperator:
    if isinstance(B, LinearOperator):
        return B
    if callable(B):
        if n is None:
            raise ValueError("dimension n is required for a callable operator")
        return LinearOperator(B, n)
    return LinearOperator.from_dense(B)


@dataclass(frozen=True)
class CGTrace:
    """Record of a conjugate gradient (or equivalent BFGS) run.

    Attributes
    ----------
    S : ndarray (N, M)
        Steps ``s_i = x_i - x_{i-1}``.
    F : ndarray (N, M + 1)
        Residuals ``F_0 .. F_M``.
    step_lengths : ndarray (M,)
        ``alpha_i`` with ``s_i = alpha_i d_i`` for the search direction ``d_i``.
    curvatures : ndarray (M,)
        ``s_i^T y_i``, the diagonal of the Gram matrix ``S^T Y``.
    x0 : ndarray (N,)
    converged : bool
    """

    S: np.ndarray
    F: np.ndarray
    step_lengths: np.ndarray
    curvatures: np.ndarray
    x0: np.ndarray
    converged: bool = False
    residual_norms: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        if self.F.shape[1] != self.S.shape[1] + 1:
            raise ValueError("F must have one more column than S")
        if self.residual_norms is None:
            object.__setattr__(self, "residual_norms", np.linalg.norm(self.F, axis=0))

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.S.shape[1]

    @property
    def Y(self) -> np.ndarray:
        """``y_i = F_i - F_{i-1}``, rebuilt from the residuals."""
        return np.diff(self.F, axis=1)

    @property
    def directions(self) -> np.ndarray:
        return self.S / self.step_lengths

    @property
    def iterates(self) -> np.ndarray:
        """``x_0 .. x_M`` as columns."""
        X = np.empty((self.n, self.m + 1))
        X[:, 0] = self.x0
        X[:, 1:] = self.x0[:, None] + np.cumsum(self.S, axis=1)
        return X

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.S.sum(axis=1)

    def truncated(self, m: int) -> "CGTrace":
        """The trace of the first ``m`` steps."""
        if not 0 <= m <= self.m:
            raise ValueError(f"cannot truncate a {self.m}-step trace to {m} steps")
        return CGTrace(
            self.S[:, :m],
            self.F[:, : m + 1],
            self.step_lengths[:m],
            self.curvatures[:m],
            self.x0,
            converged=self.converged and m == self.m,
            residual_norms=self.residual_norms[: m + 1],
        )

    def gram_yy(self) -> TridiagonalMatrix:
        """``Y^T Y`` from residual norms, assuming orthogonal residuals.

        ``y_i^T y_i = |F_i|^2 + |F_{i-1}|^2`` and ``y_i^T y_{i+1} = -|F_i|^2``.
        """
        r2 = self.residual_norms**2
        return TridiagonalMatrix(r2[1:] + r2[:-1], -r2[1:-1])


def _ortho_against(v, Q, passes=2):
    for _ in range(passes):
        if Q.shape[1]:
            v = v - Q @ (Q.T @ v)
    return v


def cg_solve(
    B,
    b,
    x0=None,
    max_steps: Optional[int] = None,
    residual_tol: float = 1e-10,
    reorthogonalize: bool = False,
    check_operator: bool = True,
) -> CGTrace:
    """Hestenes-Stiefel conjugate gradients with exact line searches.

    Stops when ``|F_M| <= residual_tol * |F_0|`` or after
    ``min(max_steps, N)`` steps. With ``reorthogonalize=True`` every new
    residual is orthogonalized against all previous ones and every new
    direction made ``B``-conjugate to all previous steps (``O(NM)`` extra
    per step); the default path has none of this.

    Raises
    ------
    NotSPDError
        On non-positive curvature ``d^T B d <= 0``.
    """
    B = aslinearoperator(B, n=np.size(b))
    b = np.asarray(b, dtype=float).reshape(-1)
    n = b.size
    if B.n != n:
        raise ValueError(f"operator has dimension {B.n}, right-hand side {n}")
    if residual_tol <= 0:
        raise ValueError("residual_tol must be positive")
    if check_operator:
        B.check()
    x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(-1)
    steps = n if max_steps is None else min(int(max_steps), n)

    S = np.empty((n, steps))
    F = np.empty((n, steps + 1))
    Ys = np.empty((n, steps)) if reorthogonalize else None
    Fhat = np.empty((n, steps + 1)) if reorthogonalize else None
    alphas = np.empty(steps)
    curv = np.empty(steps)

    r = B.matvec(x0) - b
    F[:, 0] = r
    norm0 = np.linalg.norm(r)
    rr = r @ r
    d = -r
    m = 0
    converged = norm0 == 0
    if reorthogonalize and norm0 > 0:
        Fhat[:, 0] = r / norm0
    while m < steps and not converged:
        q = B.matvec(d)
        dq = d @ q
        if not dq > 0:
            raise NotSPDError(f"non-positive curvature d^T B d = {dq:.3e} at step {m + 1}")
        a = rr / dq
        s, y = a * d, a * q
        r_new = r + y
        if reorthogonalize:
            r_new = _ortho_against(r_new, Fhat[:, : m + 1])
        S[:, m] = s
        F[:, m + 1] = r_new
        alphas[m] = a
        curv[m] = s @ y
        m += 1
        rr_new = r_new @ r_new
        if np.sqrt(rr_new) <= residual_tol * norm0:
            converged = True
            break
        d = -r_new + (rr_new / rr) * d
        if reorthogonalize:
            Ys[:, m - 1] = y
            Fhat[:, m] = r_new / np.sqrt(rr_new)
            # B-conjugate d against previous steps using y_j = B s_j.
            for _ in range(2):
                d = d - S[:, :m] @ ((Ys[:, :m].T @ d) / curv[:m])
        r, rr = r_new, rr_new

    return CGTrace(
        S[:, :m].copy(),
        F[:, : m + 1].copy(),
        alphas[:m].copy(),
        curv[:m].copy(),
        x0,
        converged=bool(converged),
    )


def bfgs_directions(B, b, alpha=1.0, max_steps=None, x0=None, residual_tol=1e-10) -> CGTrace:
    """Quasi-Newton iteration with inverse BFGS updates and exact line searches.

    Starts from ``H_0 = alpha I`` and searches along ``-H_i F_i``; the
    inverse estimate is updated after every step with the inverse BFGS rule
    (Dennis direction ``c = s``). The dense ``N x N`` estimate is kept, so
    this is meant for equivalence checks against :func:`cg_solve`.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    B = aslinearoperator(B, n=np.size(b))
    b = np.asarray(b, dtype=float).reshape(-1)
    n = b.size
    x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(-1)
    steps = n if max_steps is None else min(int(max_steps), n)
    H = alpha * np.eye(n)
    F_cur = B.matvec(x0) - b
    norm0 = np.linalg.norm(F_cur)
    S, F, lengths, curv = [], [F_cur], [], []
    converged = norm0 == 0
    while len(S) < steps and not converged:
        d = -H @ F_cur
        q = B.matvec(d)
        dq = d @ q
        if not dq > 0:
            raise NotSPDError(f"non-positive curvature d^T B d = {dq:.3e}")
        t = -(d @ F_cur) / dq
        s, y = t * d, t * q
        F_cur = F_cur + y
        ys = y @ s
        # Inverse BFGS: H+ = (I - s y^T / ys) H (I - y s^T / ys) + s s^T / ys
        Hy = H @ y
        H = H - (np.outer(s, Hy) + np.outer(Hy, s)) / ys + (1.0 + (y @ Hy) / ys) * np.outer(s, s) / ys
        H = 0.5 * (H + H.T)
        S.append(s)
        F.append(F_cur)
        lengths.append(t)
        curv.append(ys)
        converged = np.linalg.norm(F_cur) <= residual_tol * norm0
    return CGTrace(
        np.array(S).T.reshape(n, len(S)),
        np.array(F).T,
        np.array(lengths),
        np.array(curv),
        x0,
        converged=bool(converged),
    )


@dataclass
class TraceReport:
    residual_orthogonality: float
    gram_offdiagonal: float
    gram_yy_deviation: float
    residual_step_orthogonality: float

    def worst(self) -> float:
        return max(
            self.residual_orthogonality,
            self.gram_offdiagonal,
            self.gram_yy_deviation,
            self.residual_step_orthogonality,
        )


def check_trace(trace: CGTrace, strict=False, live_tol=LIVE_TOL) -> TraceReport:
    """Measure the conjugate-gradient invariants of a trace.

    * residual orthogonality ``max_{i != j} |F_i^T F_j| / (|F_i| |F_j|)``;
    * off-diagonal of ``S^T Y`` relative to ``sqrt(s_i^T y_i s_j^T y_j)``;
    * ``Y^T Y`` against its tridiagonal norm formula, relative to ``|y_i| |y_j|``;
    * ``|F_i^T s_j| / (|F_i| |s_j|)`` for ``i >= j``.

    Residuals with ``|F_i| <= live_tol |F_0|`` (default 1e-10) are left
    out of the normalized measures: their direction is dominated by
    roundoff of order ``eps cond(B)``.

    Values above 1e-6 are logged as warnings; with ``strict=True`` values
    above 1e-3 raise ``AssertionError``.
    """
    F, S, Y = trace.F, trace.S, trace.Y
    fn = np.linalg.norm(F, axis=0)
    # Residuals at roundoff level carry no direction.
    live = fn > live_tol * fn[0]
    fn = np.where(live, fn, 1.0)
    C = (F.T @ F) / np.outer(fn, fn)
    np.fill_diagonal(C, 0.0)
    C[~live] = 0.0
    C[:, ~live] = 0.0
    orth = float(np.max(np.abs(C), initial=0.0))

    G = S.T @ Y
    dg = np.sqrt(np.abs(np.diag(G)))
    dg = np.where(dg > 0, dg, 1.0)
    Gn = G / np.outer(dg, dg)
    np.fill_diagonal(Gn, 0.0)
    gram = float(np.max(np.abs(Gn), initial=0.0))

    yn = np.linalg.norm(Y, axis=0)
    yn = np.where(yn > 0, yn, 1.0)
    YY = Y.T @ Y
    yy = float(np.max(np.abs(YY - trace.gram_yy().to_dense()) / np.outer(yn, yn), initial=0.0)) if trace.m else 0.0

    sn = np.linalg.norm(S, axis=0)
    sn = np.where(sn > 0, sn, 1.0)
    FS = (F[:, 1:].T @ S) / np.outer(fn[1:], sn)  # row i-1 is F_i, column j-1 is s_j
    FS[~live[1:]] = 0.0
    fs = float(np.max(np.abs(np.tril(FS)), initial=0.0))

    report = TraceReport(orth, gram, yy, fs)
    if report.worst() > WARN_TOL:
        logger.warning("CG invariants degraded: %s", report)
    if strict and report.worst() > FAIL_TOL:
        raise AssertionError(f"CG invariants violated: {report}")
    return report


@dataclass
class KrylovReport:
    angles: np.ndarray
    tol: float

    @property
    def max_angle(self) -> float:
        return float(np.max(self.angles, initial=0.0))

    @property
    def ok(self) -> bool:
        return self.max_angle <= self.tol


def krylov_span_check(trace: CGTrace, B, tol=1e-6) -> KrylovReport:
    """Compare ``span{F_0..F_k}``, ``span{s_1..s_{k+1}}`` and ``K_{k+1}(B, F_0)``.

    For every ``k < M`` the largest principal angle between each pair of
    subspaces is recorded; the Krylov basis is built by Arnoldi so its
    conditioning does not degrade with ``k``.
    """
    B = aslinearoperator(B, n=trace.n)
    m = trace.m
    angles = np.zeros(m)
    if m == 0:
        return KrylovReport(angles, tol)
    Q = np.empty((trace.n, m))
    v = trace.F[:, 0]
    for k in range(m):
        v = _ortho_against(v, Q[:, :k])
        Q[:, k] = v / np.linalg.norm(v)
        v = B.matvec(Q[:, k])
        Fk = trace.F[:, : k + 1]
        Sk = trace.S[:, : k + 1]
        Kk = Q[:, : k + 1]
        angles[k] = max(
            np.max(scipy.linalg.subspace_angles(Fk, Sk)),
            np.max(scipy.linalg.subspace_angles(Fk, Kk)),
            np.max(scipy.linalg.subspace_angles(Sk, Kk)),
        )
    return KrylovReport(angles, tol)
