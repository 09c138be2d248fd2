"""Seeded random SPD test problems.

Random streams come from :func:`stream`, a Philox generator keyed by
``(seed, trial, purpose)`` so that each trial and each use within a trial
draws from an independent, platform-stable sequence.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "stream",
    "UniformEig",
    "ExponentialEig",
    "StructuredEig",
    "SpectrumSpec",
    "parse_spectrum",
    "draw_eigenvalues",
    "haar_rotation",
    "random_spd",
    "random_projections",
]

logger = logging.getLogger(__name__)

#: Eigenvalues below this are re-drawn.
MIN_EIGENVALUE = 1e-12


def stream(seed: int, trial: int = 0, purpose: str = "default") -> np.random.Generator:
    """Independent generator for one ``(seed, trial, purpose)`` triple."""
    code = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed), int(trial), code])
    return np.random.Generator(np.random.Philox(ss))


def _rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return stream(int(rng_or_seed), 0, "rotation")


@dataclass(frozen=True)
class UniformEig:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi or self.hi <= 0:
            raise ValueError(f"need 0 <= lo <= hi and hi > 0, got ({self.lo}, {self.hi})")

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size)

    def to_text(self):
        return f"uniform:{self.lo!r}:{self.hi!r}"


@dataclass(frozen=True)
class ExponentialEig:
    """Exponential law with density ``exp(-d / scale) / scale``."""

    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def sample(self, rng, size):
        return rng.exponential(self.scale, size)

    def to_text(self):
        return f"exponential:{self.scale!r}"


@dataclass(frozen=True)
class StructuredEig:
    """``head_count`` eigenvalues from ``U(head_range)``, the rest from ``U(tail_range)``."""

    head_count: int = 20
    head_range: tuple = (0.0, 1e3)
    tail_range: tuple = (0.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "head_range", tuple(float(v) for v in self.head_range))
        object.__setattr__(self, "tail_range", tuple(float(v) for v in self.tail_range))
        UniformEig(*self.head_range)
        UniformEig(*self.tail_range)
        if self.head_count < 0:
            raise ValueError("head_count must be nonnegative")

    def sample(self, rng, size):
        k = min(self.head_count, size)
        head = rng.uniform(*self.head_range, k)
        tail = rng.uniform(*self.tail_range, size - k)
        return np.concatenate([head, tail])

    def to_text(self):
        (a, b), (c, d) = self.head_range, self.tail_range
        return f"structured:{self.head_count}:{a!r}:{b!r}:{c!r}:{d!r}"


Law = Union[UniformEig, ExponentialEig, StructuredEig]


def parse_spectrum(text: str) -> Law:
    """Parse ``uniform:lo:hi``, ``exponential:scale`` or ``structured:L:a:b:c:d``.

    ``exponential:median=10`` gives the scale whose median is 10.
    """
    parts = str(text).strip().lower().split(":")
    try:
        if parts[0] == "uniform" and len(parts) == 3:
            return UniformEig(float(parts[1]), float(parts[2]))
        if parts[0] == "exponential" and len(parts) == 2:
            if parts[1].startswith("median="):
                return ExponentialEig(float(parts[1][7:]) / np.log(2.0))
            return ExponentialEig(float(parts[1]))
        if parts[0] == "structured" and len(parts) in (1, 2, 6):
            if len(parts) == 1:
                return StructuredEig()
            if len(parts) == 2:
                return StructuredEig(int(parts[1]))
            vals = [float(p) for p in parts[2:]]
            return StructuredEig(int(parts[1]), tuple(vals[:2]), tuple(vals[2:]))
    except (ValueError, TypeError) as exc:
        raise ValueError(f"bad spectrum {text!r}: {exc}") from None
    raise ValueError(f"unknown spectrum {text!r}")


@dataclass(frozen=True)
class SpectrumSpec:
    """Eigenvalue law, dimension and seed of a random SPD problem."""

    law: Law
    n: int
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.law, str):
            object.__setattr__(self, "law", parse_spectrum(self.law))
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if isinstance(self.law, StructuredEig) and self.law.head_count > self.n:
            raise ValueError(f"head_count {self.law.head_count} exceeds N={self.n}")


def draw_eigenvalues(law: Law, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` eigenvalues, re-drawing any below ``1e-12``."""
    d = np.asarray(law.sample(rng, n), dtype=float)
    for _ in range(100):
        bad = d < MIN_EIGENVALUE
        if not np.any(bad):
            return d
        logger.info("re-drawing %d eigenvalues below %g", int(bad.sum()), MIN_EIGENVALUE)
        # Re-draw from the same law (and the same head/tail block).
        d[bad] = np.asarray(law.sample(rng, n), dtype=float)[bad]
    raise RuntimeError("could not draw eigenvalues above the positivity threshold")


def haar_rotation(n: int, rng_or_seed=0) -> np.ndarray:
    """Haar-distributed rotation in ``SO(n)`` via the subgroup algorithm.

    Starting from ``SO(1) = {1}``, each stage embeds the current rotation
    as ``diag(1, Q)`` and multiplies by the reflection that maps ``e_1`` to
    a uniform point on the sphere. A column sign flip in the embedded block
    keeps the determinant at ``+1``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(rng_or_seed)
    Q = np.ones((1, 1))
    for k in range(2, n + 1):
        v = rng.standard_normal(k)
        v /= np.linalg.norm(v)
        # Reflection R = I - 2 u u^T with R e_1 = v.
        u = v.copy()
        u[0] -= 1.0
        nu = np.linalg.norm(u)
        E = np.zeros((k, k))
        E[0, 0] = 1.0
        E[1:, 1:] = Q
        # Reflections have det -1; flip one column of the embedded block.
        E[1:, -1] *= -1.0
        if nu < 1e-12:
            # v == e_1: use the reflection in e_2 instead, which fixes e_1.
            E[1, :] *= -1.0
            Q = E
        else:
            u /= nu
            Q = E - 2.0 * np.outer(u, u @ E)
    return Q


def random_spd(spec: SpectrumSpec, trial: int = 0):
    """Return ``(B, H, eigenvalues)`` with ``B = Q diag(d) Q^T`` and ``H = B^-1``."""
    d = draw_eigenvalues(spec.law, spec.n, stream(spec.seed, trial, "eigenvalues"))
    Q = haar_rotation(spec.n, stream(spec.seed, trial, "rotation"))
    B = (Q * d) @ Q.T
    H = (Q / d) @ Q.T
    return 0.5 * (B + B.T), 0.5 * (H + H.T), d


def random_projections(n: int, m: int, rng_or_seed=0) -> np.ndarray:
    """``N x M`` matrix of iid standard normal entries with full column rank."""
    if m > n:
        raise ValueError(f"need M <= N, got M={m}, N={n}")
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else stream(int(rng_or_seed), 0, "projections")
    for _ in range(10):
        S = rng.standard_normal((n, m))
        if m == 0 or np.linalg.matrix_rank(S) == m:
            return S
        logger.info("re-drawing rank deficient projection matrix")
    raise RuntimeError("could not draw a full rank projection matrix")
