"""Dennis-family rank-2 secant updates.

Every rule in the family has the form::

    B+ = B + (r c^T + c r^T) / (c^T s) - c (s^T r) c^T / (c^T s)**2,   r = y - B s

and differs only in the direction ``c``. Inverse updates estimate ``H``
from ``s = H y`` by exchanging ``s <-> y`` and ``B <-> H``.
"""
from __future__ import annotations

import enum
import logging
from typing import Callable, Iterator, Union

import numpy as np

from .gaussian import DIRECT, ObservationSet

__all__ = [
    "Rule",
    "SkippedUpdate",
    "dennis_update",
    "named_c",
    "dennis_sequence",
    "iterate_dennis",
    "inverse_rule",
    "SKIP_TOL",
]

logger = logging.getLogger(__name__)

#: Updates with ``|c^T s| < SKIP_TOL * |c| |s|`` are skipped.
SKIP_TOL = 1e-12


class Rule(enum.Enum):
    SR1 = "sr1"
    PSB = "psb"
    GREENSTADT = "greenstadt"
    DFP = "dfp"
    BFGS = "bfgs"


#: A custom rule maps ``(s, y, B_current)`` to the direction ``c``.
CustomC = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
RuleLike = Union[Rule, str, CustomC]


class SkippedUpdate(ArithmeticError):
    """The update denominator ``c^T s`` is numerically zero."""


def _as_rule(rule: RuleLike):
    if callable(rule) and not isinstance(rule, Rule):
        return rule
    return Rule(rule.value if isinstance(rule, Rule) else str(rule).lower())


def dennis_update(B, s, y, c) -> np.ndarray:
    """One symmetric rank-2 update of ``B`` satisfying ``B+ s = y``.

    Raises
    ------
    SkippedUpdate
        If ``|c^T s| < 1e-12 |c| |s|`` (this includes ``c = 0``).
    """
    B = np.asarray(B, dtype=float)
    s = np.asarray(s, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    c = np.asarray(c, dtype=float).reshape(-1)
    if not np.any(s):
        raise ValueError("s must be nonzero")
    cs = c @ s
    if abs(cs) < SKIP_TOL * np.linalg.norm(c) * np.linalg.norm(s) or not np.any(c):
        raise SkippedUpdate(f"|c^T s| = {abs(cs):.3e} is too small")
    r = y - B @ s
    rc = np.outer(r, c)
    out = B + (rc + rc.T) / cs - (s @ r) / cs**2 * np.outer(c, c)
    return 0.5 * (out + out.T)


def named_c(rule: RuleLike, s, y, B_current, B0=None) -> np.ndarray:
    """Direction ``c`` of a named Dennis rule.

    ``B0`` is only used by BFGS: by default (``B0=None``) the current
    estimate takes its place, which gives the usual iterated BFGS update.
    Passing ``B0`` pins the scaling term to a fixed matrix.
    """
    rule = _as_rule(rule)
    s = np.asarray(s, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    B = np.asarray(B_current, dtype=float)
    if callable(rule) and not isinstance(rule, Rule):
        return np.asarray(rule(s, y, B), dtype=float).reshape(-1)
    if rule is Rule.SR1:
        return y - B @ s
    if rule is Rule.PSB:
        return s.copy()
    if rule is Rule.GREENSTADT:
        return B @ s
    if rule is Rule.DFP:
        return y.copy()
    # BFGS
    Bref = B if B0 is None else np.asarray(B0, dtype=float)
    ys = y @ s
    Bs = Bref @ s
    sBs = s @ Bs
    if ys <= 0:
        raise ValueError(f"BFGS needs positive curvature, got y^T s = {ys:.6e}")
    if sBs <= 0:
        raise ValueError(f"BFGS needs s^T B0 s > 0, got {sBs:.6e}")
    return y + np.sqrt(ys / sBs) * Bs


def dennis_sequence(rule: RuleLike, B0, obs: ObservationSet, strict_b0=False) -> Iterator[tuple]:
    """Yield ``(B_i, skipped)`` after each column ``(s_i, y_i)`` of ``obs``."""
    B = np.array(B0, dtype=float)
    B0 = B.copy()
    for i in range(obs.m):
        s, y = obs.S[:, i], obs.Y[:, i]
        try:
            c = named_c(rule, s, y, B, B0 if strict_b0 else None)
            B = dennis_update(B, s, y, c)
            skipped = False
        except SkippedUpdate as exc:
            logger.warning("step %d skipped: %s", i + 1, exc)
            skipped = True
        yield B, skipped


def iterate_dennis(rule: RuleLike, B0, obs: ObservationSet, strict_b0=False) -> np.ndarray:
    """Apply the rule sequentially over the columns of ``obs`` and return ``B_M``."""
    if obs.mode != DIRECT:
        raise ValueError("iterate_dennis expects direct-mode observations; see inverse_rule")
    B = np.array(B0, dtype=float)
    for B, _ in dennis_sequence(rule, B0, obs, strict_b0):
        pass
    return B


# Under s <-> y the DFP and BFGS formulas trade places: the inverse BFGS
# update uses c = s, the inverse DFP update uses the swapped BFGS direction.
_INVERSE_FORMULA = {
    Rule.SR1: Rule.SR1,
    Rule.PSB: Rule.PSB,
    Rule.GREENSTADT: Rule.GREENSTADT,
    Rule.BFGS: Rule.DFP,
    Rule.DFP: Rule.BFGS,
}


def inverse_rule(rule: RuleLike, H0, obs: ObservationSet, strict_h0=False) -> np.ndarray:
    """Iterated inverse update estimating ``H`` from ``s_i = H y_i``.

    Named rules are meant in the inverse sense: ``Rule.BFGS`` is the
    inverse BFGS update (``c = s`` after the swap), which equals the
    matrix inverse of the direct BFGS update. Formula-wise it is the DFP
    update with ``s`` and ``y`` exchanged. A custom callable receives
    ``(y, s, H_current)`` and returns ``c``.
    """
    rule = _as_rule(rule)
    if isinstance(rule, Rule):
        rule = _INVERSE_FORMULA[rule]
    # Direct machinery with (s, y) := (y, s) and B := H.
    as_direct = ObservationSet(obs.Y, obs.S, DIRECT)
    return iterate_dennis(rule, H0, as_direct, strict_b0=strict_h0)
