"""Plain-text formats for matrices, vectors and posterior models.

All numbers are written with ``repr`` so that reading a file back gives the
identical floats. Blank lines and lines starting with ``#`` are ignored.

Matrix (dense)::

    matrix <rows> <cols>
    <cols values>            # one line per row

Matrix (coordinate, 1-based indices, unlisted entries are zero)::

    matrix <rows> <cols> coordinate
    <i> <j> <value>          # one line per entry

Vector::

    vector <n>
    <value>                  # one value per line

Posterior model::

    problinsolve-model 1
    kind <bfgs_cg|standardized>
    alpha <value>
    omega2 <value>
    n <N>
    m <M>
    converged <0|1>
    x0 <N values>
    step_lengths <M values>
    curvatures <M values>
    residual_norms <M + 1 values>
    S                        # followed by M lines of N values (the steps s_i)
    F                        # followed by M + 1 lines of N values (the residuals F_i)

The mean and covariance factor are rebuilt from the stored trace, which
reproduces them bit for bit.
"""
from __future__ import annotations

from typing import Iterator, List, Tuple

import numpy as np

from .cg import CGTrace
from .posterior import BFGS_CG, STANDARDIZED, PosteriorModel, bfgs_cg_posterior, standardized_norm_posterior

__all__ = [
    "ParseError",
    "format_float",
    "write_matrix",
    "read_matrix",
    "write_vector",
    "read_vector",
    "save_model",
    "load_model",
    "MODEL_MAGIC",
]

MODEL_MAGIC = "problinsolve-model"
MODEL_VERSION = 1


class ParseError(ValueError):
    """A malformed input file; ``lineno`` is 1-based (0 for end of file)."""

    def __init__(self, lineno: int, message: str, path=None):
        self.lineno = lineno
        self.path = path
        where = "end of file" if lineno == 0 else f"line {lineno}"
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{where}: {message}")


def format_float(x) -> str:
    return repr(float(x))


def _join(values) -> str:
    return " ".join(format_float(v) for v in np.ravel(values))


class _Lines:
    """Iterator over meaningful lines, keeping line numbers."""

    def __init__(self, text: str, path=None):
        self.path = path
        self._items: List[Tuple[int, str]] = []
        for k, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                self._items.append((k, line))
        self._pos = 0

    def next(self, what: str) -> Tuple[int, str]:
        if self._pos >= len(self._items):
            raise ParseError(0, f"expected {what}", self.path)
        item = self._items[self._pos]
        self._pos += 1
        return item

    def expect_end(self):
        if self._pos < len(self._items):
            k, _ = self._items[self._pos]
            raise ParseError(k, "unexpected trailing content", self.path)

    def error(self, lineno, message):
        return ParseError(lineno, message, self.path)


def _floats(lines: _Lines, lineno: int, tokens, count=None) -> np.ndarray:
    if count is not None and len(tokens) != count:
        raise lines.error(lineno, f"expected {count} values, got {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens], dtype=float)
    except ValueError as exc:
        raise lines.error(lineno, str(exc)) from None
    if not np.all(np.isfinite(vals)):
        raise lines.error(lineno, "non-finite value")
    return vals


def _int(lines: _Lines, lineno: int, token: str, what: str, minimum=0) -> int:
    try:
        val = int(token)
    except ValueError:
        raise lines.error(lineno, f"{what} must be an integer, got {token!r}") from None
    if val < minimum:
        raise lines.error(lineno, f"{what} must be at least {minimum}, got {val}")
    return val


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def write_matrix(path, A) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"matrix {A.shape[0]} {A.shape[1]}\n")
        for row in A:
            fh.write(_join(row) + "\n")


def parse_matrix(text: str, path=None) -> np.ndarray:
    lines = _Lines(text, path)
    k, header = lines.next("matrix header")
    tok = header.split()
    if len(tok) not in (3, 4) or tok[0] != "matrix" or (len(tok) == 4 and tok[3] != "coordinate"):
        raise lines.error(k, "expected 'matrix <rows> <cols> [coordinate]'")
    rows = _int(lines, k, tok[1], "rows", 1)
    cols = _int(lines, k, tok[2], "cols", 1)
    A = np.zeros((rows, cols))
    if len(tok) == 3:
        for r in range(rows):
            k, line = lines.next(f"row {r + 1} of {rows}")
            A[r] = _floats(lines, k, line.split(), cols)
    else:
        while True:
            try:
                k, line = lines.next("entry")
            except ParseError:
                break
            t = line.split()
            if len(t) != 3:
                raise lines.error(k, "expected '<i> <j> <value>'")
            i = _int(lines, k, t[0], "row index", 1)
            j = _int(lines, k, t[1], "column index", 1)
            if i > rows or j > cols:
                raise lines.error(k, f"index ({i}, {j}) outside a {rows}x{cols} matrix")
            A[i - 1, j - 1] = _floats(lines, k, t[2:], 1)[0]
    lines.expect_end()
    return A


def read_matrix(path) -> np.ndarray:
    return parse_matrix(_read_text(path), path)


def write_vector(path, v) -> None:
    v = np.asarray(v, dtype=float).reshape(-1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"vector {v.size}\n")
        for x in v:
            fh.write(format_float(x) + "\n")


def parse_vector(text: str, path=None) -> np.ndarray:
    lines = _Lines(text, path)
    k, header = lines.next("vector header")
    tok = header.split()
    if len(tok) != 2 or tok[0] != "vector":
        raise lines.error(k, "expected 'vector <n>'")
    n = _int(lines, k, tok[1], "length", 1)
    v = np.empty(n)
    for i in range(n):
        k, line = lines.next(f"value {i + 1} of {n}")
        v[i] = _floats(lines, k, line.split(), 1)[0]
    lines.expect_end()
    return v


def read_vector(path) -> np.ndarray:
    return parse_vector(_read_text(path), path)


def save_model(path, model: PosteriorModel) -> None:
    tr = model.trace
    out = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"kind {model.kind}",
        f"alpha {format_float(model.alpha)}",
        f"omega2 {format_float(model.omega2)}",
        f"n {tr.n}",
        f"m {tr.m}",
        f"converged {int(tr.converged)}",
        f"x0 {_join(tr.x0)}",
        f"step_lengths {_join(tr.step_lengths)}".rstrip(),
        f"curvatures {_join(tr.curvatures)}".rstrip(),
        f"residual_norms {_join(tr.residual_norms)}",
        "S",
    ]
    out += [_join(col) for col in tr.S.T]
    out.append("F")
    out += [_join(col) for col in tr.F.T]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def _keyed(lines: _Lines, key: str) -> Tuple[int, List[str]]:
    k, line = lines.next(f"'{key}'")
    tok = line.split()
    if tok[0] != key:
        raise lines.error(k, f"expected '{key}', got {tok[0]!r}")
    return k, tok[1:]


def parse_model(text: str, path=None) -> PosteriorModel:
    lines = _Lines(text, path)
    k, tok = _keyed(lines, MODEL_MAGIC)
    if tok != [str(MODEL_VERSION)]:
        raise lines.error(k, f"unsupported model version {' '.join(tok)!r}")
    k, tok = _keyed(lines, "kind")
    if tok not in ([BFGS_CG], [STANDARDIZED]):
        raise lines.error(k, f"unknown model kind {' '.join(tok)!r}")
    kind = tok[0]
    k, tok = _keyed(lines, "alpha")
    alpha = _floats(lines, k, tok, 1)[0]
    k, tok = _keyed(lines, "omega2")
    omega2 = _floats(lines, k, tok, 1)[0]
    k, tok = _keyed(lines, "n")
    n = _int(lines, k, tok[0] if len(tok) == 1 else "", "n", 1)
    k, tok = _keyed(lines, "m")
    m = _int(lines, k, tok[0] if len(tok) == 1 else "", "m", 0)
    k, tok = _keyed(lines, "converged")
    if tok not in (["0"], ["1"]):
        raise lines.error(k, "converged must be 0 or 1")
    converged = tok == ["1"]
    k, tok = _keyed(lines, "x0")
    x0 = _floats(lines, k, tok, n)
    k, tok = _keyed(lines, "step_lengths")
    lengths = _floats(lines, k, tok, m)
    k, tok = _keyed(lines, "curvatures")
    curv = _floats(lines, k, tok, m)
    k, tok = _keyed(lines, "residual_norms")
    norms = _floats(lines, k, tok, m + 1)
    _keyed(lines, "S")
    S = np.empty((n, m))
    for i in range(m):
        k, line = lines.next(f"step {i + 1} of {m}")
        S[:, i] = _floats(lines, k, line.split(), n)
    _keyed(lines, "F")
    F = np.empty((n, m + 1))
    for i in range(m + 1):
        k, line = lines.next(f"residual {i} of {m}")
        F[:, i] = _floats(lines, k, line.split(), n)
    lines.expect_end()
    trace = CGTrace(S, F, lengths, curv, x0, converged=converged, residual_norms=norms)
    if kind == BFGS_CG:
        return bfgs_cg_posterior(trace, omega2, alpha=alpha)
    return standardized_norm_posterior(trace, alpha, omega2)


def load_model(path) -> PosteriorModel:
    return parse_model(_read_text(path), path)
