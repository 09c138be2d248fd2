"""Experiment drivers: secant rules vs. exact posteriors, and CG uncertainty.

``run_fig1`` compares iterated secant updates with exact posterior means on
random projections of a random SPD matrix. ``run_fig2to5`` runs CG on
random SPD problems and records residuals, the omega series, and the
error estimates of both posterior models on ``H`` elements, on
``|H - H_M|_F`` and on the solution of a second linear system.

Outputs are long-format CSV files. Each file starts with one comment line
``# config_hash=<hex> seed=<int> experiment=<name>`` followed by a header
row. Floats are written with ``repr`` so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .cg import cg_solve
from .gaussian import MatrixGaussian, ObservationSet, posterior_symmetric
from .posterior import (
    BFGS_CG,
    STANDARDIZED,
    LinearTrend,
    Stationary,
    Structured,
    bfgs_cg_posterior,
    estimate_alpha,
    estimate_omega,
    expected_frobenius_error,
    omega_series,
    parse_rule,
    standardized_norm_posterior,
)
from .problems import (
    ExponentialEig,
    SpectrumSpec,
    StructuredEig,
    UniformEig,
    parse_spectrum,
    random_projections,
    random_spd,
    stream,
)
from .secant import Rule, dennis_sequence

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "EXPERIMENTS",
    "run_fig1",
    "run_fig2to5",
    "matched_rule",
    "omega_at_step",
    "write_csv",
    "FIG1_COLUMNS",
    "FIG2TO5_FILES",
]

logger = logging.getLogger(__name__)

EXPERIMENTS = ("fig1", "fig2to5", "solve", "predict")
PRIORS = (BFGS_CG, STANDARDIZED)
OMEGA_MODES = ("retrospective", "predictive", "geometric")

_DEFAULTS = {
    "fig1": {"n": 100, "trials": 10, "spectra": ["exponential:10", "exponential:1000"]},
    "fig2to5": {
        "n": 200,
        "trials": 20,
        "spectra": ["uniform:0:10", "exponential:median=10", "structured:20:0:1000:0:10"],
    },
    "solve": {"n": None, "trials": 1, "spectra": []},
    "predict": {"n": None, "trials": 1, "spectra": []},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration.

    ``None`` for ``n``, ``trials`` or ``spectra`` selects the experiment's
    default. ``estimator`` is an omega rule (``stationary``, ``linear``,
    ``structured:L:mult``) or ``matched``, which picks the rule that fits
    each spectrum family.
    """

    experiment: str = "fig1"
    n: Optional[int] = None
    trials: Optional[int] = None
    spectra: Optional[tuple] = None
    estimator: str = "matched"
    prior: str = STANDARDIZED
    seed: int = 0
    out: str = "out"
    jobs: int = 1
    reorthogonalize: Optional[bool] = None
    omega_mode: str = "retrospective"
    safety: float = 0.9
    elements: int = 40
    xtest_elements: int = 20
    xtest_variance: float = 10.0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        defaults = _DEFAULTS[self.experiment]
        n = defaults["n"] if self.n is None else self.n
        trials = defaults["trials"] if self.trials is None else self.trials
        spectra = defaults["spectra"] if self.spectra is None else self.spectra
        if isinstance(spectra, str):
            spectra = [spectra]
        if self.reorthogonalize is None:
            # Experiments reorthogonalize; a plain solve keeps the O(MN) cost.
            object.__setattr__(self, "reorthogonalize", self.experiment in ("fig1", "fig2to5"))
        object.__setattr__(self, "n", None if n is None else _posint(n, "n"))
        object.__setattr__(self, "trials", _posint(trials, "trials"))
        object.__setattr__(self, "spectra", tuple(str(s) for s in spectra))
        object.__setattr__(self, "seed", _nonneg_int(self.seed, "seed"))
        object.__setattr__(self, "jobs", _posint(self.jobs, "jobs"))
        object.__setattr__(self, "elements", _nonneg_int(self.elements, "elements"))
        object.__setattr__(self, "xtest_elements", _nonneg_int(self.xtest_elements, "xtest_elements"))
        for s in self.spectra:
            try:
                law = parse_spectrum(s)
                if self.n is not None:
                    SpectrumSpec(law, self.n)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.estimator != "matched":
            try:
                parse_rule(self.estimator, self.n or 1)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.prior not in PRIORS:
            raise ConfigError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.omega_mode not in OMEGA_MODES:
            raise ConfigError(f"omega_mode must be one of {OMEGA_MODES}")
        if not isinstance(self.reorthogonalize, bool):
            raise ConfigError("reorthogonalize must be a boolean")
        if not 0 < float(self.safety) < 1:
            raise ConfigError("safety must lie in (0, 1)")
        if not float(self.xtest_variance) > 0:
            raise ConfigError("xtest_variance must be positive")
        if self.experiment in ("fig1", "fig2to5"):
            if not self.spectra:
                raise ConfigError("at least one spectrum is required")
            if self.n < 2:
                raise ConfigError("n must be at least 2")
        if self.experiment == "fig2to5":
            if self.elements > self.n * self.n:
                raise ConfigError(f"{self.elements} elements requested from an {self.n}x{self.n} matrix")
            if self.xtest_elements > self.n:
                raise ConfigError(f"{self.xtest_elements} x_test elements requested with N={self.n}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spectra"] = list(self.spectra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def hash(self) -> str:
        d = self.to_dict()
        # Output location and parallelism do not change the numbers.
        d.pop("out")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _posint(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
        raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    return int(v)


def _nonneg_int(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
        raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")
    return int(v)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, config: ExperimentConfig) -> None:
    """Write a comment line, a header and the rows in order."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config.hash()} seed={config.seed} experiment={config.experiment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _map(fn, jobs, args):
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, args))
    return [fn(a) for a in args]


def _trial_key(spectrum_index: int, trial: int) -> int:
    # Distinct streams for the same trial number under different spectra.
    return spectrum_index * 1_000_003 + trial


# ---------------------------------------------------------------------------
# Figure 1: secant rules vs. exact posteriors

FIG1_COLUMNS = ["spectrum", "trial", "step", "estimator", "quantity", "value"]
FIG1_ESTIMATORS = ("psb", "dfp", "bfgs", "posterior_w_identity", "posterior_w_truth")


def _fig1_trial(args):
    config, si, spectrum, trial = args
    n = config.n
    key = _trial_key(si, trial)
    B, _, _ = random_spd(SpectrumSpec(parse_spectrum(spectrum), n, config.seed), key)
    S = random_projections(n, n, stream(config.seed, key, "projections"))
    obs = ObservationSet(S, B @ S)
    B0 = np.eye(n)
    scale = np.linalg.norm(B0 - B)
    rows = []
    seqs = {
        "psb": dennis_sequence(Rule.PSB, B0, obs),
        "dfp": dennis_sequence(Rule.DFP, B0, obs),
        "bfgs": dennis_sequence(Rule.BFGS, B0, obs),
    }
    priors = {
        "posterior_w_identity": MatrixGaussian.prior(B0, np.eye(n)),
        "posterior_w_truth": MatrixGaussian.prior(B0, B),
    }
    for m in range(1, n + 1):
        for name in ("psb", "dfp", "bfgs"):
            Bm, skipped = next(seqs[name])
            rows.append((spectrum, trial, m, name, "error", np.linalg.norm(Bm - B) / scale))
            if skipped:
                rows.append((spectrum, trial, m, name, "skipped", 1.0))
        sub = ObservationSet(S[:, :m], obs.Y[:, :m])
        for name, prior in priors.items():
            post = posterior_symmetric(prior, sub)
            rows.append((spectrum, trial, m, name, "error", np.linalg.norm(post.mean - B) / scale))
            rows.append(
                (spectrum, trial, m, name, "uncertainty", expected_frobenius_error(post.cov_factor) / scale)
            )
    return rows


def run_fig1(config: ExperimentConfig, write=True) -> Dict[str, List[tuple]]:
    """Normalized errors ``|B_M - B|_F / |B_0 - B|_F`` for ``M = 1 .. N``.

    Returns ``{"fig1.csv": rows}``; rows follow :data:`FIG1_COLUMNS`. The
    ``uncertainty`` rows are the posterior expected Frobenius error on the
    same normalized scale.
    """
    if config.experiment != "fig1":
        raise ConfigError("run_fig1 needs experiment='fig1'")
    args = [(config, si, sp, t) for si, sp in enumerate(config.spectra) for t in range(config.trials)]
    rows = [r for chunk in _map(_fig1_trial, config.jobs, args) for r in chunk]
    out = {"fig1.csv": rows}
    if write:
        os.makedirs(config.out, exist_ok=True)
        write_csv(os.path.join(config.out, "fig1.csv"), FIG1_COLUMNS, rows, config)
    return out


# ---------------------------------------------------------------------------
# Figures 2 to 5: uncertainty during CG

FIG2TO5_FILES = {
    # projection is s_m^T F_{m-1}; there is no step at m = 0 (written as nan).
    "fig2_residuals.csv": ["spectrum", "trial", "step", "residual_norm", "projection"],
    "fig2_omega.csv": ["spectrum", "trial", "step", "omega2", "omega2_raw"],
    "fig3_elements.csv": [
        "spectrum", "trial", "step", "prior", "row", "col", "error", "sd_stationary", "sd_matched",
    ],
    "fig4_norm.csv": ["spectrum", "trial", "step", "prior", "true_error", "est_stationary", "est_matched"],
    "fig5_xtest.csv": ["spectrum", "trial", "step", "prior", "element", "error", "sd_stationary", "sd_matched"],
}


def matched_rule(spectrum: str, n: int):
    """Omega rule suited to a spectrum family.

    Uniform spectra use the stationary rule, exponential spectra the linear
    trend evaluated at ``N``, structured spectra the stationary rule boosted
    by the ratio of the head and tail eigenvalue ranges over the first
    ``head_count`` steps.
    """
    law = parse_spectrum(spectrum)
    if isinstance(law, UniformEig):
        return Stationary()
    if isinstance(law, ExponentialEig):
        return LinearTrend(n)
    if isinstance(law, StructuredEig):
        ratio = law.head_range[1] / law.tail_range[1]
        return Structured(law.head_count, float(ratio))
    raise ValueError(f"no matched rule for {spectrum!r}")


def omega_at_step(series, rule, step):
    """Estimate from the series values known at ``step`` (``omega_1 .. omega_{step-1}``)."""
    values = series.values[: max(step - 1, 0)]
    if values.size == 0:
        return None
    if isinstance(rule, LinearTrend) and values.size < 2:
        rule = Stationary()
    return estimate_omega(values, rule, step=step)


def _fig2to5_trial(args):
    config, si, spectrum, trial = args
    n = config.n
    key = _trial_key(si, trial)
    B, H, _ = random_spd(SpectrumSpec(parse_spectrum(spectrum), n, config.seed), key)
    b = stream(config.seed, key, "rhs").standard_normal(n)
    x_test = np.sqrt(config.xtest_variance) * stream(config.seed, key, "xtest").standard_normal(n)
    b_test = B @ x_test
    erng = stream(config.seed, key, "elements")
    flat = erng.choice(n * n, size=min(config.elements, n * n), replace=False)
    er, ec = np.divmod(flat, n)
    xel = np.sort(stream(config.seed, key, "xtest-elements").choice(n, size=min(config.xtest_elements, n), replace=False))

    trace = cg_solve(B, b, reorthogonalize=config.reorthogonalize)
    predictive = config.omega_mode != "retrospective"
    series = omega_series(trace, predictive=predictive, geometric=config.omega_mode == "geometric")
    rule = parse_rule(config.estimator, n) if config.estimator != "matched" else matched_rule(spectrum, n)
    base = Stationary()

    out = {name: [] for name in FIG2TO5_FILES}
    proj = np.concatenate([[np.nan], np.einsum("ij,ij->j", trace.S, trace.F[:, :-1])])
    for m, (r, p) in enumerate(zip(trace.residual_norms, proj)):
        out["fig2_residuals.csv"].append((spectrum, trial, m, r, p))
    for m, (v, raw) in enumerate(zip(series.values, series.raw), start=1):
        out["fig2_omega.csv"].append((spectrum, trial, m, v, raw))

    xstats = {p: [] for p in PRIORS}
    for m in range(2, trace.m + 1):
        w_base = omega_at_step(series, base, m)
        w_rule = omega_at_step(series, rule, m)
        if w_base is None:
            continue
        tm = trace.truncated(m)
        alpha = estimate_alpha(tm, config.safety)
        # CG corresponds to BFGS with prior mean I; only the standardized
        # model needs alpha below lambda_min(H), and omega2 >= alpha keeps
        # its complement variance nonnegative.
        floor = {BFGS_CG: 0.0, STANDARDIZED: alpha}
        models = {
            BFGS_CG: bfgs_cg_posterior(tm, w_base, alpha=1.0),
            STANDARDIZED: standardized_norm_posterior(tm, alpha, max(w_base, alpha)),
        }
        for prior, model in models.items():
            other = model.with_omega2(max(w_rule, floor[prior]))
            Hm = model.mean_dense()
            W1, W2 = model.cov_dense(), other.cov_dense()
            # H elements
            err = H[er, ec] - Hm[er, ec]
            sds = [np.sqrt(np.maximum(0.5 * (W[er, er] * W[ec, ec] + W[er, ec] ** 2), 0.0)) for W in (W1, W2)]
            for k in range(er.size):
                out["fig3_elements.csv"].append(
                    (spectrum, trial, m, prior, int(er[k]), int(ec[k]), err[k], sds[0][k], sds[1][k])
                )
            # Frobenius norm
            out["fig4_norm.csv"].append(
                (
                    spectrum, trial, m, prior, np.linalg.norm(H - Hm),
                    expected_frobenius_error(W1), expected_frobenius_error(W2),
                )
            )
            # second linear system
            xerr = x_test - Hm @ b_test
            xsd = []
            for W in (W1, W2):
                Wb = W @ b_test
                xsd.append(np.sqrt(np.maximum(0.5 * (np.diag(W) * (b_test @ Wb) + Wb**2), 0.0)))
            for k in xel:
                out["fig5_xtest.csv"].append(
                    (spectrum, trial, m, prior, int(k), xerr[k], xsd[0][k], xsd[1][k])
                )
            xstats[prior].append((np.abs(xerr), xsd[0], xsd[1]))
    summary = {}
    for prior, items in xstats.items():
        if items:
            e = np.concatenate([i[0] for i in items])
            summary[prior] = {
                "xtest_abs_error": e,
                "xtest_sd_stationary": np.concatenate([i[1] for i in items]),
                "xtest_sd_matched": np.concatenate([i[2] for i in items]),
            }
    return out, summary


def run_fig2to5(config: ExperimentConfig, write=True):
    """Run CG on random problems and score both posterior models.

    Returns ``(tables, xtest)``: ``tables`` maps each file name in
    :data:`FIG2TO5_FILES` to its rows; ``xtest`` maps ``(spectrum, trial)``
    to the error and sd arrays over all elements of ``x_test`` (the CSV
    keeps only ``xtest_elements`` of them).
    """
    if config.experiment != "fig2to5":
        raise ConfigError("run_fig2to5 needs experiment='fig2to5'")
    args = [(config, si, sp, t) for si, sp in enumerate(config.spectra) for t in range(config.trials)]
    results = _map(_fig2to5_trial, config.jobs, args)
    tables = {name: [] for name in FIG2TO5_FILES}
    xtest = {}
    for (_, _, sp, t), (out, summary) in zip(args, results):
        for name in tables:
            tables[name].extend(out[name])
        xtest[(sp, t)] = summary
    if write:
        os.makedirs(config.out, exist_ok=True)
        for name, cols in FIG2TO5_FILES.items():
            write_csv(os.path.join(config.out, name), cols, tables[name], config)
    return tables, xtest
