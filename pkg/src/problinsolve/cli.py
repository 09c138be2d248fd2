"""Command-line front end.

Examples
--------
Run the secant-rule comparison at a small scale::

    problinsolve --experiment fig1 --n 30 --trials 2 --out results

Solve a system and keep the posterior for later predictions::

    problinsolve --experiment solve --matrix B.txt --rhs b.txt --model model.txt
    problinsolve --experiment predict --model model.txt --b-test b2.txt

A JSON ``--config`` file takes precedence over the flags. Exit codes are 0
on success, 1 for invalid input and 2 for numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict

import numpy as np

from .cg import cg_solve
from .experiments import (
    ConfigError,
    ExperimentConfig,
    EXPERIMENTS,
    omega_at_step,
    run_fig1,
    run_fig2to5,
)
from .linalg import NotSPDError, as_spd
from .posterior import (
    BFGS_CG,
    Stationary,
    bfgs_cg_posterior,
    curvature_bound,
    estimate_alpha,
    expected_frobenius_error,
    omega_series,
    parse_rule,
    predict_solution,
    standardized_norm_posterior,
)
from .textio import ParseError, format_float, load_model, read_matrix, read_vector, save_model

__all__ = ["main", "build_parser", "run_solve", "run_predict"]

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

#: Config keys naming input and output files rather than experiment settings.
PATH_KEYS = ("matrix", "rhs", "model", "b_test")


class InputError(ValueError):
    """Inputs that are individually valid but do not fit together."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="problinsolve",
        description="Probabilistic linear solvers: experiments, solve and predict.",
    )
    p.add_argument("--experiment", choices=EXPERIMENTS, default="fig1")
    p.add_argument("--n", type=int, help="problem size (experiment default if omitted)")
    p.add_argument("--trials", type=int, help="number of random problems per spectrum")
    p.add_argument(
        "--spectrum",
        action="append",
        dest="spectra",
        metavar="SPEC",
        help="eigenvalue law, e.g. uniform:0:10, exponential:median=10, "
        "structured:20:0:1000:0:10; repeat for several",
    )
    p.add_argument(
        "--estimator",
        default="matched",
        help="omega rule: stationary, linear[:N], structured:L:mult, or matched",
    )
    p.add_argument("--prior", choices=(BFGS_CG, "standardized"), default="standardized")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory for CSV files")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    p.add_argument("--config", help="JSON file; its keys override the flags")
    p.add_argument("--matrix", help="SPD matrix file (solve)")
    p.add_argument("--rhs", help="right-hand side vector file (solve)")
    p.add_argument("--model", help="posterior model file (written by solve, read by predict)")
    p.add_argument("--b-test", dest="b_test", help="right-hand side to predict for (predict)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args):
    settings = {
        "experiment": args.experiment,
        "n": args.n,
        "trials": args.trials,
        "spectra": args.spectra,
        "estimator": args.estimator,
        "prior": args.prior,
        "seed": args.seed,
        "out": args.out,
        "jobs": args.jobs,
    }
    paths = {k: getattr(args, k) for k in PATH_KEYS}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                override = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(override, dict):
            raise ConfigError("config must be a JSON object")
        for k in PATH_KEYS:
            if k in override:
                paths[k] = override.pop(k)
        settings.update(override)
    return ExperimentConfig.from_dict(settings), paths


def _require(paths, *keys):
    missing = [k for k in keys if not paths.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigError(f"missing {flags}")


def run_solve(config: ExperimentConfig, matrix_path, rhs_path, model_path=None, stream=None):
    """CG solve with a posterior over the inverse; returns the model."""
    stream = stream or sys.stdout
    B = as_spd(read_matrix(matrix_path), "matrix")
    b = read_vector(rhs_path)
    n = B.shape[0]
    if b.size != n:
        raise InputError(f"rhs has length {b.size}, matrix has order {n}")
    if config.n is not None and config.n != n:
        raise InputError(f"--n {config.n} does not match the matrix order {n}")
    trace = cg_solve(B, b, reorthogonalize=config.reorthogonalize)

    if config.estimator == "matched":
        # No spectrum family is known for a user matrix.
        rule = Stationary()
    else:
        rule = parse_rule(config.estimator, n)
    series = omega_series(trace, predictive=config.omega_mode != "retrospective",
                          geometric=config.omega_mode == "geometric")
    omega2 = omega_at_step(series, rule, trace.m + 1)
    if omega2 is None:
        # Too few steps for the series; fall back to the curvature scale.
        omega2 = 1.0 / curvature_bound(trace) if trace.m else 1.0

    if config.prior == BFGS_CG:
        model = bfgs_cg_posterior(trace, omega2, alpha=1.0)
    else:
        alpha = estimate_alpha(trace, config.safety) if trace.m else 0.0
        model = standardized_norm_posterior(trace, alpha, max(omega2, alpha))

    x = trace.x
    print("x", file=stream)
    for v in x:
        print(format_float(v), file=stream)
    print(f"residual_norm {format_float(np.linalg.norm(B @ x - b))}", file=stream)
    print(f"expected_frobenius_error {format_float(expected_frobenius_error(model))}", file=stream)
    print(f"steps {trace.m}", file=stream)
    if model_path:
        save_model(model_path, model)
        print(f"model {model_path}", file=stream)
    return model


def run_predict(model_path, b_test_path, stream=None):
    """Print ``index mean sd`` (1-based) for ``x = H b_test``."""
    stream = stream or sys.stdout
    model = load_model(model_path)
    b = read_vector(b_test_path)
    if b.size != model.n:
        raise InputError(f"b_test has length {b.size}, model has order {model.n}")
    mean, var = predict_solution(model, b)
    sd = np.sqrt(np.maximum(var, 0.0))
    print("i mean sd", file=stream)
    for i, (m, s) in enumerate(zip(mean, sd), start=1):
        print(f"{i} {format_float(m)} {format_float(s)}", file=stream)
    return mean, sd


def _summarize_fig1(tables, config, stream):
    rows = tables["fig1.csv"]
    step = config.n // 2
    acc = defaultdict(list)
    for spectrum, _, m, est, qty, val in rows:
        if m == step and qty in ("error", "uncertainty"):
            acc[(spectrum, est, qty)].append(val)
    print(f"mean at M={step}", file=stream)
    for (spectrum, est, qty), vals in sorted(acc.items()):
        print(f"{spectrum} {est} {qty} {np.mean(vals):.4g}", file=stream)


def _summarize_fig2to5(tables, xtest, stream):
    ratios = defaultdict(list)
    for spectrum, _, _, prior, _, _, err, _, sd in tables["fig3_elements.csv"]:
        if sd > 0:
            ratios[(spectrum, prior, "h_elements")].append(abs(err) / sd)
    for (spectrum, _), summary in xtest.items():
        for prior, s in summary.items():
            ok = s["xtest_sd_matched"] > 0
            ratios[(spectrum, prior, "x_test")].extend(s["xtest_abs_error"][ok] / s["xtest_sd_matched"][ok])
    print("median |error| / sd (matched rule)", file=stream)
    for (spectrum, prior, what), vals in sorted(ratios.items()):
        print(f"{spectrum} {prior} {what} {np.median(vals):.4g}", file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config, paths = _load_config(args)
        if config.experiment == "solve":
            _require(paths, "matrix", "rhs")
            run_solve(config, paths["matrix"], paths["rhs"], paths["model"])
        elif config.experiment == "predict":
            _require(paths, "model", "b_test")
            run_predict(paths["model"], paths["b_test"])
        else:
            if config.experiment == "fig1":
                _summarize_fig1(run_fig1(config), config, sys.stdout)
            else:
                _summarize_fig2to5(*run_fig2to5(config), sys.stdout)
    except (ConfigError, ParseError, NotSPDError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (np.linalg.LinAlgError, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
