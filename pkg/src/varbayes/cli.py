"""Command-line front end.

Every run writes ``results.json``, ``trace.csv``, ``densities.csv`` and a
``manifest.json`` into ``--out``. ``varbayes replay manifest.json`` re-runs
the recorded command with the recorded settings.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.stats
from threadpoolctl import threadpool_limits

from varbayes import __version__
from varbayes.distributions import DistSpec, ParameterError, log_pdf
from varbayes.ffvb import NumericalError, Strategy, TrainerConfig, run_ffvb
from varbayes.gvb import (
    DegenerateFactorError,
    GaussianCholeskyParams,
    GaussianFactorParams,
    run_cholesky_gvb,
    run_nagvac,
)
from varbayes.mfvb import MfvbConfig, fit_lasso_mfvb, fit_normal_mfvb
from varbayes.models import (
    PAPER_Y,
    HybridNormal,
    MeanFieldNormalIG,
    NormalModelHyper,
    generate_lasso_data,
    generate_logistic_data,
    logistic_loss,
    logistic_model,
    normal_ig_model,
    train_validation_split,
)
from varbayes.special import DomainError
from varbayes.validation import gibbs_normal

logger = logging.getLogger("varbayes")

SCHEMA = 1
GRID_POINTS = 200

COMMANDS = ("mfvb-normal", "mfvb-lasso", "ffvb-normal", "gvb-logistic", "nagvac-logistic", "gibbs-normal")


class UsageError(Exception):
    """Bad flags or malformed input data (exit code 2)."""


# ---------------------------------------------------------------------------
# input


def read_csv(path) -> tuple[list, np.ndarray]:
    """Numeric CSV with a header row. Returns (column names, data matrix)."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such file")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as err:
        raise UsageError(f"{path}: not valid UTF-8 ({err})") from None
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise UsageError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    if all(_is_number(h) for h in header):
        raise UsageError(f"{path}: row 1 looks numeric; a header row is required")
    if len(rows) < 2:
        raise UsageError(f"{path}: header present but no data rows")
    ncol = len(header)
    data = np.empty((len(rows) - 1, ncol))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != ncol:
            raise UsageError(f"{path}: row {i} has {len(row)} columns, expected {ncol}")
        for j, cell in enumerate(row):
            try:
                value = float(cell)
            except ValueError:
                raise UsageError(
                    f"{path}: row {i}, column {j + 1} ({header[j]!r}): cannot parse {cell!r} as a number"
                ) from None
            if not math.isfinite(value):
                raise UsageError(f"{path}: row {i}, column {j + 1} ({header[j]!r}): non-finite value {cell!r}")
            data[i - 2, j] = value
    return header, data


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def parse_floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as a comma-separated list of numbers") from None


def load_response(args) -> np.ndarray:
    """Response vector for the normal-model commands (last CSV column)."""
    if args.data is None:
        return PAPER_Y.copy()
    _, data = read_csv(args.data)
    return data[:, -1]


def load_regression(args, generate):
    """(names, X, y) from --data (last column is y) or the synthetic generator."""
    if args.data is not None:
        header, data = read_csv(args.data)
        if data.shape[1] < 2:
            raise UsageError(f"{args.data}: need at least one covariate column and a response column")
        names, X, y = header[:-1], data[:, :-1], data[:, -1]
    else:
        names, X, y = generate(args)
    if args.standardize:
        sd = X.std(axis=0)
        varying = sd > 0
        X = X.copy()
        X[:, varying] = (X[:, varying] - X[:, varying].mean(axis=0)) / sd[varying]
    if args.intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept"] + list(names)
    return list(names), X, y


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])


def _clean(obj):
    """Convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def density_rows(name, dist: DistSpec, mean, sd, support_low=-math.inf):
    lo = max(mean - 4.0 * sd, support_low)
    if support_low > -math.inf and lo <= support_low:
        lo = support_low + 1e-3 * sd
    grid = np.linspace(lo, mean + 4.0 * sd, GRID_POINTS)
    dens = np.exp(log_pdf(dist, grid))
    return [(name, x, p) for x, p in zip(grid, dens)]


def normal_density_rows(names, means, sds):
    rows = []
    for name, m, s in zip(names, means, sds):
        rows += density_rows(name, DistSpec.normal(m, s * s), m, s)
    return rows


def inverse_gamma_summary(alpha, beta):
    mean = beta / (alpha - 1.0) if alpha > 1 else math.nan
    sd = math.sqrt(beta ** 2 / ((alpha - 1.0) ** 2 * (alpha - 2.0))) if alpha > 2 else math.nan
    return mean, sd


def _ig_density_rows(alpha, beta):
    mean, sd = inverse_gamma_summary(alpha, beta)
    if not math.isfinite(sd):
        # heavy tail: use the mode and a scale from the quantiles instead
        dist = scipy.stats.invgamma(alpha, scale=beta)
        mean = float(dist.median())
        sd = float(dist.ppf(0.84) - dist.ppf(0.16)) / 2.0
    return density_rows("sigma2", DistSpec.inverse_gamma(alpha, beta), mean, sd, support_low=0.0)


def trace_rows(result):
    """Row k holds raw[k] and smoothed[k] = mean(raw[k..k+window-1]), so the
    argmax row of lb_smooth is ``best_index``; the last window-1 rows have
    no smoothed value."""
    smoothed = result.trace.smoothed
    rows = []
    for i, lb in enumerate(result.trace.raw):
        smooth = smoothed[i] if i < len(smoothed) else None
        row = [i, lb, smooth]
        if result.loss is not None:
            row.append(result.loss[i])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# commands; each returns (results dict, trace (header, rows), density rows)


def hyper_from(args) -> NormalModelHyper:
    try:
        return NormalModelHyper(args.mu0, args.sigma0 ** 2, args.alpha0, args.beta0)
    except ParameterError as err:
        raise UsageError(str(err)) from None


def trainer_from(args) -> TrainerConfig:
    try:
        return TrainerConfig(
            num_samples=args.num_samples,
            grad_weight1=args.grad_weight1,
            grad_weight2=args.grad_weight2,
            learning_rate=args.learning_rate,
            step_adaptive=args.step_adaptive,
            window_size=args.window_size,
            max_patience=args.max_patience,
            max_iter=args.max_iter,
            gradient_max=args.gradient_max,
            momentum_weight=args.momentum_weight,
            seed=args.seed,
            init_method=args.init_method,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None


def _init_vector(args, length):
    if args.init_method != "custom":
        return None
    if args.init is None:
        raise UsageError("--init-method custom requires --init")
    lam0 = parse_floats(args.init)
    if len(lam0) != length:
        raise UsageError(f"--init needs {length} values, got {len(lam0)}")
    return np.array(lam0)


def cmd_mfvb_normal(args):
    y = load_response(args)
    hyper = hyper_from(args)
    post = fit_normal_mfvb(y, hyper, MfvbConfig(tol=args.tol, max_iter=args.max_iter))
    s2_mean, s2_sd = inverse_gamma_summary(post.alpha_q, post.beta_q)
    results = {
        "parameters": {
            "mu_q": post.mu_q,
            "sigma_q_sq": post.sigma_q_sq,
            "alpha_q": post.alpha_q,
            "beta_q": post.beta_q,
        },
        "posterior": {"names": ["mu", "sigma2"], "mean": [post.mu_q, s2_mean], "sd": [math.sqrt(post.sigma_q_sq), s2_sd]},
        "iterations": post.iterations,
        "termination": "converged" if post.converged else "max_iter",
    }
    trace = (
        ["iter", "mu_q", "sigma_q_sq", "alpha_q", "beta_q"],
        [[i + 1, s.mu_q, s.sigma_q_sq, s.alpha_q, s.beta_q] for i, s in enumerate(post.history)],
    )
    dens = normal_density_rows(["mu"], [post.mu_q], [math.sqrt(post.sigma_q_sq)])
    dens += _ig_density_rows(post.alpha_q, post.beta_q)
    return results, trace, dens


def _generate_lasso(args):
    beta = parse_floats(args.beta_true)
    X, y = generate_lasso_data(args.generate, beta, args.noise_sd, args.seed)
    return [f"x{j + 1}" for j in range(len(beta))], X, y


def cmd_mfvb_lasso(args):
    if args.data is None and args.generate is None:
        raise UsageError("mfvb-lasso needs --data or --generate")
    names, X, y = load_regression(args, _generate_lasso)
    X = X - X.mean(axis=0)
    y = y - y.mean()
    post = fit_lasso_mfvb(X, y, args.r, args.delta, MfvbConfig(tol=args.tol, max_iter=args.max_iter))
    sd = np.sqrt(np.diag(post.Sigma_beta))
    results = {
        "parameters": {
            "mu_beta": post.mu_beta,
            "Sigma_beta": post.Sigma_beta,
            "alpha_sigma2": post.alpha_sigma2,
            "beta_sigma2": post.beta_sigma2,
            "mu_tau_tilde": post.mu_tau_tilde,
            "lambda_tau_tilde": post.lambda_tau_tilde,
            "alpha_lambda2": post.alpha_lambda2,
            "beta_lambda2": post.beta_lambda2,
        },
        "posterior": {"names": names, "mean": post.mu_beta, "sd": sd},
        "iterations": post.iterations,
        "termination": "converged" if post.converged else "max_iter",
    }
    trace = (["iter"] + [f"mu_beta_{n}" for n in names], [[post.iterations] + list(post.mu_beta)])
    return results, trace, normal_density_rows(names, post.mu_beta, sd)


def _hybrid_sigma2_rows(family: HybridNormal, mu_mu, var_mu):
    """Marginal of sigma2 under the hybrid family via Gauss-Hermite over mu."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / weights.sum()
    mus = mu_mu + math.sqrt(var_mu) * nodes
    rates = family.conditional_rate(mus)
    a = family.shape
    means = rates / (a - 1.0)
    seconds = rates ** 2 / ((a - 1.0) * (a - 2.0))
    mean = float(weights @ means)
    sd = math.sqrt(max(float(weights @ seconds) - mean * mean, 1e-300))
    lo = max(mean - 4 * sd, 1e-3 * sd)
    grid = np.linspace(lo, mean + 4 * sd, GRID_POINTS)
    dens = np.zeros_like(grid)
    for w, r in zip(weights, rates):
        dens += w * np.exp(log_pdf(DistSpec.inverse_gamma(a, r), grid))
    return [("sigma2", x, p) for x, p in zip(grid, dens)], mean, sd


def cmd_ffvb_normal(args):
    y = load_response(args)
    hyper = hyper_from(args)
    cfg = trainer_from(args)
    model = normal_ig_model(y, hyper)
    if args.strategy == "hybrid":
        family = HybridNormal(y, hyper)
        strategy = Strategy.CV_NATURAL if args.hybrid_step == "natural" else Strategy.CV_ADAPTIVE
        result = run_ffvb(model, family, cfg, strategy, lambda0=_init_vector(args, 2))
        mu_mu, var_mu = result.lambda_best
        s2_rows, s2_mean, s2_sd = _hybrid_sigma2_rows(family, mu_mu, var_mu)
        params = {"mu_mu": mu_mu, "sigma_mu_sq": var_mu}
        dens = normal_density_rows(["mu"], [mu_mu], [math.sqrt(var_mu)]) + s2_rows
    else:
        result = run_ffvb(model, MeanFieldNormalIG(), cfg, Strategy(args.strategy), lambda0=_init_vector(args, 4))
        mu_mu, var_mu, a, b = result.lambda_best
        s2_mean, s2_sd = inverse_gamma_summary(a, b)
        params = {"mu_mu": mu_mu, "sigma_mu_sq": var_mu, "alpha_sigma2": a, "beta_sigma2": b}
        dens = normal_density_rows(["mu"], [mu_mu], [math.sqrt(var_mu)]) + _ig_density_rows(a, b)
    results = {
        "parameters": params,
        "posterior": {"names": ["mu", "sigma2"], "mean": [mu_mu, s2_mean], "sd": [math.sqrt(var_mu), s2_sd]},
        **_fit_summary(result),
    }
    return results, (["iter", "lb", "lb_smooth"], trace_rows(result)), dens


def _fit_summary(result):
    return {
        "iterations": result.iterations,
        "termination": result.termination.value,
        "best_index": result.best_index,
        "lambda_best": result.lambda_best,
        "diagnostics": list(result.diagnostics),
    }


def _generate_logistic(args):
    theta = parse_floats(args.theta_true)
    X, y = generate_logistic_data(args.generate, theta, args.seed)
    # generated data carry their own intercept column
    return ["intercept"] + [f"x{j}" for j in range(1, len(theta))], X, y


def _logistic_inputs(args):
    if args.data is None and args.generate is None:
        raise UsageError(f"{args.command} needs --data or --generate")
    names, X, y = load_regression(args, _generate_logistic)
    bad = np.flatnonzero((y != 0) & (y != 1))
    if bad.size:
        raise UsageError(
            f"response must be 0/1; row {bad[0] + 2} (last column) has value {float(y[bad[0]])!r}"
        )
    return names, X, y


def cmd_gvb_logistic(args):
    names, X, y = _logistic_inputs(args)
    model = logistic_model(X, y, args.prior_var)
    cfg = trainer_from(args)
    d = X.shape[1]
    result = run_cholesky_gvb(model, cfg, lambda0=_init_vector(args, d + d * (d + 1) // 2))
    p = GaussianCholeskyParams.from_lambda(result.lambda_best, d)
    sd = np.sqrt(np.diag(p.cov))
    results = {
        "parameters": {"mu": p.mu, "L": p.L},
        "posterior": {"names": names, "mean": p.mu, "sd": sd},
        **_fit_summary(result),
    }
    return results, (["iter", "lb", "lb_smooth"], trace_rows(result)), normal_density_rows(names, p.mu, sd)


def cmd_nagvac_logistic(args):
    names, X, y = _logistic_inputs(args)
    if not 0 < args.validation < 1:
        raise UsageError("--validation must lie in (0, 1)")
    Xt, yt, Xv, yv = train_validation_split(X, y, args.validation, np.random.default_rng(args.seed))
    model = logistic_model(Xt, yt, args.prior_var)
    cfg = trainer_from(args)
    d = X.shape[1]
    result = run_nagvac(
        model, cfg,
        validation_loss=lambda lam: logistic_loss(Xv, yv, lam[:d]),
        lambda0=_init_vector(args, 3 * d),
        natural=args.natural,
    )
    p = GaussianFactorParams.from_lambda(result.lambda_best)
    sd = np.sqrt(p.b ** 2 + p.c ** 2)
    results = {
        "parameters": {"mu": p.mu, "b": p.b, "c": p.c},
        "posterior": {"names": names, "mean": p.mu, "sd": sd},
        "validation_loss_best": min(result.loss),
        "validation_loss_null": logistic_loss(Xv, yv, np.zeros(d)),
        **_fit_summary(result),
    }
    return results, (["iter", "lb", "lb_smooth", "loss"], trace_rows(result)), normal_density_rows(names, p.mu, sd)


def cmd_gibbs_normal(args):
    y = load_response(args)
    hyper = hyper_from(args)
    try:
        out = gibbs_normal(y, hyper, args.n_iter, np.random.default_rng(args.seed), burn_in=args.burn_in)
    except ValueError as err:
        raise UsageError(str(err)) from None
    kept = out.kept
    names = ["mu", "sigma2"]
    dens = []
    for j, name in enumerate(names):
        col = kept[:, j]
        m, s = float(col.mean()), float(col.std(ddof=1))
        lo = m - 4 * s if j == 0 else max(m - 4 * s, 1e-3 * s)
        grid = np.linspace(lo, m + 4 * s, GRID_POINTS)
        dens += [(name, x, p) for x, p in zip(grid, scipy.stats.gaussian_kde(col)(grid))]
    results = {
        "posterior": {"names": names, "mean": out.mean(), "sd": out.sd(), "mean_se": out.mean_se()},
        "iterations": args.n_iter,
        "burn_in": out.burn_in,
    }
    rows = [[i, r[0], r[1]] for i, r in enumerate(out.draws)]
    return results, (["iter", "mu", "sigma2"], rows), dens


HANDLERS = {
    "mfvb-normal": cmd_mfvb_normal,
    "mfvb-lasso": cmd_mfvb_lasso,
    "ffvb-normal": cmd_ffvb_normal,
    "gvb-logistic": cmd_gvb_logistic,
    "nagvac-logistic": cmd_nagvac_logistic,
    "gibbs-normal": cmd_gibbs_normal,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p):
    p.add_argument("--out", default="vb-out", help="output directory")
    p.add_argument("--config", help="key = value file; explicit flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="random seed (VB_SEED overrides)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--data", help="CSV with a header row; the last column is the response")


def _add_normal_prior(p):
    p.add_argument("--mu0", type=float, default=0.0)
    p.add_argument("--sigma0", type=float, default=10.0, help="prior standard deviation of mu")
    p.add_argument("--alpha0", type=float, default=1.0)
    p.add_argument("--beta0", type=float, default=1.0)


def _add_regression_io(p):
    p.add_argument("--intercept", action="store_true", help="prepend a column of ones")
    p.add_argument("--standardize", action="store_true", help="z-score the covariate columns")
    p.add_argument("--generate", type=int, default=None, help="simulate N observations instead of --data")


def _add_trainer(p, **defaults):
    d = dict(
        num_samples=50, grad_weight1=0.9, grad_weight2=0.9, learning_rate=0.002,
        step_adaptive=None, window_size=50, max_patience=20, max_iter=1000,
        gradient_max=10.0, momentum_weight=0.9,
    )
    d.update(defaults)
    p.add_argument("--num-samples", type=int, default=d["num_samples"])
    p.add_argument("--grad-weight1", type=float, default=d["grad_weight1"])
    p.add_argument("--grad-weight2", type=float, default=d["grad_weight2"])
    p.add_argument("--learning-rate", type=float, default=d["learning_rate"])
    p.add_argument("--step-adaptive", type=int, default=d["step_adaptive"], help="tau; default max-iter/2")
    p.add_argument("--window-size", type=int, default=d["window_size"])
    p.add_argument("--max-patience", type=int, default=d["max_patience"])
    p.add_argument("--max-iter", type=int, default=d["max_iter"])
    p.add_argument("--gradient-max", type=float, default=d["gradient_max"])
    p.add_argument("--momentum-weight", type=float, default=d["momentum_weight"])
    p.add_argument("--init-method", choices=["random", "custom"], default="random")
    p.add_argument("--init", default=None, help="comma-separated initial lambda (with --init-method custom)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varbayes", description="Variational Bayes experiments")
    parser.add_argument("--version", action="version", version=f"varbayes {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mfvb-normal", help="coordinate-ascent VB for the normal model")
    _add_common(p)
    _add_normal_prior(p)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=1000)

    p = sub.add_parser("mfvb-lasso", help="coordinate-ascent VB for the Bayesian lasso")
    _add_common(p)
    _add_regression_io(p)
    p.add_argument("--beta-true", default="3,1.5,0,0,2,0,0,0")
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--r", type=float, default=0.0)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=1000)

    p = sub.add_parser("ffvb-normal", help="fixed-form VB for the normal model")
    _add_common(p)
    _add_normal_prior(p)
    p.add_argument("--strategy", choices=["cv-adaptive", "cv-natural", "hybrid"], default="cv-adaptive")
    p.add_argument("--hybrid-step", choices=["natural", "adaptive"], default="natural")
    _add_trainer(p, num_samples=2000, learning_rate=0.005, max_patience=10, step_adaptive=1000,
                 max_iter=10000, gradient_max=100.0)

    p = sub.add_parser("gvb-logistic", help="Cholesky Gaussian VB for logistic regression")
    _add_common(p)
    _add_regression_io(p)
    p.add_argument("--theta-true", default="0.5,-1,1.5,0,-0.5")
    p.add_argument("--prior-var", type=float, default=50.0)
    _add_trainer(p, step_adaptive=500, max_iter=5000)

    p = sub.add_parser("nagvac-logistic", help="factor-covariance natural-gradient VB for logistic regression")
    _add_common(p)
    _add_regression_io(p)
    p.add_argument("--theta-true", default="0.5,-1,1.5,0,-0.5")
    p.add_argument("--prior-var", type=float, default=50.0)
    p.add_argument("--validation", type=float, default=0.2, help="fraction held out for the stopping loss")
    p.add_argument("--natural", choices=["block", "printed"], default="block")
    _add_trainer(p, learning_rate=0.01, max_iter=5000)

    p = sub.add_parser("gibbs-normal", help="Gibbs sampler for the normal model")
    _add_common(p)
    _add_normal_prior(p)
    p.add_argument("--n-iter", type=int, default=100_000)
    p.add_argument("--burn-in", type=float, default=0.2)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="output directory (default: the recorded one)")
    return parser


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "replay" and args.config:
        config = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, value in config.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown setting {key!r} for {args.command}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                config[key] = value.lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    if args.command != "replay":
        env_seed = os.environ.get("VB_SEED")
        if env_seed not in (None, ""):
            try:
                args.seed = int(env_seed)
            except ValueError:
                raise UsageError(f"VB_SEED must be an integer, got {env_seed!r}") from None
    return args


# ---------------------------------------------------------------------------
# execution


def execute(args, out_dir: Path) -> None:
    handler = HANDLERS[args.command]
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    with threadpool_limits(limits=args.threads):
        results, (trace_header, trace), dens = handler(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = {k: v for k, v in vars(args).items() if k not in ("out", "verbose")}
    write_json(out_dir / "results.json", {"schema": SCHEMA, "command": args.command, "config": settings, **results})
    write_csv(out_dir / "trace.csv", trace_header, trace)
    write_csv(out_dir / "densities.csv", ["parameter", "x", "density"], dens)


def write_manifest(args, out_dir: Path, started: float) -> None:
    settings = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    if getattr(args, "data", None):
        dataset = {"path": settings["data"], "sha256": file_digest(args.data)}
    elif args.command in ("mfvb-lasso", "gvb-logistic", "nagvac-logistic"):
        dataset = {"generator": args.command, "n": args.generate, "seed": args.seed}
    else:
        dataset = {"builtin": "normal-example"}
    manifest = {
        "schema": SCHEMA,
        "command": args.command,
        "settings": settings,
        "dataset": dataset,
        "seed": args.seed,
        "outputs": ["results.json", "trace.csv", "densities.csv"],
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    write_json(out_dir / "manifest.json", manifest)


def replay(manifest_path, out: Optional[str]) -> argparse.Namespace:
    path = Path(manifest_path)
    if not path.is_file():
        raise UsageError(f"manifest {path} not found")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        settings = dict(manifest["settings"])
        command = manifest["command"]
    except (json.JSONDecodeError, KeyError) as err:
        raise UsageError(f"{path}: not a valid manifest ({err})") from None
    if command not in HANDLERS:
        raise UsageError(f"{path}: unknown command {command!r}")
    dataset = manifest.get("dataset") or {}
    if "sha256" in dataset:
        if not Path(dataset["path"]).is_file() or file_digest(dataset["path"]) != dataset["sha256"]:
            raise UsageError(f"dataset {dataset['path']} is missing or has changed since the recorded run")
    if out is not None:
        settings["out"] = out
    settings["verbose"] = False
    return argparse.Namespace(**settings)


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = parse_args(argv)
        if args.command == "replay":
            args = replay(args.manifest, args.out)
        logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING)
        if getattr(args, "data", None):
            args.data = str(Path(args.data).resolve())
        out_dir = Path(args.out)
        execute(args, out_dir)
        write_manifest(args, out_dir, started)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError, DegenerateFactorError,
            DomainError, ParameterError, ZeroDivisionError) as err:
        print(f"numerical failure ({type(err).__name__}): {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
