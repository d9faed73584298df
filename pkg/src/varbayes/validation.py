"""Independent reference computations used to check the VB output:
Gibbs and random-walk Metropolis samplers, finite differences, Monte Carlo
Fisher information and moment-comparison reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from varbayes.distributions import make_rng
from varbayes.models import NormalModelHyper


@dataclass(frozen=True)
class McmcOutput:
    """Full chain with the number of leading draws to discard."""

    draws: np.ndarray  # (iterations, dim)
    burn_in: int
    thinning: int = 1
    acceptance_rate: float = 1.0

    @property
    def kept(self) -> np.ndarray:
        return self.draws[self.burn_in::self.thinning]

    def mean(self) -> np.ndarray:
        return self.kept.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.kept.std(axis=0, ddof=1)

    def mean_se(self, n_batches: int = 50) -> np.ndarray:
        return batch_means_se(self.kept, n_batches)


def batch_means_se(draws, n_batches: int = 50) -> np.ndarray:
    """Standard error of the chain mean by non-overlapping batch means."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] == 1:
        draws = draws.T
    m = draws.shape[0] // n_batches
    if m < 2:
        return draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
    means = draws[: m * n_batches].reshape(n_batches, m, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


def gibbs_normal(y, hyper: NormalModelHyper, n_iter: int, rng=None, burn_in: float = 0.2) -> McmcOutput:
    """Two-block Gibbs sampler for (mu, sigma2); draws are (mu, sigma2) columns."""
    if n_iter < 2000:
        raise ValueError("n_iter must be at least 2000")
    rng = make_rng(rng)
    y = np.asarray(y, dtype=float)
    n = len(y)
    sum_y = float(np.sum(y))
    sum_y2 = float(np.sum(y * y))
    prior_prec = 1.0 / hyper.sigma0_sq
    prior_term = hyper.mu0 * prior_prec
    shape = hyper.alpha0 + n / 2.0

    z = rng.standard_normal(n_iter)
    gam = rng.standard_gamma(shape, size=n_iter)
    out = np.empty((n_iter, 2))
    s2 = float(np.var(y)) if n > 1 else 1.0
    for i in range(n_iter):
        prec = prior_prec + n / s2
        mu = (prior_term + sum_y / s2) / prec + z[i] / math.sqrt(prec)
        rate = hyper.beta0 + 0.5 * (sum_y2 - 2.0 * mu * sum_y + n * mu * mu)
        s2 = rate / gam[i]
        out[i, 0] = mu
        out[i, 1] = s2
    return McmcOutput(out, int(burn_in * n_iter))


def metropolis(
    log_target: Callable[[np.ndarray], float],
    x0,
    proposal_cov,
    n_iter: int,
    rng=None,
    burn_in: float = 0.2,
) -> McmcOutput:
    """Random-walk Metropolis with Gaussian proposals N(x, proposal_cov)."""
    rng = make_rng(rng)
    x = np.array(x0, dtype=float)
    d = len(x)
    chol = np.linalg.cholesky(np.atleast_2d(proposal_cov))
    steps = rng.standard_normal((n_iter, d)) @ chol.T
    log_u = np.log(rng.random(n_iter))
    lp = float(log_target(x))
    if not math.isfinite(lp):
        raise FloatingPointError("log target is not finite at the starting point")
    out = np.empty((n_iter, d))
    accepted = 0
    for i in range(n_iter):
        prop = x + steps[i]
        lp_prop = float(log_target(prop))
        if log_u[i] < lp_prop - lp:
            x, lp = prop, lp_prop
            accepted += 1
        out[i] = x
    return McmcOutput(out, int(burn_in * n_iter), acceptance_rate=accepted / n_iter)


def fd_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central finite differences, one coordinate at a time."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        hi, lo = f(x + e), f(x - e)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        g[i] = (hi - lo) / (2.0 * step)
    return g


def mc_fisher(family, lam, S: int, rng=None, return_se: bool = False):
    """Sample covariance of the score grad_lambda log q over S draws."""
    rng = make_rng(rng)
    lam = np.asarray(lam, dtype=float)
    scores = family.grad_lambda_log_q(lam, family.sample(lam, rng, S))
    centered = scores - scores.mean(axis=0)
    F = centered.T @ centered / (S - 1)
    F = 0.5 * (F + F.T)
    if not return_se:
        return F
    prods = centered[:, :, None] * centered[:, None, :]
    se = prods.std(axis=0, ddof=1) / math.sqrt(S)
    return F, se


def compare_moments(mcmc: McmcOutput, vb) -> dict:
    """Per-dimension mean and sd differences (VB minus MCMC) with standard errors.

    ``vb`` is either an (S, d) array of VB draws or a mapping with
    ``mean`` and ``sd`` entries (exact moments, zero standard error).
    """
    kept = np.asarray(mcmc.kept, dtype=float)
    if kept.size == 0:
        raise ValueError("MCMC output is empty after burn-in")
    m_mean, m_sd = kept.mean(axis=0), kept.std(axis=0, ddof=1)
    m_se = batch_means_se(kept)
    if isinstance(vb, dict):
        v_mean = np.atleast_1d(np.asarray(vb["mean"], dtype=float))
        v_sd = np.atleast_1d(np.asarray(vb["sd"], dtype=float))
        v_se = np.zeros_like(v_mean)
    else:
        arr = np.asarray(vb, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[0] == 0:
            raise ValueError("VB sample is empty")
        v_mean, v_sd = arr.mean(axis=0), arr.std(axis=0, ddof=1)
        v_se = v_sd / math.sqrt(arr.shape[0])
    if v_mean.shape != m_mean.shape:
        raise ValueError(f"dimension mismatch: MCMC {m_mean.shape} vs VB {v_mean.shape}")
    return {
        "mean_diff": (v_mean - m_mean).tolist(),
        "sd_diff": (v_sd - m_sd).tolist(),
        "mean_se": np.sqrt(m_se ** 2 + v_se ** 2).tolist(),
        "mcmc_mean": m_mean.tolist(),
        "mcmc_sd": m_sd.tolist(),
        "vb_mean": v_mean.tolist(),
        "vb_sd": v_sd.tolist(),
    }
