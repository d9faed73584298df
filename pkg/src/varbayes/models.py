"""Model specifications (log joint density and its gradient), the bespoke
variational families for the normal model, and synthetic data generators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from varbayes.distributions import ParameterError, make_rng
from varbayes.special import DomainError, digamma, lgamma, trigamma

_LOG_2PI = math.log(2.0 * math.pi)
POSITIVE_FLOOR = 1e-5

# data of the running normal-model example
PAPER_Y = np.array([11.0, 12.0, 8.0, 10.0, 9.0, 8.0, 9.0, 10.0, 13.0, 7.0])


@dataclass(frozen=True)
class NormalModelHyper:
    """Prior N(mu0, sigma0_sq) on the mean and InverseGamma(alpha0, beta0) on the variance."""

    mu0: float = 0.0
    sigma0_sq: float = 100.0
    alpha0: float = 1.0
    beta0: float = 1.0

    def __post_init__(self):
        if not (self.sigma0_sq > 0 and self.alpha0 > 0 and self.beta0 > 0):
            raise ParameterError(f"sigma0_sq, alpha0, beta0 must be positive: {self}")


@dataclass(frozen=True)
class ModelSpec:
    """h(theta) = log p(theta) + log p(y | theta), evaluated on a batch.

    ``log_joint`` maps an (S, d) array to (S,); ``grad_log_joint`` maps
    (S, d) to (S, d). ``h``/``grad_h`` also accept a single (d,) vector.
    """

    dim: int
    log_joint: Callable[[np.ndarray], np.ndarray]
    grad_log_joint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""
    extras: dict = field(default_factory=dict, compare=False)

    def h(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return float(self.log_joint(theta[None, :])[0])
        return self.log_joint(theta)

    def grad_h(self, theta):
        if self.grad_log_joint is None:
            raise NotImplementedError(f"model {self.name!r} has no gradient")
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return self.grad_log_joint(theta[None, :])[0]
        return self.grad_log_joint(theta)


# ---------------------------------------------------------------------------
# models


def _sum_sq(y, mu):
    """sum_i (y_i - mu)^2 for a vector of mu values."""
    n = len(y)
    return np.sum(y * y) - 2.0 * mu * np.sum(y) + n * mu * mu


def normal_ig_model(y, hyper: NormalModelHyper) -> ModelSpec:
    """theta = (mu, sigma2) for y_i ~ N(mu, sigma2) with N / inverse-gamma priors.

    The log joint keeps every normalizing constant.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) == 0:
        raise ValueError("y must be a non-empty vector")
    n = len(y)
    h = hyper
    const = (
        -(n + 1) / 2.0 * _LOG_2PI
        - 0.5 * math.log(h.sigma0_sq)
        + h.alpha0 * math.log(h.beta0)
        - lgamma(h.alpha0)
    )
    power = n / 2.0 + h.alpha0 + 1.0

    def split(thetas):
        mu, s2 = thetas[:, 0], thetas[:, 1]
        if np.any(s2 <= 0):
            raise DomainError("sigma2 must be positive")
        return mu, s2

    def log_joint(thetas):
        mu, s2 = split(thetas)
        return (
            const
            - (mu - h.mu0) ** 2 / (2.0 * h.sigma0_sq)
            - power * np.log(s2)
            - h.beta0 / s2
            - _sum_sq(y, mu) / (2.0 * s2)
        )

    def grad(thetas):
        mu, s2 = split(thetas)
        d_mu = -(mu - h.mu0) / h.sigma0_sq + (np.sum(y) - n * mu) / s2
        d_s2 = -power / s2 + (h.beta0 + 0.5 * _sum_sq(y, mu)) / (s2 * s2)
        return np.column_stack([d_mu, d_s2])

    return ModelSpec(2, log_joint, grad, name="normal-ig", extras={"y": y, "hyper": hyper})


def conjugate_normal_model(y, noise_var, prior_mean, prior_var) -> ModelSpec:
    """Normal mean with known noise variance and a normal prior (d = 1).

    ``extras`` holds the exact posterior mean, variance and log evidence.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    post_var = 1.0 / (1.0 / prior_var + n / noise_var)
    post_mean = post_var * (prior_mean / prior_var + np.sum(y) / noise_var)

    def log_joint(thetas):
        mu = thetas[:, 0]
        return (
            -0.5 * (_LOG_2PI + math.log(prior_var))
            - (mu - prior_mean) ** 2 / (2 * prior_var)
            - 0.5 * n * (_LOG_2PI + math.log(noise_var))
            - _sum_sq(y, mu) / (2 * noise_var)
        )

    def grad(thetas):
        mu = thetas[:, 0]
        return (-(mu - prior_mean) / prior_var + (np.sum(y) - n * mu) / noise_var)[:, None]

    # log p(y) = log p(y, mu) - log p(mu | y) at any mu
    at = np.array([[post_mean]])
    log_evidence = float(log_joint(at)[0]) + 0.5 * (_LOG_2PI + math.log(post_var))
    extras = {"post_mean": post_mean, "post_var": post_var, "log_evidence": log_evidence}
    return ModelSpec(1, log_joint, grad, name="conjugate-normal", extras=extras)


def gaussian_target_model(mean, cov, log_evidence=0.0) -> ModelSpec:
    """h(theta) = log_evidence + log N(theta; mean, cov): the posterior is exactly Gaussian."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = len(mean)
    chol = np.linalg.cholesky(cov)
    prec = np.linalg.inv(cov)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))

    def log_joint(thetas):
        r = thetas - mean
        return log_evidence - 0.5 * (d * _LOG_2PI + log_det) - 0.5 * np.einsum("si,ij,sj->s", r, prec, r)

    def grad(thetas):
        return -(thetas - mean) @ prec

    extras = {"mean": mean, "cov": cov, "log_evidence": log_evidence}
    return ModelSpec(d, log_joint, grad, name="gaussian-target", extras=extras)


def logistic_model(X, y, sigma0_sq=50.0) -> ModelSpec:
    """Logistic regression with a N(0, sigma0_sq I) prior on the coefficients."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic responses must be 0 or 1")
    if sigma0_sq <= 0:
        raise ParameterError("sigma0_sq must be positive")
    d = X.shape[1]
    const = -0.5 * d * (_LOG_2PI + math.log(sigma0_sq))
    yX = y @ X

    def log_joint(thetas):
        a = thetas @ X.T  # (S, n)
        return (
            const
            - np.sum(thetas * thetas, axis=1) / (2.0 * sigma0_sq)
            + thetas @ yX
            - np.sum(np.logaddexp(0.0, a), axis=1)
        )

    def grad(thetas):
        p = expit(thetas @ X.T)
        return -thetas / sigma0_sq + (y[None, :] - p) @ X

    return ModelSpec(d, log_joint, grad, name="logistic", extras={"X": X, "y": y, "sigma0_sq": sigma0_sq})


def logistic_loss(X, y, theta) -> float:
    """Average minus log-likelihood of a logistic regression at ``theta``."""
    a = np.asarray(X) @ np.asarray(theta)
    return float(np.mean(np.logaddexp(0.0, a) - np.asarray(y) * a))


# ---------------------------------------------------------------------------
# variational families for the normal model


def _normal_score(x, m, v):
    r = x - m
    return r / v, -0.5 / v + r * r / (2.0 * v * v)


class NormalFamily:
    """Univariate q = N(mu, sigma2), lam = (mu, sigma2).

    Supports both score-function and reparameterization strategies.
    """

    dim_lambda = 2

    def initial_lambda(self, rng, init_method="random"):
        if init_method != "random":
            raise ValueError("custom initialization requires an explicit lambda0")
        return np.array([rng.normal(0.0, 0.01), 1.0])

    def project(self, lam):
        lam = np.array(lam, dtype=float)
        lam[1] = max(lam[1], POSITIVE_FLOOR)
        return lam

    def _check(self, lam):
        if lam[1] <= 0:
            raise ParameterError(f"variance must be positive, got {lam[1]}")

    def sample(self, lam, rng, S):
        self._check(lam)
        return (lam[0] + math.sqrt(lam[1]) * rng.standard_normal(S))[:, None]

    def log_q(self, lam, thetas):
        m, v = lam
        x = thetas[:, 0]
        return -0.5 * (_LOG_2PI + math.log(v)) - (x - m) ** 2 / (2.0 * v)

    def grad_lambda_log_q(self, lam, thetas):
        return np.column_stack(_normal_score(thetas[:, 0], lam[0], lam[1]))

    def fisher(self, lam):
        v = lam[1]
        return np.diag([1.0 / v, 1.0 / (2.0 * v * v)])

    def draw_eps(self, rng, S):
        return rng.standard_normal(S)

    def reparam_gradient(self, model, lam, eps):
        self._check(lam)
        sd = math.sqrt(lam[1])
        thetas = (lam[0] + sd * eps)[:, None]
        grad_h = model.grad_h(thetas)[:, 0] + (thetas[:, 0] - lam[0]) / lam[1]
        g = np.array([np.mean(grad_h), np.mean(grad_h * eps) / (2.0 * sd)])
        h = model.h(thetas) - self.log_q(lam, thetas)
        return g, h


class MeanFieldNormalIG:
    """q(mu, sigma2) = N(mu; mu_mu, sigma_mu_sq) InverseGamma(sigma2; alpha, beta).

    lam = (mu_mu, sigma_mu_sq, alpha, beta).
    """

    dim_lambda = 4

    def initial_lambda(self, rng, init_method="random"):
        if init_method != "random":
            raise ValueError("custom initialization requires an explicit lambda0")
        return np.array([rng.normal(0.0, 0.01), 1.0, 1.0, 1.0])

    def project(self, lam):
        lam = np.array(lam, dtype=float)
        lam[1:] = np.maximum(lam[1:], POSITIVE_FLOOR)
        return lam

    def _check(self, lam):
        if np.any(np.asarray(lam[1:]) <= 0):
            raise ParameterError(f"sigma_mu_sq, alpha, beta must be positive: {lam}")

    def sample(self, lam, rng, S):
        self._check(lam)
        mu = lam[0] + math.sqrt(lam[1]) * rng.standard_normal(S)
        with np.errstate(divide="ignore"):  # gamma underflow for tiny alpha; caught downstream
            s2 = lam[3] / rng.standard_gamma(lam[2], size=S)
        return np.column_stack([mu, s2])

    def log_q(self, lam, thetas):
        mm, vm, a, b = lam
        mu, s2 = thetas[:, 0], thetas[:, 1]
        return (
            a * math.log(b) - lgamma(a) - (a + 1.0) * np.log(s2) - b / s2
            - 0.5 * _LOG_2PI - 0.5 * math.log(vm) - (mu - mm) ** 2 / (2.0 * vm)
        )

    def grad_lambda_log_q(self, lam, thetas):
        mm, vm, a, b = lam
        mu, s2 = thetas[:, 0], thetas[:, 1]
        g_m, g_v = _normal_score(mu, mm, vm)
        g_a = math.log(b) - digamma(a) - np.log(s2)
        g_b = a / b - 1.0 / s2
        return np.column_stack([g_m, g_v, g_a, g_b])

    def fisher(self, lam):
        _, vm, a, b = lam
        F = np.zeros((4, 4))
        F[0, 0] = 1.0 / vm
        F[1, 1] = 1.0 / (2.0 * vm * vm)
        F[2, 2] = trigamma(a)
        F[2, 3] = F[3, 2] = -1.0 / b
        F[3, 3] = a / (b * b)
        return F

    @staticmethod
    def posterior_means(lam):
        """(E[mu], E[sigma2]) under q; E[sigma2] is inf when alpha <= 1."""
        a, b = lam[2], lam[3]
        return lam[0], (b / (a - 1.0) if a > 1 else math.inf)


class HybridNormal:
    """q(mu, sigma2) = N(mu; mu_mu, sigma_mu_sq) p(sigma2 | y, mu).

    The second factor is the exact inverse-gamma full conditional, so the
    score with respect to lam = (mu_mu, sigma_mu_sq) only involves the
    normal factor.
    """

    dim_lambda = 2

    def __init__(self, y, hyper: NormalModelHyper):
        self.y = np.asarray(y, dtype=float)
        self.hyper = hyper
        self.shape = hyper.alpha0 + len(self.y) / 2.0

    def conditional_rate(self, mu):
        return self.hyper.beta0 + 0.5 * _sum_sq(self.y, np.asarray(mu, dtype=float))

    def initial_lambda(self, rng, init_method="random"):
        if init_method != "random":
            raise ValueError("custom initialization requires an explicit lambda0")
        return np.array([rng.normal(0.0, 0.01), 1.0])

    def project(self, lam):
        lam = np.array(lam, dtype=float)
        lam[1] = max(lam[1], POSITIVE_FLOOR)
        return lam

    def sample(self, lam, rng, S):
        if lam[1] <= 0:
            raise ParameterError(f"sigma_mu_sq must be positive, got {lam[1]}")
        mu = lam[0] + math.sqrt(lam[1]) * rng.standard_normal(S)
        s2 = self.conditional_rate(mu) / rng.standard_gamma(self.shape, size=S)
        return np.column_stack([mu, s2])

    def log_conditional(self, thetas):
        mu, s2 = thetas[:, 0], thetas[:, 1]
        a = self.shape
        b = self.conditional_rate(mu)
        return a * np.log(b) - lgamma(a) - (a + 1.0) * np.log(s2) - b / s2

    def log_q(self, lam, thetas):
        mu = thetas[:, 0]
        log_qt = -0.5 * (_LOG_2PI + math.log(lam[1])) - (mu - lam[0]) ** 2 / (2.0 * lam[1])
        return log_qt + self.log_conditional(thetas)

    def grad_lambda_log_q(self, lam, thetas):
        return np.column_stack(_normal_score(thetas[:, 0], lam[0], lam[1]))

    def fisher(self, lam):
        v = lam[1]
        return np.diag([1.0 / v, 1.0 / (2.0 * v * v)])


# ---------------------------------------------------------------------------
# synthetic data


def generate_lasso_data(n, beta_true, sigma, rng=None):
    """Gaussian design, y = X beta + sigma eps; both returned column-centered."""
    rng = make_rng(rng)
    beta_true = np.asarray(beta_true, dtype=float)
    X = rng.standard_normal((n, len(beta_true)))
    y = X @ beta_true + sigma * rng.standard_normal(n)
    return X - X.mean(axis=0), y - y.mean()


def generate_logistic_data(n, theta_true, rng=None):
    """Intercept column plus len(theta_true) - 1 standard-normal covariates."""
    rng = make_rng(rng)
    theta_true = np.asarray(theta_true, dtype=float)
    Z = rng.standard_normal((n, len(theta_true) - 1))
    X = np.column_stack([np.ones(n), Z])
    y = (rng.random(n) < expit(X @ theta_true)).astype(float)
    return X, y


def train_validation_split(X, y, validation=0.2, rng=None):
    rng = make_rng(rng)
    n = len(y)
    perm = rng.permutation(n)
    n_val = int(round(validation * n))
    val, train = perm[:n_val], perm[n_val:]
    return X[train], y[train], X[val], y[val]
