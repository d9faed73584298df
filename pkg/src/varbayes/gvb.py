"""Gaussian variational families trained with the reparameterization trick.

Two covariance structures are supported:

* Cholesky: Sigma = L L^T, lam = (mu, vech(L)), theta = mu + L eps.
* Factor:   Sigma = b b^T + diag(c)^2, lam = (mu, b, c),
            theta = mu + eps1 b + c * eps2, with O(d) densities and gradients.

vech stacks the lower-triangular columns of L, column by column.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from varbayes.distributions import make_rng
from varbayes.ffvb import (
    FitResult,
    LbTrace,
    Strategy,
    Termination,
    TrainerConfig,
    _check_finite,
    clip_gradient,
    learning_rate,
    momentum_update,
    run_ffvb,
)
from varbayes.special import DomainError

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class DegenerateFactorError(ArithmeticError):
    """The factor parameters make the natural-gradient formulas undefined."""


# ---------------------------------------------------------------------------
# Cholesky family


def vech_indices(d: int):
    """(rows, cols) of the lower triangle in column-stacked order."""
    cols, rows = np.triu_indices(d)
    return rows, cols


def vech(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    rows, cols = vech_indices(L.shape[0])
    return L[rows, cols]


def unvech(v, d: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (d * (d + 1) // 2,):
        raise ValueError(f"vech length {v.shape} does not match d={d}")
    L = np.zeros((d, d))
    rows, cols = vech_indices(d)
    L[rows, cols] = v
    return L


@dataclass(frozen=True)
class GaussianCholeskyParams:
    mu: np.ndarray
    L_vech: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mu)

    @property
    def L(self) -> np.ndarray:
        return unvech(self.L_vech, self.dim)

    @property
    def cov(self) -> np.ndarray:
        L = self.L
        return L @ L.T

    def to_lambda(self) -> np.ndarray:
        return np.concatenate([self.mu, self.L_vech])

    @classmethod
    def from_lambda(cls, lam, d: int) -> "GaussianCholeskyParams":
        lam = np.asarray(lam, dtype=float)
        return cls(lam[:d].copy(), lam[d:].copy())

    @classmethod
    def from_L(cls, mu, L) -> "GaussianCholeskyParams":
        return cls(np.asarray(mu, dtype=float), vech(L))


def reparam_sample_cholesky(params: GaussianCholeskyParams, eps) -> np.ndarray:
    """theta = mu + L eps; ``eps`` may be (d,) or a batch (S, d)."""
    eps = np.asarray(eps, dtype=float)
    return params.mu + eps @ params.L.T


def _check_L(L):
    diag = np.diag(L)
    if np.any(diag == 0) or not np.all(np.isfinite(L)):
        raise np.linalg.LinAlgError("Cholesky factor is singular (zero on the diagonal)")


def cholesky_grad_logq(params: GaussianCholeskyParams, thetas) -> np.ndarray:
    """-Sigma^{-1}(theta - mu) via L z = theta - mu, L^T x = z."""
    L = params.L
    _check_L(L)
    r = np.atleast_2d(thetas) - params.mu
    z = scipy.linalg.solve_triangular(L, r.T, lower=True)
    x = scipy.linalg.solve_triangular(L, z, lower=True, trans="T")
    return -x.T


def cholesky_logq(params: GaussianCholeskyParams, thetas) -> np.ndarray:
    L = params.L
    _check_L(L)
    r = np.atleast_2d(thetas) - params.mu
    z = scipy.linalg.solve_triangular(L, r.T, lower=True)
    return (
        -0.5 * params.dim * _LOG_2PI
        - np.sum(np.log(np.abs(np.diag(L))))
        - 0.5 * np.sum(z * z, axis=0)
    )


def reparam_gradient_cholesky(model, params: GaussianCholeskyParams, eps_batch):
    """Sample means of grad_theta h_lam and vech(grad_theta h_lam eps^T).

    Returns ``(grad_mu, grad_vechL, h_lambda values)``.
    """
    eps = np.atleast_2d(np.asarray(eps_batch, dtype=float))
    thetas = reparam_sample_cholesky(params, eps)
    G = model.grad_h(thetas) - cholesky_grad_logq(params, thetas)
    S = eps.shape[0]
    grad_mu = G.mean(axis=0)
    grad_L = vech((G.T @ eps) / S)
    h = model.h(thetas) - cholesky_logq(params, thetas)
    return grad_mu, grad_L, h


class GaussianCholeskyFamily:
    def __init__(self, d: int, L0_scale: float = 0.1):
        self.d = d
        self.L0_scale = L0_scale
        self.dim_lambda = d + d * (d + 1) // 2

    def params(self, lam) -> GaussianCholeskyParams:
        return GaussianCholeskyParams.from_lambda(lam, self.d)

    def initial_lambda(self, rng, init_method="random"):
        if init_method != "random":
            raise ValueError("custom initialization requires an explicit lambda0")
        mu = rng.normal(0.0, 0.01, size=self.d)
        return np.concatenate([mu, vech(self.L0_scale * np.eye(self.d))])

    def project(self, lam):
        return np.asarray(lam, dtype=float)

    def sample(self, lam, rng, S):
        return reparam_sample_cholesky(self.params(lam), rng.standard_normal((S, self.d)))

    def log_q(self, lam, thetas):
        return cholesky_logq(self.params(lam), thetas)

    def draw_eps(self, rng, S):
        return rng.standard_normal((S, self.d))

    def reparam_gradient(self, model, lam, eps):
        g_mu, g_L, h = reparam_gradient_cholesky(model, self.params(lam), eps)
        return np.concatenate([g_mu, g_L]), h


def run_cholesky_gvb(model, cfg: TrainerConfig, rng=None, lambda0=None) -> FitResult:
    """Cholesky GVB: reparameterization gradients with adaptive learning."""
    family = GaussianCholeskyFamily(model.dim)
    return run_ffvb(model, family, cfg, Strategy.REPARAM_ADAPTIVE, rng=rng, lambda0=lambda0)


# ---------------------------------------------------------------------------
# factor family


@dataclass(frozen=True)
class GaussianFactorParams:
    mu: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mu)

    @property
    def cov(self) -> np.ndarray:
        """Dense covariance; for tests and small d only."""
        return np.outer(self.b, self.b) + np.diag(self.c ** 2)

    def to_lambda(self) -> np.ndarray:
        return np.concatenate([self.mu, self.b, self.c])

    @classmethod
    def from_lambda(cls, lam) -> "GaussianFactorParams":
        lam = np.asarray(lam, dtype=float)
        if lam.ndim != 1 or len(lam) % 3:
            raise ValueError(f"factor lambda must have length 3d, got {lam.shape}")
        d = len(lam) // 3
        return cls(lam[:d].copy(), lam[d:2 * d].copy(), lam[2 * d:].copy())


def _check_c(c):
    if np.any(c == 0):
        raise DomainError("factor scales c must be non-zero")


def factor_sample(params: GaussianFactorParams, eps1, eps2) -> np.ndarray:
    """theta = mu + eps1 b + c * eps2; eps1 scalar or (S,), eps2 (d,) or (S, d)."""
    eps1 = np.asarray(eps1, dtype=float)
    eps2 = np.asarray(eps2, dtype=float)
    if eps1.ndim == 0:
        return params.mu + eps1 * params.b + params.c * eps2
    return params.mu + eps1[:, None] * params.b + params.c * eps2


def factor_logq(params: GaussianFactorParams, theta):
    """log N(theta; mu, b b^T + diag(c^2)) in O(d) per point."""
    _check_c(params.c)
    theta = np.asarray(theta, dtype=float)
    r = np.atleast_2d(theta) - params.mu
    c2 = params.c ** 2
    w = params.b / c2
    kappa = float(np.sum(params.b ** 2 / c2))
    proj = r @ w
    out = (
        -0.5 * params.dim * _LOG_2PI
        - 0.5 * float(np.sum(np.log(c2)))
        - 0.5 * math.log1p(kappa)
        - 0.5 * np.sum(r * r / c2, axis=1)
        + proj * proj / (2.0 * (1.0 + kappa))
    )
    return float(out[0]) if theta.ndim == 1 else out


def factor_grad_logq(params: GaussianFactorParams, theta):
    """-Sigma^{-1}(theta - mu) through the Woodbury identity, O(d) per point."""
    _check_c(params.c)
    theta = np.asarray(theta, dtype=float)
    r = np.atleast_2d(theta) - params.mu
    c2 = params.c ** 2
    w = params.b / c2
    kappa = float(np.sum(params.b ** 2 / c2))
    out = -r / c2 + ((r @ w) / (1.0 + kappa))[:, None] * w
    return out[0] if theta.ndim == 1 else out


def reparam_gradient_factor(model, params: GaussianFactorParams, eps1, eps2):
    """Stacked (mu, b, c) gradient blocks and the h_lambda values of the batch."""
    eps1 = np.asarray(eps1, dtype=float).reshape(-1)
    eps2 = np.atleast_2d(np.asarray(eps2, dtype=float))
    thetas = factor_sample(params, eps1, eps2)
    G = model.grad_h(thetas) - factor_grad_logq(params, thetas)
    grad = np.concatenate([
        G.mean(axis=0),
        (eps1[:, None] * G).mean(axis=0),
        (eps2 * G).mean(axis=0),
    ])
    h = model.h(thetas) - factor_logq(params, thetas)
    return grad, h


def nagvac_v1(b, c) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    return c ** 2 - 2.0 * b ** 2 * c ** -4.0


def nagvac_natural_gradient(b, c, g) -> np.ndarray:
    """Closed-form O(d) natural gradient for the factor family."""
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    g = np.asarray(g, dtype=float)
    d = len(b)
    if g.shape != (3 * d,) or c.shape != (d,):
        raise ValueError(f"expected b, c of length d and g of length 3d; got {b.shape}, {c.shape}, {g.shape}")
    _check_c(c)
    g1, g2, g3 = g[:d], g[d:2 * d], g[2 * d:]
    c2 = c * c
    rank_one = 2.0 * b * b / (c2 * c2)
    v1 = c2 - rank_one
    if np.any(np.abs(v1) <= 1e-12 * (c2 + rank_one)):
        raise DegenerateFactorError("v1 has a zero entry; re-initialize b and c")
    v2 = b * b / (c2 * c)
    kappa1 = float(np.sum(b * b / c2))
    if kappa1 < 1e-12:
        raise DegenerateFactorError(
            f"kappa1={kappa1:.3g} is too small (b is numerically zero); re-initialize b"
        )
    kappa2 = 0.5 / (1.0 + float(np.sum(v2 * v2 / v1)))
    u = v2 / v1
    return np.concatenate([
        (g1 @ b) * b + c2 * g1,
        (1.0 + kappa1) / (2.0 * kappa1) * ((g2 @ b) * b + c2 * g2),
        0.5 * g3 / v1 + kappa2 * (u @ g3) * u,
    ])


def factor_natural_gradient(b, c, g) -> np.ndarray:
    """Natural gradient under the exact (mu, b, c) diagonal blocks of the Fisher matrix.

    Cross-blocks are ignored, as in the closed form above, but each block is
    inverted exactly in O(d) with Sherman-Morrison:

        I_mumu = Sigma^{-1}
        I_bb   = k/(1+k) Sigma^{-1} + w w^T / (1+k)^2,          w = b / c^2
        I_cc   = 2 C^{-1} [diag(1 - 2p) + p p^T] C^{-1},                   p = (b/c)^2 / (1+k)

    with k = sum(b^2/c^2).
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    g = np.asarray(g, dtype=float)
    d = len(b)
    if g.shape != (3 * d,) or c.shape != (d,):
        raise ValueError(f"expected b, c of length d and g of length 3d; got {b.shape}, {c.shape}, {g.shape}")
    _check_c(c)
    g1, g2, g3 = g[:d], g[d:2 * d], g[2 * d:]
    c2 = c * c
    x = b * b / c2
    kappa = float(np.sum(x))
    if kappa < 1e-12:
        raise DegenerateFactorError(
            f"kappa1={kappa:.3g} is too small (b is numerically zero); re-initialize b"
        )
    sigma_g1 = (g1 @ b) * b + c2 * g1
    sigma_g2 = (g2 @ b) * b + c2 * g2
    nat_b = (1.0 + kappa) / kappa * sigma_g2 - (1.0 + kappa) ** 2 / (2.0 * kappa ** 2) * (b @ g2) * b

    p = x / (1.0 + kappa)
    a = 1.0 - 2.0 * p
    if np.any(np.abs(a) < 1e-12):
        raise DegenerateFactorError("c-block of the Fisher matrix is numerically singular")
    r = c * g3
    pa = p / a
    denom = 1.0 + float(p @ pa)
    nat_c = 0.5 * c * (r / a - (pa @ r) / denom * pa)
    return np.concatenate([sigma_g1, nat_b, nat_c])


class GaussianFactorFamily:
    def __init__(self, d: int, b0_sd: float = 0.01, c0: float = 0.01, natural: str = "block"):
        if natural not in ("block", "printed"):
            raise ValueError(f"natural must be 'block' or 'printed', got {natural!r}")
        self.d = d
        self.b0_sd = b0_sd
        self.c0 = c0
        self.natural = natural
        self.dim_lambda = 3 * d

    def initial_lambda(self, rng, init_method="random"):
        if init_method != "random":
            raise ValueError("custom initialization requires an explicit lambda0")
        mu = rng.normal(0.0, 0.01, size=self.d)
        b = rng.normal(0.0, self.b0_sd, size=self.d)
        b[b == 0] = self.b0_sd
        return np.concatenate([mu, b, np.full(self.d, self.c0)])

    def project(self, lam):
        return np.asarray(lam, dtype=float)

    def sample(self, lam, rng, S):
        p = GaussianFactorParams.from_lambda(lam)
        return factor_sample(p, rng.standard_normal(S), rng.standard_normal((S, self.d)))

    def log_q(self, lam, thetas):
        return factor_logq(GaussianFactorParams.from_lambda(lam), thetas)

    def draw_eps(self, rng, S):
        return rng.standard_normal(S), rng.standard_normal((S, self.d))

    def reparam_gradient(self, model, lam, eps):
        return reparam_gradient_factor(model, GaussianFactorParams.from_lambda(lam), *eps)

    def natural_gradient(self, lam, g):
        d = self.d
        fn = factor_natural_gradient if self.natural == "block" else nagvac_natural_gradient
        return fn(lam[d:2 * d], lam[2 * d:], g)


def run_nagvac(
    model,
    cfg: TrainerConfig,
    rng=None,
    validation_loss: Optional[Callable[[np.ndarray], float]] = None,
    lambda0=None,
    natural: str = "block",
) -> FitResult:
    """Factor-covariance GVB with momentum natural gradients.

    Patience counts iterations since the running minimum of
    ``validation_loss(lam)``; the iterate with the smallest loss is returned.
    The lower bound trace is still recorded for monitoring.

    ``natural`` selects the natural-gradient map: ``"block"`` uses
    ``factor_natural_gradient``, ``"printed"`` uses ``nagvac_natural_gradient``.
    """
    if validation_loss is None:
        raise ValueError("run_nagvac needs a validation_loss callback")
    rng = make_rng(cfg.seed if rng is None else rng)
    family = GaussianFactorFamily(model.dim, natural=natural)
    d = model.dim
    S = cfg.num_samples
    if lambda0 is None:
        lam = family.initial_lambda(rng, cfg.init_method)
    else:
        lam = np.array(lambda0, dtype=float)
        if lam.shape != (3 * d,):
            raise ValueError(f"lambda0 must have length {3 * d}")
    diagnostics = []
    negative_v1 = False

    def nat_step(lam, g):
        nonlocal negative_v1
        if natural == "printed" and not negative_v1 and np.any(nagvac_v1(lam[d:2 * d], lam[2 * d:]) < 0):
            negative_v1 = True
            diagnostics.append("v1 has negative entries; natural gradient formulas evaluated as printed")
        return clip_gradient(family.natural_gradient(lam, g), cfg.gradient_max)

    g0, _ = family.reparam_gradient(model, lam, family.draw_eps(rng, S))
    _check_finite(g0, "gradient", iteration=0)
    momentum = nat_step(lam, g0)

    trace = LbTrace(cfg.window_size)
    losses = []
    history = []
    best_loss = math.inf
    patience = 0
    termination = Termination.MAX_ITER
    t = 0
    while t < cfg.max_iter:
        g, h = family.reparam_gradient(model, lam, family.draw_eps(rng, S))
        _check_finite(h, "h_lambda", iteration=t)
        _check_finite(g, "gradient", iteration=t)
        momentum = momentum_update(momentum, nat_step(lam, g), cfg.momentum_weight)
        alpha_t = learning_rate(t, cfg.learning_rate, cfg.tau)

        loss = float(validation_loss(lam))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite validation loss at iteration {t}")
        losses.append(loss)
        history.append(lam)
        trace.append(np.mean(h))
        if loss <= best_loss:
            best_loss = loss
            patience = 0
        else:
            patience += 1

        lam = lam + alpha_t * momentum
        _check_finite(lam, "variational parameters", iteration=t)
        t += 1
        if patience >= cfg.max_patience:
            termination = Termination.PATIENCE
            break

    best = int(np.argmin(losses))
    logger.debug("nagvac stopped after %d iterations (%s)", t, termination.value)
    return FitResult(
        lambda_best=np.array(history[best]),
        lambda_final=np.array(lam),
        trace=trace,
        iterations=t,
        termination=termination,
        best_index=best,
        loss=losses,
        diagnostics=diagnostics,
    )
