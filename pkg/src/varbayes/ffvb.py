"""Fixed-form VB stochastic optimizer.

The engine works on a flat variational parameter vector ``lam`` and a
*family* object that knows how to sample from q_lam and differentiate it.
A family used with the score-function strategies provides

    sample(lam, rng, S) -> thetas (S, d)
    log_q(lam, thetas) -> (S,)
    grad_lambda_log_q(lam, thetas) -> (S, d_lam)
    h_lambda(model, lam, thetas) -> (S,)      # optional, default h - log q
    fisher(lam) -> (d_lam, d_lam)              # natural-gradient strategies

and for the reparameterization strategies

    draw_eps(rng, S) -> eps
    reparam_gradient(model, lam, eps) -> (grad (d_lam,), h_lambda values (S,))
    natural_gradient(lam, g)                   # ReparamNatural only

plus ``initial_lambda(rng, init_method)`` and ``project(lam)``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from varbayes.distributions import make_rng

logger = logging.getLogger(__name__)

EPS_DIV = 1e-8


class NumericalError(FloatingPointError):
    """Non-finite quantity encountered inside an optimizer loop."""


class Strategy(enum.Enum):
    CV_ADAPTIVE = "cv-adaptive"
    CV_NATURAL = "cv-natural"
    REPARAM_ADAPTIVE = "reparam-adaptive"
    REPARAM_NATURAL = "reparam-natural"

    @property
    def uses_reparam(self) -> bool:
        return self in (Strategy.REPARAM_ADAPTIVE, Strategy.REPARAM_NATURAL)

    @property
    def uses_natural(self) -> bool:
        return self in (Strategy.CV_NATURAL, Strategy.REPARAM_NATURAL)


class Termination(enum.Enum):
    PATIENCE = "patience"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class TrainerConfig:
    """Algorithmic controls; defaults follow the usual VBLab-style table."""

    num_samples: int = 50
    grad_weight1: float = 0.9
    grad_weight2: float = 0.9
    learning_rate: float = 0.002
    step_adaptive: Optional[int] = None  # None -> max_iter // 2
    window_size: int = 50
    max_patience: int = 20
    max_iter: int = 1000
    gradient_max: float = 10.0
    momentum_weight: float = 0.9
    seed: Optional[int] = None
    init_method: str = "random"

    def __post_init__(self):
        if not (0 < self.grad_weight1 < 1 and 0 < self.grad_weight2 < 1):
            raise ValueError("grad weights must lie in (0, 1)")
        if self.num_samples < 1 or self.window_size < 1 or self.max_patience < 1:
            raise ValueError("num_samples, window_size and max_patience must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.learning_rate <= 0 or self.gradient_max <= 0:
            raise ValueError("learning_rate and gradient_max must be > 0")
        if not 0 <= self.momentum_weight <= 1:
            raise ValueError("momentum_weight must lie in [0, 1]")
        if self.init_method not in ("random", "custom"):
            raise ValueError(f"init_method must be 'random' or 'custom', got {self.init_method!r}")

    @property
    def tau(self) -> int:
        if self.step_adaptive is None:
            return max(1, self.max_iter // 2)
        return self.step_adaptive

    def with_(self, **kwargs) -> "TrainerConfig":
        return replace(self, **kwargs)


@dataclass
class AdaptiveState:
    g_bar: np.ndarray
    v_bar: np.ndarray

    @classmethod
    def from_gradient(cls, g0):
        g0 = np.asarray(g0, dtype=float)
        return cls(g0.copy(), g0 * g0)


@dataclass
class LbTrace:
    """Raw lower-bound estimates and their trailing moving averages.

    ``smoothed[k]`` is the mean of ``raw[k : k + window]``.
    """

    window: int
    raw: list = field(default_factory=list)
    smoothed: list = field(default_factory=list)

    def append(self, value: float) -> Optional[float]:
        self.raw.append(float(value))
        if len(self.raw) >= self.window:
            avg = float(np.mean(self.raw[-self.window:]))
            self.smoothed.append(avg)
            return avg
        return None

    @property
    def best_index(self) -> Optional[int]:
        if not self.smoothed:
            return None
        return int(np.argmax(self.smoothed))


@dataclass
class FitResult:
    lambda_best: np.ndarray
    lambda_final: np.ndarray
    trace: LbTrace
    iterations: int
    termination: Termination
    best_index: Optional[int]
    loss: Optional[list] = None  # validation losses (NAGVAC)
    diagnostics: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# estimator building blocks


def _h_lambda(family, model, lam, thetas):
    custom = getattr(family, "h_lambda", None)
    if custom is not None:
        return custom(model, lam, thetas)
    # non-finite values are reported by _check_finite with context
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        return model.h(thetas) - family.log_q(lam, thetas)


def _check_finite(values, what, thetas=None, iteration=None):
    values = np.asarray(values)
    if np.all(np.isfinite(values)):
        return
    msg = f"non-finite {what}"
    if iteration is not None:
        msg += f" at iteration {iteration}"
    if thetas is not None and values.ndim == 1 and len(values) == len(thetas):
        bad = np.flatnonzero(~np.isfinite(values))[0]
        msg += f"; offending theta={np.asarray(thetas)[bad]!r}"
    else:
        msg += f": {values!r}"
    raise NumericalError(msg)


def estimate_lb(family, model, lam, S, rng) -> float:
    """Monte Carlo lower bound: mean of h_lam(theta_s), theta_s ~ q_lam."""
    lam = np.asarray(lam, dtype=float)
    thetas = family.sample(lam, rng, S)
    h = _h_lambda(family, model, lam, thetas)
    _check_finite(h, "h_lambda", thetas)
    return float(np.mean(h))


def score_gradient(scores, h_values, c=None) -> np.ndarray:
    """(1/S) sum_s score_s * (h_s - c), componentwise in c.

    ``scores`` is the (S, d_lam) array of grad_lambda log q at the draws.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    h_values = np.asarray(h_values, dtype=float).reshape(-1)
    if scores.shape[0] != h_values.shape[0]:
        raise ValueError(
            f"{scores.shape[0]} score rows but {h_values.shape[0]} h values"
        )
    if c is None:
        c = np.zeros(scores.shape[1])
    c = np.asarray(c, dtype=float)
    if c.shape != (scores.shape[1],):
        raise ValueError(f"control variate length {c.shape} != {scores.shape[1]}")
    return np.mean(scores * (h_values[:, None] - c[None, :]), axis=0)


def score_gradient_family(family, model, lam, thetas, c=None) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    scores = family.grad_lambda_log_q(lam, thetas)
    h = _h_lambda(family, model, lam, thetas)
    return score_gradient(scores, h, c)


def update_control_variates(scores, h_values):
    """Per-coordinate optimal constant c_i = cov(score_i * h, score_i) / var(score_i).

    Returns ``(c, degenerate)`` where ``degenerate`` flags coordinates whose
    score had zero sample variance (their c_i is set to 0).
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    h_values = np.asarray(h_values, dtype=float).reshape(-1)
    if scores.shape[0] < 2:
        raise ValueError("control variates need at least 2 samples")
    prod = scores * h_values[:, None]
    sc = scores - scores.mean(axis=0)
    cov = np.sum((prod - prod.mean(axis=0)) * sc, axis=0) / (len(h_values) - 1)
    var = np.sum(sc * sc, axis=0) / (len(h_values) - 1)
    degenerate = var <= 0
    c = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, var))
    return c, degenerate


# ---------------------------------------------------------------------------
# step rules


def learning_rate(t: int, eps0: float, tau: int) -> float:
    if t <= tau:
        return eps0
    return eps0 * tau / t


def adaptive_step(state: AdaptiveState, g_t, alpha_t, beta1, beta2):
    """Moving-average scaled step. Returns ``(delta, new_state)``."""
    g_t = np.asarray(g_t, dtype=float)
    g_bar = beta1 * state.g_bar + (1.0 - beta1) * g_t
    v_bar = beta2 * state.v_bar + (1.0 - beta2) * g_t * g_t
    delta = alpha_t * g_bar / np.sqrt(v_bar + EPS_DIV)
    return delta, AdaptiveState(g_bar, v_bar)


def natural_gradient(fisher, g) -> np.ndarray:
    """Solve fisher @ x = g for symmetric positive definite ``fisher``."""
    fisher = np.asarray(fisher, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(fisher, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as err:
        raise np.linalg.LinAlgError(f"Fisher matrix is not positive definite: {err}") from err
    return scipy.linalg.cho_solve(factor, np.asarray(g, dtype=float))


def momentum_update(m, nat_grad, alpha_m) -> np.ndarray:
    return alpha_m * np.asarray(m, dtype=float) + (1.0 - alpha_m) * np.asarray(nat_grad, dtype=float)


def clip_gradient(g, threshold) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm)
    return g


def check_stop(smoothed, patience: int, max_patience: int):
    """Patience rule on the smoothed lower bound sequence.

    ``smoothed`` holds every moving average computed so far, the newest last.
    Returns ``(patience, stop)``.
    """
    if not smoothed:
        return patience, False
    if smoothed[-1] >= max(smoothed):
        patience = 0
    else:
        patience += 1
    return patience, patience >= max_patience


# ---------------------------------------------------------------------------
# driver


def _sample_gradient(family, model, lam, strategy, rng, S, c):
    """One batch: returns (raw gradient, h_lambda values, scores or None)."""
    if strategy.uses_reparam:
        eps = family.draw_eps(rng, S)
        grad, h = family.reparam_gradient(model, lam, eps)
        return grad, h, None, eps
    thetas = family.sample(lam, rng, S)
    scores = family.grad_lambda_log_q(lam, thetas)
    h = _h_lambda(family, model, lam, thetas)
    return score_gradient(scores, h, c), h, scores, thetas


def _natural(family, lam, g):
    custom = getattr(family, "natural_gradient", None)
    if custom is not None:
        return custom(lam, g)
    return natural_gradient(family.fisher(lam), g)


def run_ffvb(model, family, cfg: TrainerConfig, strategy, rng=None, lambda0=None) -> FitResult:
    """Stochastic-gradient lower bound ascent with patience stopping.

    Returns the iterate at the largest smoothed lower bound.
    """
    strategy = Strategy(strategy)
    rng = make_rng(cfg.seed if rng is None else rng)
    S = cfg.num_samples
    if lambda0 is None:
        lam = family.initial_lambda(rng, cfg.init_method)
    else:
        lam = family.project(np.array(lambda0, dtype=float))
    diagnostics = []

    # initialization block
    c = None
    g0, h0, scores0, draws0 = _sample_gradient(family, model, lam, strategy, rng, S, c)
    _check_finite(h0, "h_lambda", draws0 if scores0 is not None else None, iteration=0)
    if scores0 is not None:
        c, flags = update_control_variates(scores0, h0)
        if flags.any():
            diagnostics.append(f"init: zero score variance in coordinates {np.flatnonzero(flags).tolist()}")
    if strategy.uses_natural:
        momentum = clip_gradient(_natural(family, lam, g0), cfg.gradient_max)
    else:
        adaptive = AdaptiveState.from_gradient(clip_gradient(g0, cfg.gradient_max))

    trace = LbTrace(cfg.window_size)
    history = []  # iterate attached to each raw LB entry
    patience = 0
    termination = Termination.MAX_ITER
    t = 0
    while t < cfg.max_iter:
        g, h, scores, draws = _sample_gradient(family, model, lam, strategy, rng, S, c)
        _check_finite(h, "h_lambda", draws if scores is not None else None, iteration=t)
        _check_finite(g, "gradient", iteration=t)
        if scores is not None:
            c, flags = update_control_variates(scores, h)
            if flags.any():
                diagnostics.append(f"iter {t}: zero score variance in {np.flatnonzero(flags).tolist()}")

        alpha_t = learning_rate(t, cfg.learning_rate, cfg.tau)
        if strategy.uses_natural:
            nat = clip_gradient(_natural(family, lam, g), cfg.gradient_max)
            momentum = momentum_update(momentum, nat, cfg.momentum_weight)
            delta = alpha_t * momentum
        else:
            delta, adaptive = adaptive_step(
                adaptive, clip_gradient(g, cfg.gradient_max), alpha_t,
                cfg.grad_weight1, cfg.grad_weight2,
            )

        history.append(lam)
        smoothed = trace.append(np.mean(h))
        lam = family.project(lam + delta)
        _check_finite(lam, "variational parameters", iteration=t)

        if smoothed is not None:
            patience, stop = check_stop(trace.smoothed, patience, cfg.max_patience)
            if stop:
                termination = Termination.PATIENCE
                t += 1
                break
        t += 1

    best = trace.best_index
    if best is None:
        lam_best = lam
    else:
        lam_best = history[best + cfg.window_size - 1]
    logger.debug("ffvb %s stopped after %d iterations (%s)", strategy.value, t, termination.value)
    return FitResult(
        lambda_best=np.array(lam_best),
        lambda_final=np.array(lam),
        trace=trace,
        iterations=t,
        termination=termination,
        best_index=best,
        diagnostics=diagnostics,
    )

