"""The six scalar distribution families used by the VB algorithms.

Parameterizations:

* ``Normal(mean, variance)``
* ``InverseGamma(shape, rate)``: density proportional to x**(-shape-1) exp(-rate/x),
  so that E[1/X] = shape/rate
* ``Gamma(shape, rate)``
* ``Exponential(rate)``
* ``InverseGaussian(location, scale)``: sqrt(scale/(2 pi x^3)) exp(-scale (x-loc)^2 / (2 loc^2 x)),
  so that E[X] = location and E[1/X] = 1/location + 1/scale
* ``Laplace(location, rate)``: rate/2 exp(-rate |x - location|)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from varbayes.special import DomainError, digamma, lgamma, special_fn, trigamma

__all__ = [
    "DistSpec",
    "DomainError",
    "Kind",
    "MomentSet",
    "ParameterError",
    "digamma",
    "lgamma",
    "log_pdf",
    "make_rng",
    "moments",
    "sample",
    "special_fn",
    "trigamma",
]

_LOG_2PI = math.log(2.0 * math.pi)


class ParameterError(ValueError):
    """Invalid distribution or variational parameters."""


class Kind(enum.Enum):
    NORMAL = "normal"
    INVERSE_GAMMA = "inverse_gamma"
    GAMMA = "gamma"
    EXPONENTIAL = "exponential"
    INVERSE_GAUSSIAN = "inverse_gaussian"
    LAPLACE = "laplace"


# number of parameters and which of them must be strictly positive
_LAYOUT = {
    Kind.NORMAL: (2, (1,)),
    Kind.INVERSE_GAMMA: (2, (0, 1)),
    Kind.GAMMA: (2, (0, 1)),
    Kind.EXPONENTIAL: (1, (0,)),
    Kind.INVERSE_GAUSSIAN: (2, (0, 1)),
    Kind.LAPLACE: (2, (1,)),
}


@dataclass(frozen=True)
class DistSpec:
    kind: Kind
    params: tuple

    def __post_init__(self):
        nparams, positive = _LAYOUT[self.kind]
        params = tuple(float(p) for p in self.params)
        if len(params) != nparams:
            raise ParameterError(
                f"{self.kind.value} takes {nparams} parameters, got {len(params)}"
            )
        if not all(math.isfinite(p) for p in params):
            raise ParameterError(f"{self.kind.value} parameters must be finite: {params}")
        for i in positive:
            if params[i] <= 0:
                raise ParameterError(
                    f"{self.kind.value} parameter {i} must be > 0, got {params[i]}"
                )
        object.__setattr__(self, "params", params)

    @classmethod
    def normal(cls, mean, variance):
        return cls(Kind.NORMAL, (mean, variance))

    @classmethod
    def inverse_gamma(cls, shape, rate):
        return cls(Kind.INVERSE_GAMMA, (shape, rate))

    @classmethod
    def gamma(cls, shape, rate):
        return cls(Kind.GAMMA, (shape, rate))

    @classmethod
    def exponential(cls, rate):
        return cls(Kind.EXPONENTIAL, (rate,))

    @classmethod
    def inverse_gaussian(cls, location, scale):
        return cls(Kind.INVERSE_GAUSSIAN, (location, scale))

    @classmethod
    def laplace(cls, location, rate):
        return cls(Kind.LAPLACE, (location, rate))

    def support(self) -> tuple[float, float]:
        if self.kind in (Kind.NORMAL, Kind.LAPLACE):
            return (-math.inf, math.inf)
        return (0.0, math.inf)


@dataclass(frozen=True)
class MomentSet:
    """First moments; ``None`` marks a moment that does not exist."""

    mean: Optional[float]
    variance: Optional[float]
    inverse_mean: Optional[float] = None


def make_rng(seed=None) -> np.random.Generator:
    """Seedable generator used by every stochastic routine."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def log_pdf(dist: DistSpec, x):
    """Exact log density; ``-inf`` outside the support."""
    x = np.asarray(x, dtype=float)
    p = dist.params
    kind = dist.kind
    if kind is Kind.NORMAL:
        m, v = p
        out = -0.5 * (_LOG_2PI + math.log(v)) - 0.5 * (x - m) ** 2 / v
    elif kind is Kind.LAPLACE:
        loc, rate = p
        out = math.log(rate / 2.0) - rate * np.abs(x - loc)
    else:
        pos = x > 0
        xs = np.where(pos, x, 1.0)
        if kind is Kind.INVERSE_GAMMA:
            a, b = p
            out = a * math.log(b) - lgamma(a) - (a + 1.0) * np.log(xs) - b / xs
        elif kind is Kind.GAMMA:
            a, b = p
            out = a * math.log(b) - lgamma(a) + (a - 1.0) * np.log(xs) - b * xs
        elif kind is Kind.EXPONENTIAL:
            (rate,) = p
            out = math.log(rate) - rate * xs
        else:
            mu, lam = p
            out = (
                0.5 * (math.log(lam) - _LOG_2PI - 3.0 * np.log(xs))
                - lam * (xs - mu) ** 2 / (2.0 * mu * mu * xs)
            )
        out = np.where(pos, out, -np.inf)
    if out.ndim == 0:
        return float(out)
    return out


def sample(dist: DistSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` i.i.d. draws."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    p = dist.params
    kind = dist.kind
    if kind is Kind.NORMAL:
        return rng.normal(p[0], math.sqrt(p[1]), size=n)
    if kind is Kind.INVERSE_GAMMA:
        return p[1] / rng.standard_gamma(p[0], size=n)
    if kind is Kind.GAMMA:
        return rng.standard_gamma(p[0], size=n) / p[1]
    if kind is Kind.EXPONENTIAL:
        return rng.exponential(1.0 / p[0], size=n)
    if kind is Kind.INVERSE_GAUSSIAN:
        return rng.wald(p[0], p[1], size=n)
    return rng.laplace(p[0], 1.0 / p[1], size=n)


def moments(dist: DistSpec) -> MomentSet:
    p = dist.params
    kind = dist.kind
    if kind is Kind.NORMAL:
        return MomentSet(p[0], p[1], None)
    if kind is Kind.INVERSE_GAMMA:
        a, b = p
        mean = b / (a - 1.0) if a > 1 else None
        var = b * b / ((a - 1.0) ** 2 * (a - 2.0)) if a > 2 else None
        return MomentSet(mean, var, a / b)
    if kind is Kind.GAMMA:
        a, b = p
        inv = b / (a - 1.0) if a > 1 else None
        return MomentSet(a / b, a / (b * b), inv)
    if kind is Kind.EXPONENTIAL:
        (rate,) = p
        return MomentSet(1.0 / rate, 1.0 / rate**2, None)
    if kind is Kind.INVERSE_GAUSSIAN:
        mu, lam = p
        return MomentSet(mu, mu**3 / lam, 1.0 / mu + 1.0 / lam)
    loc, rate = p
    return MomentSet(loc, 2.0 / rate**2, None)
