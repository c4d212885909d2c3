"""
Scalar numerical primitives for correlation meta-analysis.

Pearson correlation, Fisher transforms, normal and Student-t quantiles,
composite Simpson quadrature, the integral z-to-r transform and the
truncated-normal mean shift used by the simulation models.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from cachetools import cached
from scipy import integrate, special, stats

from .cache import quantile_cache
from .errors import DegenerateVarianceError, InvalidInputError
from .schemas import CLAMP_BOUND, QuadratureSpec

# Below this z-scale heterogeneity the normal mixing density is a point mass
TAU2_EPS = 1e-12


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample (Pearson) correlation of paired observations."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < 3:
        raise InvalidInputError(f"need at least 3 pairs, got {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise InvalidInputError("constant sample, correlation undefined")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def clamp_r(r: float, bound: float = CLAMP_BOUND) -> float:
    if not 0.0 < bound < 1.0:
        raise InvalidInputError(f"clamp bound must lie in (0, 1), got {bound}")
    return min(max(r, -bound), bound)


def fisher_z(r: float, bound: Optional[float] = None) -> float:
    """atanh(r); pass ``bound`` to clamp extreme correlations first."""
    if abs(r) > 1.0:
        raise InvalidInputError(f"correlation outside [-1, 1]: {r}")
    if bound is not None:
        r = clamp_r(r, bound)
    if abs(r) >= 1.0:
        raise InvalidInputError("Fisher z of |r| = 1 is infinite; clamp first")
    return math.atanh(r)


def inv_fisher(z: float) -> float:
    return math.tanh(z)


def _check_probability(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"probability must lie in (0, 1), got {p}")


def normal_quantile(p: float) -> float:
    _check_probability(p)
    return float(special.ndtri(p))


@cached(quantile_cache)
def t_quantile(p: float, df: int) -> float:
    _check_probability(p)
    if df < 1:
        raise InvalidInputError(f"degrees of freedom must be >= 1, got {df}")
    return float(special.stdtrit(df, p))


def simpson_integrate(f: Callable, a: float, b: float,
                      spec: QuadratureSpec = QuadratureSpec()) -> float:
    """Composite Simpson rule over ``spec.subintervals`` equal panels.

    ``f`` is evaluated once on the whole node vector, so it should accept
    numpy arrays.
    """
    n = spec.subintervals
    if n <= 0 or n % 2:
        raise InvalidInputError(f"Simpson's rule needs a positive even panel count, got {n}")
    if not a < b:
        raise InvalidInputError(f"integration bounds out of order: a={a}, b={b}")
    x = np.linspace(a, b, n + 1)
    y = np.broadcast_to(np.asarray(f(x), dtype=float), x.shape)
    return float(integrate.simpson(y, x=x))


def integral_z_to_r(mu_z: float, tau_z2: float,
                    spec: QuadratureSpec = QuadratureSpec()) -> float:
    """E[tanh(Z)] for Z ~ N(mu_z, tau_z2), integrated over mu_z +/- m*tau."""
    if tau_z2 < 0:
        raise InvalidInputError(f"negative heterogeneity variance: {tau_z2}")
    if tau_z2 < TAU2_EPS:
        return math.tanh(mu_z)
    tau = math.sqrt(tau_z2)
    half = spec.half_width_multiplier * tau

    def integrand(t):
        return np.tanh(t) * stats.norm.pdf(t, loc=mu_z, scale=tau)

    return simpson_integrate(integrand, mu_z - half, mu_z + half, spec)


def truncnorm_mean_shift(mu: float, sigma: float, a: float, b: float) -> float:
    """Bias of the mean of N(mu, sigma^2) truncated to [a, b] relative to mu."""
    if sigma <= 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    if not a < b:
        raise InvalidInputError(f"truncation bounds out of order: a={a}, b={b}")
    d1 = (a - mu) / sigma
    d2 = (b - mu) / sigma
    mass = float(stats.norm.cdf(d2) - stats.norm.cdf(d1))
    if mass <= np.finfo(float).tiny:
        raise DegenerateVarianceError(
            f"truncation interval [{a}, {b}] carries no mass under N({mu}, {sigma}^2)"
        )
    return float(sigma * (stats.norm.pdf(d1) - stats.norm.pdf(d2)) / mass)


def truncnorm_bias_grid(mus: Sequence[float], sigmas: Sequence[float],
                        a: float = -CLAMP_BOUND, b: float = CLAMP_BOUND) -> pd.DataFrame:
    """Mean-shift table over a (mu, sigma) grid, one row per pair."""
    rows = [
        {"mu": float(mu), "sigma": float(sigma), "bias": truncnorm_mean_shift(mu, sigma, a, b)}
        for sigma in sigmas
        for mu in mus
    ]
    return pd.DataFrame(rows, columns=["mu", "sigma", "bias"])


def bias_corrected_r(r: float, n: int, bound: float = CLAMP_BOUND) -> float:
    """Add back the approximate small-sample bias r(1 - r^2) / (2(n - 1))."""
    if n < 4:
        raise InvalidInputError(f"study size must be at least 4, got {n}")
    if abs(r) > 1.0:
        raise InvalidInputError(f"correlation outside [-1, 1]: {r}")
    return clamp_r(r + r * (1.0 - r * r) / (2.0 * (n - 1)), bound)
