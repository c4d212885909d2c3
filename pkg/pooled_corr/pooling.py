"""
Study pooling on the Fisher-z and correlation scales.

Heterogeneity is estimated with the Sidik-Jonkman two-step estimator on the
z-scale; Hunter-Schmidt pooling works directly with the correlations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InsufficientStudiesError, InvalidInputError
from .schemas import CLAMP_BOUND, PooledZ, QuadratureSpec, StudySummary, ZStudy
from .stats_core import clamp_r, integral_z_to_r, normal_quantile

logger = logging.getLogger(__name__)


def to_z_scale(studies: Sequence[StudySummary], bound: float = CLAMP_BOUND) -> List[ZStudy]:
    out = []
    for i, study in enumerate(studies):
        if study.n < 4:
            raise InvalidInputError(f"study {i + 1}: n={study.n} is below the minimum of 4")
        r = clamp_r(study.r, bound)
        if r != study.r:
            logger.debug(f"study {i + 1}: r={study.r} clamped to {r} before atanh")
        out.append(ZStudy(z=math.atanh(r), var_z=1.0 / (study.n - 3), n=study.n))
    return out


def z_arrays(zstudies: Sequence[ZStudy]) -> Tuple[np.ndarray, np.ndarray]:
    z = np.fromiter((s.z for s in zstudies), dtype=float, count=len(zstudies))
    v = np.fromiter((s.var_z for s in zstudies), dtype=float, count=len(zstudies))
    return z, v


def sj_tau2(zstudies: Sequence[ZStudy]) -> float:
    """Sidik-Jonkman two-step estimate of the between-study variance."""
    k = len(zstudies)
    if k < 2:
        raise InsufficientStudiesError("SJ estimator", k, 2)
    z, v = z_arrays(zstudies)
    if np.all(z == z[0]):
        return 0.0
    tau2_0 = float(np.mean((z - z.mean()) ** 2))
    # weights are the inverse of the variance ratios (v_i + tau0^2) / tau0^2
    w = tau2_0 / (v + tau2_0)
    mu = float(np.dot(w, z) / w.sum())
    return max(0.0, float(np.dot(w, (z - mu) ** 2)) / (k - 1))


def iv_pooled(zstudies: Sequence[ZStudy], tau2: float) -> PooledZ:
    if not zstudies:
        raise InvalidInputError("cannot pool an empty set of studies")
    if tau2 < 0:
        raise InvalidInputError(f"negative heterogeneity variance: {tau2}")
    z, v = z_arrays(zstudies)
    w = 1.0 / (v + tau2)
    return PooledZ(z_bar=float(np.dot(w, z) / w.sum()), weights=w, tau2=float(tau2))


def hs_pooled_r(studies: Sequence[StudySummary]) -> float:
    if not studies:
        raise InvalidInputError("cannot pool an empty set of studies")
    n = np.array([s.n for s in studies], dtype=float)
    r = np.array([s.r for s in studies], dtype=float)
    return float(np.dot(n, r) / n.sum())


def pooled_ipd_ci(r_pool: float, n_total: int, alpha: float = 0.05) -> Tuple[float, float]:
    """Asymptotic interval r +/- u (1 - r^2) / sqrt(N) for pooled raw data."""
    if n_total < 4:
        raise InvalidInputError(f"pooled sample size must be at least 4, got {n_total}")
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if abs(r_pool) > 1.0:
        raise InvalidInputError(f"correlation outside [-1, 1]: {r_pool}")
    half = normal_quantile(1.0 - alpha / 2.0) * (1.0 - r_pool ** 2) / math.sqrt(n_total)
    return max(-1.0, r_pool - half), min(1.0, r_pool + half)


@dataclass(frozen=True)
class PoolingSummary:
    k: int
    n_total: int
    r_fe: float
    r_re: float
    z_bar_fe: float
    z_bar_re: float
    tau2: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_total": self.n_total,
            "r_fe": self.r_fe,
            "r_re": self.r_re,
            "z_bar_fe": self.z_bar_fe,
            "z_bar_re": self.z_bar_re,
            "tau2_sj": self.tau2,
        }


def summarize(studies: Sequence[StudySummary], bound: float = CLAMP_BOUND,
              quadrature: QuadratureSpec = QuadratureSpec()) -> PoolingSummary:
    """Fixed- and random-effects point estimates for one set of studies."""
    zstudies = to_z_scale(studies, bound)
    tau2 = sj_tau2(zstudies) if len(zstudies) >= 2 else 0.0
    fixed = iv_pooled(zstudies, 0.0)
    random = iv_pooled(zstudies, tau2)
    return PoolingSummary(
        k=len(studies),
        n_total=sum(s.n for s in studies),
        r_fe=hs_pooled_r(studies),
        r_re=integral_z_to_r(random.z_bar, tau2, quadrature),
        z_bar_fe=fixed.z_bar,
        z_bar_re=random.z_bar,
        tau2=tau2,
    )
