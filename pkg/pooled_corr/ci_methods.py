"""
Confidence intervals for a pooled correlation.

Every procedure reduces to a centre, a standard error, a quantile and a
back-transform; the variance estimators differ. z-scale methods share one
Sidik-Jonkman heterogeneity estimate for their weights and for the integral
back-transform.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateVarianceError, InsufficientStudiesError, InvalidInputError, PooledCorrError
from .pooling import hs_pooled_r, iv_pooled, pooled_ipd_ci, sj_tau2, to_z_scale, z_arrays
from .schemas import (
    ALL_METHODS,
    Backtransform,
    BootstrapSpec,
    CiMethod,
    CiOptions,
    CiResult,
    GammaMode,
    PooledZ,
    QuadratureSpec,
    StudySummary,
    ZStudy,
)
from .stats_core import bias_corrected_r, integral_z_to_r, normal_quantile, t_quantile

logger = logging.getLogger(__name__)


METHOD_MIN_K: Dict[CiMethod, int] = {
    CiMethod.HOVZ: 1,
    CiMethod.HS: 1,
    CiMethod.KH: 2,
    CiMethod.WBS1: 4,
    CiMethod.WBS2: 4,
    CiMethod.WBS3: 4,
    CiMethod.HC3: 2,
    CiMethod.HC4: 2,
}

WBS_GAMMA: Dict[CiMethod, GammaMode] = {
    CiMethod.WBS1: GammaMode.ONE,
    CiMethod.WBS2: GammaMode.KM1_OVER_KM3,
    CiMethod.WBS3: GammaMode.KM2_OVER_KM3,
}

HC_VARIANT: Dict[CiMethod, int] = {CiMethod.HC3: 3, CiMethod.HC4: 4}


# ---------------------------------------------------------------------------
# Variance estimators
# ---------------------------------------------------------------------------

def naive_z_variance(pooled: PooledZ) -> float:
    return 1.0 / pooled.total_weight


def _residuals(zstudies: Sequence[ZStudy], pooled: PooledZ) -> np.ndarray:
    z, _ = z_arrays(zstudies)
    if z.size != pooled.k:
        raise InvalidInputError(f"{z.size} studies but {pooled.k} pooling weights")
    return z - pooled.z_bar


def kh_variance(zstudies: Sequence[ZStudy], pooled: PooledZ) -> float:
    """Knapp-Hartung weighted residual variance of the pooled z."""
    k = len(zstudies)
    if k < 2:
        raise InsufficientStudiesError(CiMethod.KH.value, k, 2)
    eps = _residuals(zstudies, pooled)
    share = pooled.weights / pooled.total_weight
    return float(np.dot(share, eps ** 2)) / (k - 1)


def hc_variance(zstudies: Sequence[ZStudy], pooled: PooledZ, variant: int) -> float:
    """Leverage-adjusted sandwich variance, HC3 or HC4."""
    if variant not in (3, 4):
        raise InvalidInputError(f"unsupported HC variant: HC{variant}")
    k = len(zstudies)
    if k < 2:
        raise InsufficientStudiesError(f"HC{variant}", k, 2)
    eps = _residuals(zstudies, pooled)
    w = pooled.weights
    total = pooled.total_weight
    leverage = w / total
    if np.any(leverage >= 1.0):
        raise DegenerateVarianceError("a single study carries all the weight (leverage 1)")
    if variant == 3:
        delta = 2.0
    else:
        delta = np.minimum(4.0, leverage * k)  # x_jj / mean(x), mean leverage is 1/K
    meat = w ** 2 * eps ** 2 * (1.0 - leverage) ** (-delta)
    return float(meat.sum()) / total ** 2


def hs_variance(studies: Sequence[StudySummary], r_hs: float) -> float:
    """Osburn-Callender variance of the sample-size weighted mean r."""
    if not studies:
        raise InvalidInputError("cannot compute a variance for zero studies")
    n = np.array([s.n for s in studies], dtype=float)
    r = np.array([s.r for s in studies], dtype=float)
    return float(np.dot(n, (r - r_hs) ** 2) / n.sum()) / len(studies)


def gamma_factor(mode: GammaMode, k: int) -> float:
    if mode is GammaMode.ONE:
        return 1.0
    if k <= 3:
        raise InsufficientStudiesError(f"wild bootstrap {mode.value}", k, 4)
    if mode is GammaMode.KM1_OVER_KM3:
        return (k - 1) / (k - 3)
    return (k - 2) / (k - 3)


def _unit_bootstrap_variance(z: np.ndarray, resid: np.ndarray, share: np.ndarray,
                             reps: int, seed: int) -> float:
    if not np.any(resid):
        return 0.0
    # Philox is keyed by the seed; row b of the draw is replicate b, column i is study i
    rng = np.random.Generator(np.random.Philox(key=seed))
    v = rng.standard_normal((reps, z.size))
    z_star = z + resid * v
    return float(np.var(z_star @ share, ddof=1))


def wild_bootstrap_variance(zstudies: Sequence[ZStudy], pooled: PooledZ,
                            spec: BootstrapSpec) -> float:
    """Residual-multiplier bootstrap variance of the pooled z.

    Multipliers are N(0, gamma); each resample is pooled with the original
    weights, so heterogeneity is not re-estimated per replicate.
    """
    k = len(zstudies)
    if k < 2:
        raise InsufficientStudiesError("wild bootstrap", k, 2)
    gamma = gamma_factor(spec.gamma_mode, k)
    z, _ = z_arrays(zstudies)
    resid = pooled.z_bar - z
    share = pooled.weights / pooled.total_weight
    return gamma * _unit_bootstrap_variance(z, resid, share, spec.reps, spec.rng_seed)


# ---------------------------------------------------------------------------
# Interval construction
# ---------------------------------------------------------------------------

def build_ci(z_center: float, se: float, df: Optional[int], alpha: float,
             backtransform: Backtransform, tau2_z: float = 0.0,
             quadrature: QuadratureSpec = QuadratureSpec(),
             method: Optional[CiMethod] = None) -> CiResult:
    if se < 0 or math.isnan(se):
        raise InvalidInputError(f"standard error must be nonnegative, got {se}")
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    p = 1.0 - alpha / 2.0
    q = t_quantile(p, df) if df is not None else normal_quantile(p)
    lo, hi = z_center - q * se, z_center + q * se

    if backtransform is Backtransform.TANH:
        point, lower, upper = math.tanh(z_center), math.tanh(lo), math.tanh(hi)
    elif backtransform is Backtransform.INTEGRAL:
        point = integral_z_to_r(z_center, tau2_z, quadrature)
        lower = integral_z_to_r(lo, tau2_z, quadrature)
        upper = integral_z_to_r(hi, tau2_z, quadrature)
    else:
        point, lower, upper = z_center, max(-1.0, lo), min(1.0, hi)

    assert lower <= upper, f"back-transform reversed the bounds: {lower} > {upper}"
    return CiResult(
        method=method,
        point_r=point,
        lower_r=lower,
        upper_r=upper,
        z_center=z_center,
        z_se=se,
        tau2_z=tau2_z,
        alpha=alpha,
        backtransform=backtransform,
        df=df,
        quantile=q,
    )


def apply_bias_correction(studies: Sequence[StudySummary], bound: float) -> List[StudySummary]:
    return [StudySummary(r=bias_corrected_r(s.r, s.n, bound), n=s.n) for s in studies]


@dataclass
class _Prepared:
    studies: List[StudySummary]
    zstudies: List[ZStudy]
    pooled: PooledZ
    unit_wbs: Optional[float] = None

    @property
    def k(self) -> int:
        return len(self.studies)


def _prepare(studies: Sequence[StudySummary], options: CiOptions) -> _Prepared:
    studies = list(studies)
    if not studies:
        raise InsufficientStudiesError("pooling", 0, 1)
    if options.bias_correct:
        studies = apply_bias_correction(studies, options.clamp_bound)
    zstudies = to_z_scale(studies, options.clamp_bound)
    if options.fixed_effect or len(zstudies) < 2:
        tau2 = 0.0
    else:
        tau2 = sj_tau2(zstudies)
    return _Prepared(studies, zstudies, iv_pooled(zstudies, tau2))


def _method_ci(prep: _Prepared, method: CiMethod, alpha: float, options: CiOptions) -> CiResult:
    k = prep.k
    minimum = METHOD_MIN_K[method]
    if k < minimum:
        raise InsufficientStudiesError(method.value, k, minimum)

    if method is CiMethod.HS:
        r_hs = hs_pooled_r(prep.studies)
        se = math.sqrt(hs_variance(prep.studies, r_hs))
        return build_ci(r_hs, se, None, alpha, Backtransform.NONE, method=method)

    pooled = prep.pooled
    if method is CiMethod.HOVZ:
        return build_ci(
            pooled.z_bar,
            math.sqrt(naive_z_variance(pooled)),
            None,
            alpha,
            options.backtransform or Backtransform.TANH,
            pooled.tau2,
            options.quadrature,
            method,
        )

    if method is CiMethod.KH:
        var = kh_variance(prep.zstudies, pooled)
    elif method in HC_VARIANT:
        var = hc_variance(prep.zstudies, pooled, HC_VARIANT[method])
    else:
        if prep.unit_wbs is None:
            z, _ = z_arrays(prep.zstudies)
            share = pooled.weights / pooled.total_weight
            prep.unit_wbs = _unit_bootstrap_variance(
                z, pooled.z_bar - z, share, options.bootstrap.reps, options.bootstrap.rng_seed
            )
        # the three variants share multipliers and differ only in gamma
        var = gamma_factor(WBS_GAMMA[method], k) * prep.unit_wbs

    return build_ci(
        pooled.z_bar,
        math.sqrt(var),
        k - 1,
        alpha,
        options.backtransform or Backtransform.INTEGRAL,
        pooled.tau2,
        options.quadrature,
        method,
    )


def compute_cis(studies: Sequence[StudySummary], methods: Sequence[CiMethod] = ALL_METHODS,
                alpha: float = 0.05, options: CiOptions = CiOptions()
                ) -> Tuple[Dict[CiMethod, CiResult], Dict[CiMethod, str]]:
    """Intervals for several methods over one set of studies.

    Returns ``(results, skipped)``; a method whose preconditions fail lands in
    ``skipped`` with the reason instead of aborting the batch.
    """
    prep = _prepare(studies, options)
    results: Dict[CiMethod, CiResult] = {}
    skipped: Dict[CiMethod, str] = {}
    for method in methods:
        try:
            results[method] = _method_ci(prep, method, alpha, options)
        except PooledCorrError as e:
            skipped[method] = str(e)
    return results, skipped


def compute_ci(studies: Sequence[StudySummary], method: CiMethod, alpha: float = 0.05,
               options: CiOptions = CiOptions()) -> CiResult:
    prep = _prepare(studies, options)
    return _method_ci(prep, method, alpha, options)


def compute_fixed_effect_ci(studies: Sequence[StudySummary], method: CiMethod = CiMethod.HOVZ,
                            alpha: float = 0.05, options: CiOptions = CiOptions()) -> CiResult:
    """Interval under the fixed-effect model (heterogeneity forced to zero)."""
    return compute_ci(studies, method, alpha, options.model_copy(update={"fixed_effect": True}))


def ipd_ci(studies: Sequence[StudySummary], alpha: float = 0.05) -> CiResult:
    """Asymptotic CI treating the pooled studies as one individual-level sample."""
    r = hs_pooled_r(studies)
    n_total = sum(s.n for s in studies)
    lower, upper = pooled_ipd_ci(r, n_total, alpha)
    return CiResult(
        method=None,
        point_r=r,
        lower_r=lower,
        upper_r=upper,
        z_center=r,
        z_se=(1.0 - r * r) / math.sqrt(n_total),
        tau2_z=0.0,
        alpha=alpha,
        backtransform=Backtransform.NONE,
        quantile=normal_quantile(1.0 - alpha / 2.0),
    )
