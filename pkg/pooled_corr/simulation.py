"""
Monte Carlo coverage harness.

True study correlations come from a truncated normal (TRUNCNORM) or a
transformed beta (BETA); observed correlations come from bivariate normal
samples of each study's size. Every replicate owns a SeedSequence child of
(scenario seed, replicate index), so results do not depend on how
replicates are spread over workers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError

from .ci_methods import compute_cis
from .config import settings
from .errors import DatasetError, DegenerateVarianceError, InvalidInputError, PooledCorrError
from .pooling import pooled_ipd_ci
from .schemas import (
    ALL_METHODS,
    CLAMP_BOUND,
    K1_MODELS,
    BetaParams,
    BootstrapSpec,
    CiMethod,
    CiOptions,
    MethodSummary,
    Scenario,
    ScenarioResult,
    SimModel,
    StudySummary,
)
from .stats_core import pearson_r

logger = logging.getLogger(__name__)


REJECTION_BUDGET = 10 ** 6
IPD_LABEL = "IPD"

GRID_RHOS = (0.0, 0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9)
GRID_TAUS = (0.0, 0.16, 0.4)
GRID_KS = (5, 10, 20, 40)
BASE_SIZES = (15, 16, 19, 23, 27)
SPECIAL_K5 = (23, 19, 250, 330, 29)
SPECIAL_HALF_K20 = (210, 240, 350, 220, 290, 280, 340, 400, 380, 290)

GRID_COLUMNS = ["scenario_id", "model", "rho", "tau", "k", "n_vector", "n_pattern", "reps", "alpha", "seed"]


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def beta_params(rho: float, tau2: float) -> BetaParams:
    """Shape parameters of X so that Y = 2(X - 0.5) has mean rho and variance tau2."""
    if tau2 <= 0:
        raise InvalidInputError(f"tau2 must be positive, got {tau2}")
    if abs(rho) >= 1.0:
        raise InvalidInputError(f"rho must lie in (-1, 1), got {rho}")
    a = ((1.0 - rho) * (1.0 + rho) - tau2) / tau2 * (1.0 + rho) / 2.0
    b = (1.0 - rho) / (1.0 + rho) * a
    if a <= 0 or b <= 0:
        raise DegenerateVarianceError(
            f"beta shape parameters non-positive for rho={rho}, tau2={tau2} (a={a}, b={b})"
        )
    return BetaParams(a=a, b=b)


def beta_moments(params: BetaParams) -> Tuple[float, float]:
    """Mean and variance of Y = 2(X - 0.5), X ~ Beta(a, b)."""
    s = params.a + params.b
    mean = 2.0 * params.a / s - 1.0
    var = 4.0 * params.a * params.b / (s * s * (s + 1.0))
    return mean, var


def draw_true_rhos(model: SimModel, rho: float, tau: float, size: int,
                   rng: np.random.Generator, bound: float = CLAMP_BOUND,
                   budget: int = REJECTION_BUDGET) -> np.ndarray:
    """``size`` study-level correlations, rejection-sampled into [-bound, bound]."""
    if tau < 0:
        raise InvalidInputError(f"tau must be nonnegative, got {tau}")
    if tau == 0:
        return np.full(size, float(rho))

    if model is SimModel.TRUNCNORM:
        def draw(m: int) -> np.ndarray:
            return rng.normal(rho, tau, m)
    elif model is SimModel.BETA:
        params = beta_params(rho, tau * tau)

        def draw(m: int) -> np.ndarray:
            return 2.0 * (rng.beta(params.a, params.b, m) - 0.5)
    else:
        raise InvalidInputError(f"{model.value} has no study-level distribution")

    out = np.empty(size)
    filled = 0
    attempts = 0
    while filled < size:
        if attempts >= budget * size:
            raise DegenerateVarianceError(
                f"rejection budget exhausted after {attempts} draws for {model.value} "
                f"rho={rho}, tau={tau}"
            )
        batch = draw(max(2 * (size - filled), 8))
        attempts += batch.size
        keep = batch[np.abs(batch) <= bound][: size - filled]
        out[filled:filled + keep.size] = keep
        filled += keep.size
    return out


def draw_true_rho(model: SimModel, rho: float, tau: float, rng: np.random.Generator) -> float:
    return float(draw_true_rhos(model, rho, tau, 1, rng)[0])


def _bivariate_normal(rho: float, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal(n)
    e = rng.standard_normal(n)
    return x, rho * x + math.sqrt(1.0 - rho * rho) * e


def draw_study_r(rho_i: float, n: int, rng: np.random.Generator) -> StudySummary:
    """Pearson r of ``n`` bivariate standard-normal pairs with correlation ``rho_i``."""
    if n < 4:
        raise InvalidInputError(f"study size must be at least 4, got {n}")
    if abs(rho_i) > CLAMP_BOUND:
        raise InvalidInputError(f"true correlation outside [-{CLAMP_BOUND}, {CLAMP_BOUND}]: {rho_i}")
    x, y = _bivariate_normal(rho_i, n, rng)
    return StudySummary(r=pearson_r(x, y), n=n)


def draw_study_r_z(rho_i: float, n: int, rng: np.random.Generator) -> StudySummary:
    """Observed r drawn on the z-scale, atanh(r) ~ N(atanh(rho_i), 1/(n-3))."""
    if n < 4:
        raise InvalidInputError(f"study size must be at least 4, got {n}")
    z = rng.normal(math.atanh(rho_i), 1.0 / math.sqrt(n - 3))
    return StudySummary(r=math.tanh(z), n=n)


def _standardized_lognormal(z: np.ndarray) -> np.ndarray:
    # exp(Z) for Z ~ N(0, 1) has mean e^0.5 and variance e^2 - e
    return (np.exp(z) - math.exp(0.5)) / math.sqrt(math.e ** 2 - math.e)


def lognormal_normal_rho(rho: float) -> float:
    """Normal-scale correlation whose standardized-lognormal image has Pearson ``rho``."""
    arg = 1.0 + rho * (math.e - 1.0)
    if arg <= 0:
        raise DegenerateVarianceError(
            f"lognormal calibration infeasible for rho={rho} (needs rho > {-1 / (math.e - 1):.4f})"
        )
    return math.log(arg)


def draw_k1_pair_sample(model: SimModel, rho: float, n: int, rng: np.random.Generator,
                        dependence: str = "mixing") -> Tuple[np.ndarray, np.ndarray]:
    """One pooled sample of ``n`` pairs with Pearson correlation ``rho``.

    LOGNORMAL_K1 mixes two iid standardized lognormals, y = rho*x + sqrt(1-rho^2)*e,
    unless ``dependence="copula"``, which exponentiates a bivariate normal with
    calibrated correlation instead.
    """
    if n < 4:
        raise InvalidInputError(f"sample size must be at least 4, got {n}")
    if model is SimModel.NORMAL_K1:
        return _bivariate_normal(rho, n, rng)
    if model is not SimModel.LOGNORMAL_K1:
        raise InvalidInputError(f"{model.value} is not a single-sample model")
    if dependence == "mixing":
        x = _standardized_lognormal(rng.standard_normal(n))
        e = _standardized_lognormal(rng.standard_normal(n))
        return x, rho * x + math.sqrt(1.0 - rho * rho) * e
    if dependence == "copula":
        z1, z2 = _bivariate_normal(lognormal_normal_rho(rho), n, rng)
        return _standardized_lognormal(z1), _standardized_lognormal(z2)
    raise InvalidInputError(f"unknown lognormal dependence {dependence!r}; use mixing or copula")


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

# (covered, length, centre, variance estimate) or None for a failed replicate
Outcome = Optional[Tuple[bool, float, float, float]]


def mc_se(p: float, n: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"proportion must lie in [0, 1], got {p}")
    if n < 1:
        raise InvalidInputError(f"need at least one replicate, got {n}")
    return math.sqrt(p * (1.0 - p) / n)


def _method_labels(s: Scenario) -> List[str]:
    if s.model in K1_MODELS:
        return [IPD_LABEL]
    return [m.value for m in s.methods]


def _replicate_streams(s: Scenario, rep: int) -> Tuple[np.random.Generator, int]:
    data_ss, boot_ss = np.random.SeedSequence([s.seed, rep]).spawn(2)
    return np.random.default_rng(data_ss), int(boot_ss.generate_state(1, dtype=np.uint64)[0])


def _run_replicate(s: Scenario, rep: int) -> Dict[str, Outcome]:
    rng, boot_seed = _replicate_streams(s, rep)
    labels = _method_labels(s)
    try:
        if s.model in K1_MODELS:
            xs, ys = draw_k1_pair_sample(s.model, s.rho, s.n_vector[0], rng, s.lognormal_dependence)
            r = pearson_r(xs, ys)
            lower, upper = pooled_ipd_ci(r, s.n_vector[0], s.alpha)
            return {IPD_LABEL: (lower <= s.rho <= upper, upper - lower, r, float("nan"))}

        rhos = draw_true_rhos(s.model, s.rho, s.tau, s.k, rng)
        draw = draw_study_r_z if s.within_study == "z" else draw_study_r
        studies = [draw(float(rho_i), n, rng) for rho_i, n in zip(rhos, s.n_vector)]
    except PooledCorrError as e:
        logger.debug(f"{s.scenario_id} replicate {rep}: data generation failed: {e}")
        return {label: None for label in labels}

    options = CiOptions(
        backtransform=s.backtransform,
        bootstrap=s.bootstrap.model_copy(update={"rng_seed": boot_seed}),
        bias_correct=s.bias_correct,
    )
    results, _ = compute_cis(studies, s.methods, s.alpha, options)
    out: Dict[str, Outcome] = {}
    for method in s.methods:
        ci = results.get(method)
        if ci is None:
            out[method.value] = None
        else:
            out[method.value] = (ci.covers(s.rho), ci.length, ci.z_center, ci.z_se ** 2)
    return out


def _run_chunk(s: Scenario, reps: Sequence[int]) -> List[Dict[str, Outcome]]:
    return [_run_replicate(s, rep) for rep in reps]


def _summarize(label: str, outcomes: List[Outcome], reps: int) -> MethodSummary:
    ok = [o for o in outcomes if o is not None]
    n_ok = len(ok)
    if n_ok == 0:
        return MethodSummary(label, float("nan"), float("nan"), reps, float("nan"), 0)
    covered = np.array([o[0] for o in ok], dtype=float)
    lengths = np.array([o[1] for o in ok])
    coverage = float(covered.mean())

    var_rmse = float("nan")
    if label not in (CiMethod.HS.value, IPD_LABEL) and n_ok >= 2:
        centres = np.array([o[2] for o in ok])
        estimates = np.array([o[3] for o in ok])
        target = float(np.var(centres, ddof=1))
        var_rmse = float(np.sqrt(np.mean((estimates - target) ** 2)))

    return MethodSummary(
        method=label,
        coverage=coverage,
        mean_length=float(lengths.mean()),
        failures=reps - n_ok,
        mc_se=mc_se(coverage, n_ok),
        reps_effective=n_ok,
        var_rmse=var_rmse,
    )


def run_scenario(s: Scenario, threads: int = 1) -> ScenarioResult:
    """Empirical coverage and mean interval length of every requested method."""
    if threads == 0 or threads < -1:
        raise InvalidInputError(f"threads must be at least 1, or -1 for all cores, got {threads}")
    if threads == 1:
        outcomes = _run_chunk(s, range(s.reps))
    else:
        n_chunks = max(1, min(s.reps, 8 * (threads if threads > 0 else 8)))
        chunks = [c.tolist() for c in np.array_split(np.arange(s.reps), n_chunks) if c.size]
        parts = Parallel(n_jobs=threads)(delayed(_run_chunk)(s, c) for c in chunks)
        # chunks come back in submission order, so the reduction is order-stable
        outcomes = [o for part in parts for o in part]

    result = ScenarioResult(scenario=s)
    for label in _method_labels(s):
        summary = _summarize(label, [o[label] for o in outcomes], s.reps)
        if summary.failures:
            logger.warning(f"{s.scenario_id}: {label} failed in {summary.failures} of {s.reps} replicates")
        result.methods[label] = summary
    return result


def iter_grid(scenarios: Sequence[Scenario], threads: int = 1
              ) -> Iterator[Tuple[Scenario, Optional[ScenarioResult], Optional[str]]]:
    """Run cells in order, yielding ``(scenario, result, error)`` as each finishes."""
    for s in scenarios:
        try:
            yield s, run_scenario(s, threads), None
        except PooledCorrError as e:
            logger.error(f"{s.scenario_id}: cell failed: {e}")
            yield s, None, str(e)


# ---------------------------------------------------------------------------
# Scenario grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SizeSetting:
    pattern: str
    n_vector: Tuple[int, ...]


def size_settings() -> List[SizeSetting]:
    out = []
    for label, mult in (("small", 1), ("large", 4)):
        for k in GRID_KS:
            n_vec = tuple(int(n) for n in np.tile(np.array(BASE_SIZES) * mult, k // len(BASE_SIZES)))
            out.append(SizeSetting(f"{label}-K{k}", n_vec))
    out.append(SizeSetting("special-K5", SPECIAL_K5))
    out.append(SizeSetting("special-K20", SPECIAL_HALF_K20 + SPECIAL_HALF_K20))
    return out


def _scenario(**kwargs) -> Scenario:
    try:
        return Scenario(**kwargs)
    except ValidationError as e:
        raise InvalidInputError(f"invalid scenario {kwargs.get('scenario_id')}: {e}") from e


def default_grid(base_seed: Optional[int] = None, reps: Optional[int] = None,
                 methods: Sequence[CiMethod] = ALL_METHODS,
                 bootstrap: BootstrapSpec = BootstrapSpec(), **overrides) -> List[Scenario]:
    """The 8 rho x 3 tau x 10 size settings x 2 models grid (480 cells).

    The two models share the seed of their (rho, tau, size) cell.
    """
    base_seed = settings.seed if base_seed is None else base_seed
    reps = settings.sim_reps if reps is None else reps
    scenarios = []
    for model in (SimModel.TRUNCNORM, SimModel.BETA):
        idx = 0
        for rho in GRID_RHOS:
            for tau in GRID_TAUS:
                for setting in size_settings():
                    scenarios.append(_scenario(
                        scenario_id=f"{model.value.lower()}-rho{rho}-tau{tau}-{setting.pattern}",
                        model=model,
                        rho=rho,
                        tau=tau,
                        k=len(setting.n_vector),
                        n_vector=setting.n_vector,
                        n_pattern=setting.pattern,
                        reps=reps,
                        seed=base_seed + idx,
                        methods=tuple(methods),
                        bootstrap=bootstrap,
                        **overrides,
                    ))
                    idx += 1
    return scenarios


def k1_grid(base_seed: Optional[int] = None, reps: Optional[int] = None, **overrides) -> List[Scenario]:
    """Single-sample pooled-data cells: 2 distributions x rho {0.3, 0.7} x n {20, 50, 100}."""
    base_seed = settings.seed if base_seed is None else base_seed
    reps = settings.sim_reps if reps is None else reps
    scenarios = []
    idx = 0
    for model in (SimModel.NORMAL_K1, SimModel.LOGNORMAL_K1):
        for rho in (0.3, 0.7):
            for n in (20, 50, 100):
                scenarios.append(_scenario(
                    scenario_id=f"{model.value.lower()}-rho{rho}-n{n}",
                    model=model,
                    rho=rho,
                    k=1,
                    n_vector=(n,),
                    n_pattern=f"n{n}",
                    reps=reps,
                    seed=base_seed + idx,
                    **overrides,
                ))
                idx += 1
    return scenarios


MOLLOY_REPLICA_RHO = 0.154
MOLLOY_REPLICA_TAU2 = 0.012


def molloy_replica_scenarios(base_seed: Optional[int] = None, reps: Optional[int] = None,
                             methods: Sequence[CiMethod] = ALL_METHODS,
                             bootstrap: BootstrapSpec = BootstrapSpec(), **overrides) -> List[Scenario]:
    """Conscientiousness/adherence replica: Molloy study sizes, estimated rho and tau^2."""
    from .datasets import builtin

    base_seed = settings.seed if base_seed is None else base_seed
    reps = settings.sim_reps if reps is None else reps
    sizes = tuple(rec.n for rec in builtin("molloy2014").records)
    return [
        _scenario(
            scenario_id=f"{model.value.lower()}-molloy-replica",
            model=model,
            rho=MOLLOY_REPLICA_RHO,
            tau=math.sqrt(MOLLOY_REPLICA_TAU2),
            k=len(sizes),
            n_vector=sizes,
            n_pattern="molloy2014",
            reps=reps,
            seed=base_seed,
            methods=tuple(methods),
            bootstrap=bootstrap,
            **overrides,
        )
        for model in (SimModel.TRUNCNORM, SimModel.BETA)
    ]


def save_grid(scenarios: Sequence[Scenario], path: Union[str, Path]) -> None:
    rows = [
        {
            "scenario_id": s.scenario_id,
            "model": s.model.value,
            "rho": s.rho,
            "tau": s.tau,
            "k": s.k,
            "n_vector": ";".join(str(n) for n in s.n_vector),
            "n_pattern": s.n_pattern,
            "reps": s.reps,
            "alpha": s.alpha,
            "seed": s.seed,
        }
        for s in scenarios
    ]
    pd.DataFrame(rows, columns=GRID_COLUMNS).to_csv(path, index=False, lineterminator="\n")


def load_grid(path: Union[str, Path], methods: Sequence[CiMethod] = ALL_METHODS,
              bootstrap: BootstrapSpec = BootstrapSpec(), **overrides) -> List[Scenario]:
    """Read a scenario grid written by :func:`save_grid`; ``reps``, ``alpha`` and ``seed`` are optional."""
    source = str(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DatasetError("grid file not found", source=source)
    except pd.errors.EmptyDataError:
        raise DatasetError("grid file is empty", source=source)
    missing = {"model", "rho", "n_vector"} - set(frame.columns)
    if missing:
        raise DatasetError(f"missing required columns: {', '.join(sorted(missing))}", source=source)
    if frame.empty:
        raise DatasetError("grid file has no scenarios", source=source)

    scenarios = []
    for i, row in enumerate(frame.to_dict("records")):
        line = i + 2  # header is line 1
        try:
            n_vector = tuple(int(v) for v in row["n_vector"].split(";") if v.strip())
            kwargs = dict(
                scenario_id=row.get("scenario_id") or f"cell{i + 1}",
                model=SimModel(row["model"].strip().upper()),
                rho=float(row["rho"]),
                tau=float(row.get("tau") or 0.0),
                k=int(row.get("k") or len(n_vector)),
                n_vector=n_vector,
                n_pattern=row.get("n_pattern") or "custom",
                reps=int(row.get("reps") or settings.sim_reps),
                alpha=float(row.get("alpha") or 0.05),
                seed=int(row.get("seed") or settings.seed + i),
                bootstrap=bootstrap,
                **overrides,
            )
            if kwargs["model"] not in K1_MODELS:
                kwargs["methods"] = tuple(methods)
            scenarios.append(Scenario(**kwargs))
        except (ValueError, ValidationError) as e:
            raise DatasetError(str(e), source=source, row=line) from e
    return scenarios


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------

def results_frame(results: Sequence[ScenarioResult]) -> pd.DataFrame:
    return pd.DataFrame([row for res in results for row in res.rows()])


def aggregate_results(results: Sequence[ScenarioResult]) -> pd.DataFrame:
    """Average coverage and length over K and size settings per (model, tau, rho, method)."""
    frame = results_frame(results)
    if frame.empty:
        return pd.DataFrame(columns=["model", "tau", "rho", "method", "coverage", "mean_length", "failures", "cells"])
    grouped = frame.groupby(["model", "tau", "rho", "method"], sort=False)
    return grouped.agg(
        coverage=("coverage", "mean"),
        mean_length=("mean_length", "mean"),
        failures=("failures", "sum"),
        cells=("scenario_id", "count"),
    ).reset_index()
