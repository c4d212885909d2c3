from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


CLAMP_BOUND = 0.999

CorrelationValue = Annotated[float, Field(ge=-1.0, le=1.0)]


class CiMethod(str, Enum):
    """Confidence interval procedures, in reporting order"""
    HOVZ = "HOVZ"
    HS = "HS"
    KH = "KH"
    WBS1 = "WBS1"
    WBS2 = "WBS2"
    WBS3 = "WBS3"
    HC3 = "HC3"
    HC4 = "HC4"


ALL_METHODS: Tuple[CiMethod, ...] = tuple(CiMethod)


class Backtransform(str, Enum):
    TANH = "TANH"
    INTEGRAL = "INTEGRAL"
    NONE = "NONE"


class GammaMode(str, Enum):
    ONE = "ONE"
    KM1_OVER_KM3 = "KM1_OVER_KM3"
    KM2_OVER_KM3 = "KM2_OVER_KM3"


class SimModel(str, Enum):
    TRUNCNORM = "TRUNCNORM"
    BETA = "BETA"
    LOGNORMAL_K1 = "LOGNORMAL_K1"
    NORMAL_K1 = "NORMAL_K1"


K1_MODELS = (SimModel.LOGNORMAL_K1, SimModel.NORMAL_K1)


# ---------------------------------------------------------------------------
# Validated inputs
# ---------------------------------------------------------------------------

class QuadratureSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    subintervals: int = Field(default=150, gt=0)
    half_width_multiplier: float = Field(default=5.0, gt=0)

    @field_validator("subintervals")
    @classmethod
    def _even(cls, v: int) -> int:
        if v % 2:
            raise ValueError("Simpson's rule needs an even number of subintervals")
        return v


class StudySummary(BaseModel):
    """One primary study: observed correlation and number of subjects"""
    model_config = ConfigDict(frozen=True)

    r: CorrelationValue
    n: int = Field(ge=4)


class BootstrapSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    reps: int = Field(default=1000, ge=2)
    gamma_mode: GammaMode = GammaMode.ONE
    rng_seed: int = Field(default=20210916, ge=0, lt=2**64)


class CiOptions(BaseModel):
    """Knobs shared by every interval built from one set of studies"""
    model_config = ConfigDict(frozen=True)

    backtransform: Optional[Backtransform] = None
    bootstrap: BootstrapSpec = Field(default_factory=BootstrapSpec)
    quadrature: QuadratureSpec = Field(default_factory=QuadratureSpec)
    clamp_bound: float = Field(default=CLAMP_BOUND, gt=0, lt=1)
    fixed_effect: bool = False
    bias_correct: bool = False

    @field_validator("backtransform")
    @classmethod
    def _z_scale_only(cls, v: Optional[Backtransform]) -> Optional[Backtransform]:
        if v is Backtransform.NONE:
            raise ValueError("backtransform override must be TANH or INTEGRAL")
        return v


class Scenario(BaseModel):
    """One simulation cell"""
    model_config = ConfigDict(frozen=True)

    scenario_id: str = "cell"
    model: SimModel
    rho: float = Field(ge=-CLAMP_BOUND, le=CLAMP_BOUND)
    tau: float = Field(default=0.0, ge=0)
    k: int = Field(ge=1)
    n_vector: Tuple[int, ...]
    n_pattern: str = "custom"
    reps: int = Field(default=2000, ge=1)
    alpha: float = Field(default=0.05, gt=0, lt=1)
    seed: int = Field(default=20210916, ge=0, lt=2**63)
    methods: Tuple[CiMethod, ...] = ALL_METHODS
    bootstrap: BootstrapSpec = Field(default_factory=BootstrapSpec)
    within_study: Literal["raw", "z"] = "raw"
    bias_correct: bool = False
    backtransform: Optional[Backtransform] = None
    lognormal_dependence: Literal["mixing", "copula"] = "mixing"

    @model_validator(mode="after")
    def _check_cell(self) -> "Scenario":
        if len(self.n_vector) != self.k:
            raise ValueError(f"n_vector has {len(self.n_vector)} entries but k={self.k}")
        if any(n < 4 for n in self.n_vector):
            raise ValueError("every study size must be at least 4")
        if self.model in K1_MODELS and self.k != 1:
            raise ValueError(f"{self.model.value} cells need k=1")
        if self.model is SimModel.BETA and self.tau > 0:
            # shape parameters are positive iff 1 - rho^2 > tau^2
            if (1 - self.rho) * (1 + self.rho) - self.tau ** 2 <= 0:
                raise ValueError("beta shape parameters would be non-positive")
        if self.backtransform is Backtransform.NONE:
            raise ValueError("backtransform override must be TANH or INTEGRAL")
        return self


class DatasetRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    study_id: str
    authors: str = ""
    year: Optional[int] = None
    n: int = Field(ge=4)
    r: CorrelationValue
    attributes: Dict[str, str] = Field(default_factory=dict)


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    records: Tuple[DatasetRecord, ...]

    @field_validator("records")
    @classmethod
    def _nonempty_unique(cls, v: Tuple[DatasetRecord, ...]) -> Tuple[DatasetRecord, ...]:
        if not v:
            raise ValueError("dataset has no records")
        ids = [rec.study_id for rec in v]
        if len(set(ids)) != len(ids):
            raise ValueError("study_id values must be unique")
        return v

    def __len__(self) -> int:
        return len(self.records)

    def studies(self) -> List[StudySummary]:
        return [StudySummary(r=rec.r, n=rec.n) for rec in self.records]

    @property
    def n_total(self) -> int:
        return sum(rec.n for rec in self.records)


class RunConfig(BaseModel):
    """Fully resolved command line configuration, embedded in every report"""
    model_config = ConfigDict(frozen=True)

    subcommand: Literal["analyze", "simulate", "datasets"]
    alpha: float = Field(default=0.05, gt=0, lt=1)
    methods: Tuple[CiMethod, ...] = ALL_METHODS
    tau_estimator: Literal["SJ"] = "SJ"
    backtransform: Optional[Backtransform] = None
    bootstrap_reps: int = Field(default=1000, ge=2)
    reps: int = Field(default=2000, ge=1)
    seed: int = Field(default=20210916, ge=0, lt=2**63)
    output_format: Literal["csv", "json"] = "csv"
    threads: int = Field(default=1, ge=-1)
    fixed_effect: bool = False
    bias_correct: bool = False
    within_study: Literal["raw", "z"] = "raw"
    lognormal_dependence: Literal["mixing", "copula"] = "mixing"
    clamp_bound: float = Field(default=CLAMP_BOUND, gt=0, lt=1)
    source: Optional[str] = None
    filters: Dict[str, str] = Field(default_factory=dict)

    @field_validator("methods")
    @classmethod
    def _nonempty(cls, v: Tuple[CiMethod, ...]) -> Tuple[CiMethod, ...]:
        if not v:
            raise ValueError("at least one method is required")
        return v

    @field_validator("threads")
    @classmethod
    def _worker_count(cls, v: int) -> int:
        # -1 means one worker per core
        if v == 0:
            raise ValueError("threads must be at least 1, or -1 for all cores")
        return v

    def provenance(self) -> dict:
        # thread count never changes results, so it stays out of the report
        return self.model_dump(mode="json", exclude={"threads"})


# ---------------------------------------------------------------------------
# Computed results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZStudy:
    z: float
    var_z: float
    n: int


@dataclass(frozen=True)
class PooledZ:
    z_bar: float
    weights: np.ndarray
    tau2: float

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))


@dataclass(frozen=True)
class CiResult:
    method: Optional[CiMethod]
    point_r: float
    lower_r: float
    upper_r: float
    z_center: float
    z_se: float
    tau2_z: float
    alpha: float
    backtransform: Backtransform
    df: Optional[int] = None
    quantile: float = float("nan")

    @property
    def length(self) -> float:
        return self.upper_r - self.lower_r

    def covers(self, rho: float) -> bool:
        return self.lower_r <= rho <= self.upper_r

    def to_dict(self) -> dict:
        return {
            "method": self.method.value if self.method else None,
            "point": self.point_r,
            "lower": self.lower_r,
            "upper": self.upper_r,
            "z_center": self.z_center,
            "z_se": self.z_se,
            "tau2_z": self.tau2_z,
            "alpha": self.alpha,
            "backtransform": self.backtransform.value,
            "df": self.df,
        }


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float


@dataclass
class MethodSummary:
    method: str
    coverage: float
    mean_length: float
    failures: int
    mc_se: float
    reps_effective: int
    var_rmse: float = float("nan")


@dataclass
class ScenarioResult:
    scenario: Scenario
    methods: Dict[str, MethodSummary] = field(default_factory=dict)

    def rows(self) -> List[dict]:
        s = self.scenario
        out = []
        for summary in self.methods.values():
            out.append({
                "scenario_id": s.scenario_id,
                "model": s.model.value,
                "rho": s.rho,
                "tau": s.tau,
                "k": s.k,
                "n_pattern": s.n_pattern,
                "method": summary.method,
                "coverage": summary.coverage,
                "mean_length": summary.mean_length,
                "failures": summary.failures,
                "mc_se": summary.mc_se,
                "reps_effective": summary.reps_effective,
                "var_rmse": summary.var_rmse,
            })
        return out
