from dataclasses import dataclass
import os

from dotenv import load_dotenv

load_dotenv()

DEFAULT_SEED = 20210916


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    return int(raw)


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    return float(raw)


@dataclass(frozen=True)
class Settings:
    seed: int
    threads: int
    bootstrap_reps: int
    sim_reps: int
    clamp_bound: float
    log_level: str


def get_settings() -> Settings:
    # Environment first, then .env, then hard defaults
    return Settings(
        seed=_int_env("POOLED_CORR_SEED", DEFAULT_SEED),
        threads=_int_env("POOLED_CORR_THREADS", 1),
        bootstrap_reps=_int_env("POOLED_CORR_BOOTSTRAP_REPS", 1000),
        sim_reps=_int_env("POOLED_CORR_SIM_REPS", 2000),
        clamp_bound=_float_env("POOLED_CORR_CLAMP", 0.999),
        log_level=os.getenv("POOLED_CORR_LOG_LEVEL", "WARNING").upper(),
    )


settings = get_settings()
