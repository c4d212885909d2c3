"""Confidence intervals for pooled correlation coefficients"""

__all__ = [
    "cache",
    "ci_methods",
    "cli",
    "config",
    "datasets",
    "errors",
    "pooling",
    "report",
    "schemas",
    "simulation",
    "stats_core",
]

__version__ = "2026.10.0"
