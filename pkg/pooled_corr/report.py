"""
Self-describing CSV and JSON reports.

Both formats carry the resolved run configuration and its digest. CSV puts
them in leading ``#`` comment lines and streams rows as they arrive; JSON
collects the same rows under ``rows`` and is written on close.
"""

from __future__ import annotations

import csv
import json
import math
from typing import Any, Dict, List, Optional, Sequence, TextIO

import numpy as np

from .cache import canonical_key
from .schemas import CiResult, RunConfig

ANALYSIS_COLUMNS = [
    "dataset", "effects", "method", "status", "point", "lower", "upper",
    "z_se", "tau2_sj", "k", "n_total", "alpha", "backtransform", "df", "note",
]

SIMULATION_COLUMNS = [
    "level", "scenario_id", "model", "rho", "tau", "k", "n_pattern", "method",
    "coverage", "mean_length", "failures", "mc_se", "reps_effective", "var_rmse",
    "cells", "error",
]


def _clean(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


class ReportWriter:
    def __init__(self, stream: TextIO, fmt: str, config: RunConfig, columns: Sequence[str],
                 meta: Optional[Dict[str, Any]] = None):
        if fmt not in ("csv", "json"):
            raise ValueError(f"unsupported report format: {fmt}")
        self.stream = stream
        self.fmt = fmt
        self.columns = list(columns)
        provenance = config.provenance()
        self.header: Dict[str, Any] = {"config": provenance, "config_id": canonical_key(provenance)}
        self.header.update(meta or {})
        self.rows: List[Dict[str, Any]] = []
        self._csv: Optional[csv.DictWriter] = None
        if fmt == "csv":
            for key, value in self.header.items():
                text = value if isinstance(value, str) else json.dumps(value, sort_keys=True)
                stream.write(f"# {key}: {text}\n")
            self._csv = csv.DictWriter(stream, fieldnames=self.columns, lineterminator="\n",
                                       extrasaction="raise")
            self._csv.writeheader()

    def write_row(self, row: Dict[str, Any]) -> None:
        full = {c: row.get(c) for c in self.columns}
        if self._csv is not None:
            self._csv.writerow({k: "" if v is None else v for k, v in full.items()})
            self.stream.flush()
        else:
            self.rows.append({k: _clean(v) for k, v in full.items()})

    def write_rows(self, rows: Sequence[Dict[str, Any]]) -> None:
        for row in rows:
            self.write_row(row)

    def close(self) -> None:
        if self.fmt == "json":
            json.dump({**self.header, "rows": self.rows}, self.stream, sort_keys=True, indent=2)
            self.stream.write("\n")
        self.stream.flush()


def ci_row(dataset: str, effects: str, ci: CiResult, label: str, k: int, n_total: int,
           tau2: float) -> Dict[str, Any]:
    row = {key: value for key, value in ci.to_dict().items() if key in ANALYSIS_COLUMNS}
    row.update(dataset=dataset, effects=effects, method=label, status="ok", tau2_sj=tau2,
               k=k, n_total=n_total, note="")
    return row


def skipped_row(dataset: str, effects: str, label: str, k: int, n_total: int, tau2: float,
                alpha: float, reason: str) -> Dict[str, Any]:
    return {
        "dataset": dataset,
        "effects": effects,
        "method": label,
        "status": "skipped",
        "tau2_sj": tau2,
        "k": k,
        "n_total": n_total,
        "alpha": alpha,
        "note": reason,
    }
