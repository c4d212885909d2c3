"""
Study-summary datasets: CSV ingestion, the published built-ins and
subgroup filtering.
"""

from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import pandas as pd
from cachetools import cached
from pydantic import ValidationError

from .cache import checksum, dataset_cache
from .errors import DatasetError
from .schemas import Dataset, DatasetRecord

logger = logging.getLogger(__name__)


DATA_DIR = Path(__file__).resolve().parent / "data"

BUILTINS: Dict[str, str] = {
    "molloy2014": "conscientiousness and medication adherence (16 studies)",
    "santos2016": "amygdala response to trustworthy faces (12 studies)",
    "chalkidou2012": "Ki-67 immunohistochemistry vs 18F-FLT uptake (9 studies)",
}

# blake2b-128 of the shipped files; the published values must not drift
BUILTIN_CHECKSUMS: Dict[str, str] = {
    "molloy2014": "88e20391a378004a21e18ad61073156a",
    "santos2016": "5fb87e3af88862a4fc4aa7ab9f96ab59",
    "chalkidou2012": "0e61b75ca0ef23ffcb0d45641fa2944d",
}

REQUIRED_COLUMNS = ("r", "n")
RESERVED_COLUMNS = ("study", "authors", "year", "n", "r")


def _parse_frame(frame: pd.DataFrame, name: str, source: str) -> Dataset:
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DatasetError(f"missing required column(s): {', '.join(missing)}", source=source)
    if frame.empty:
        raise DatasetError("no data rows", source=source)

    extra = [c for c in frame.columns if c not in RESERVED_COLUMNS]
    records: List[DatasetRecord] = []
    for i, row in enumerate(frame.to_dict("records")):
        line = i + 2
        try:
            r = float(row["r"])
        except ValueError:
            raise DatasetError(f"r is not numeric: {row['r']!r}", source=source, row=line)
        try:
            n = int(row["n"])
        except ValueError:
            raise DatasetError(f"n is not an integer: {row['n']!r}", source=source, row=line)
        if n < 4:
            raise DatasetError(f"n={n} is below the minimum of 4", source=source, row=line)
        if abs(r) > 1.0:
            raise DatasetError(f"r={r} lies outside [-1, 1]", source=source, row=line)
        year = str(row.get("year", "")).strip()
        try:
            records.append(DatasetRecord(
                study_id=str(row.get("study", "")).strip() or str(i + 1),
                authors=str(row.get("authors", "")).strip(),
                year=int(year) if year else None,
                n=n,
                r=r,
                attributes={c: str(row[c]).strip() for c in extra},
            ))
        except (ValueError, ValidationError) as e:
            raise DatasetError(str(e), source=source, row=line) from e

    try:
        return Dataset(name=name, records=tuple(records))
    except ValidationError as e:
        raise DatasetError(str(e), source=source) from e


def _read(data: bytes, name: str, source: str) -> Dataset:
    try:
        frame = pd.read_csv(io.BytesIO(data), dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DatasetError("file is empty", source=source)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetError(f"unreadable CSV: {e}", source=source) from e
    return _parse_frame(frame, name, source)


def load_csv(path: Union[str, Path], name: Optional[str] = None) -> Dataset:
    """Load a study-summary CSV with at least ``r`` and ``n`` columns.

    ``study``, ``authors`` and ``year`` are recognised; every other column is
    kept verbatim in the record attributes.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError("file not found", source=str(path))
    logger.info(f"Loading dataset from {path}")
    return _read(data, name or path.stem, str(path))


@cached(dataset_cache)
def builtin(name: str) -> Dataset:
    if name not in BUILTINS:
        raise DatasetError(f"unknown builtin dataset {name!r}; choose from {', '.join(BUILTINS)}")
    path = DATA_DIR / f"{name}.csv"
    data = path.read_bytes()
    digest = checksum(data)
    if digest != BUILTIN_CHECKSUMS[name]:
        raise DatasetError(f"checksum mismatch ({digest}); the shipped file was modified", source=str(path))
    return _read(data, name, str(path))


def list_builtins() -> List[Tuple[str, int, int, str]]:
    """(name, K, total subjects, description) for every shipped dataset."""
    out = []
    for name, description in BUILTINS.items():
        ds = builtin(name)
        out.append((name, len(ds), ds.n_total, description))
    return out


def filter_dataset(dataset: Dataset, attribute: str, value: str) -> Dataset:
    """Studies whose ``attribute`` equals ``value``, in their original order."""
    absent = [rec.study_id for rec in dataset.records if attribute not in rec.attributes]
    if absent:
        raise DatasetError(f"attribute {attribute!r} missing on studies {', '.join(absent)}", source=dataset.name)
    kept = tuple(rec for rec in dataset.records if rec.attributes[attribute] == value)
    if not kept:
        raise DatasetError(f"no studies with {attribute}={value}", source=dataset.name)
    return Dataset(name=f"{dataset.name}[{attribute}={value}]", records=kept)


def to_frame(dataset: Dataset) -> pd.DataFrame:
    keys: List[str] = []
    for rec in dataset.records:
        keys.extend(k for k in rec.attributes if k not in keys)
    rows = [
        {
            "study": rec.study_id,
            "authors": rec.authors,
            "year": "" if rec.year is None else str(rec.year),
            "n": str(rec.n),
            "r": repr(rec.r),
            **{k: rec.attributes.get(k, "") for k in keys},
        }
        for rec in dataset.records
    ]
    return pd.DataFrame(rows, columns=["study", "authors", "year", "n", "r", *keys])


def export_csv(dataset: Dataset, path: Union[str, Path, None] = None) -> str:
    """Write ``dataset`` in the layout :func:`load_csv` reads; returns the CSV text."""
    text = to_frame(dataset).to_csv(index=False, lineterminator="\n")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
