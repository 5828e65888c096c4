"""CSV ingestion for synthetic exports and the usual benchmark layout
(first column a timestamp, remaining columns numeric)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .online import RunningStandardizer


class DataLoadError(ValueError):
    pass


@dataclass
class DatasetTable:
    columns: list
    values: np.ndarray
    timestamps: list | None = None
    normalizer: RunningStandardizer = field(default=None, repr=False)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise ValueError("values must be T x len(columns)")
        if self.normalizer is None:
            self.normalizer = RunningStandardizer(len(self.columns))

    @property
    def shape(self):
        return self.values.shape


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, timestamp="auto", columns=None) -> DatasetTable:
    """Read a headed CSV into a ``DatasetTable``.

    ``timestamp``: ``True`` treats column 0 as a timestamp, ``False`` keeps it
    numeric, ``"auto"`` decides from the first data row (the synthetic
    ``t`` column is an integer step, which also counts as a timestamp).
    ``columns`` optionally selects value columns by name.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise DataLoadError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataLoadError(f"{path}: no data rows")
    if timestamp == "auto":
        first = body[0][0].strip()
        timestamp = not _is_number(first) or header[0].lower() in ("t", "date", "time", "timestamp")
    start = 1 if timestamp else 0
    names = header[start:]
    if not names:
        raise DataLoadError(f"{path}: no value columns")

    values = np.empty((len(body), len(names)))
    stamps = [] if timestamp else None
    bad_lines = []
    for k, row in enumerate(body):
        line = k + 2  # 1-based, header is line 1
        if len(row) != len(header):
            raise DataLoadError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row[start:]]
        except ValueError as exc:
            raise DataLoadError(f"{path}: line {line}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            bad_lines.append(line)
        values[k] = vals
        if timestamp:
            stamps.append(row[0].strip())
    if bad_lines:
        raise DataLoadError(
            f"{path}: line {bad_lines[0]}: non-finite value "
            f"({len(bad_lines)} row(s) with NaN/inf; first at line {bad_lines[0]})"
        )
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise DataLoadError(f"{path}: unknown columns {missing}")
        idx = [names.index(c) for c in columns]
        values, names = values[:, idx], list(columns)
    return DatasetTable(columns=list(names), values=values, timestamps=stamps)
