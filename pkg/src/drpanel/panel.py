"""Core domain types and CSV ingestion for balanced causal panels.

Long-format input schema: columns ``unit,time,y,w`` plus optional
covariate columns ``x1,x2,...``; the ``time`` values of every unit must
form one contiguous integer range shared by all units (balanced panel).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ValidationError(ValueError):
    """Raised when input data violates the panel contracts."""


def _as_float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D array")
    return arr


@dataclass(frozen=True)
class PanelDataset:
    """Balanced N x T panel with binary treatment paths.

    Args:
      outcomes: real N x T matrix of observed outcomes.
      treatments: binary N x T matrix of treatment indicators.
      covariates: optional N x p matrix of time-invariant covariates.
      unit_ids: optional sequence of N unit labels (defaults to 0..N-1).
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: Optional[np.ndarray] = None
    unit_ids: tuple = ()

    def __post_init__(self):
        y = _as_float_matrix(self.outcomes, "outcomes")
        w = _as_float_matrix(self.treatments, "treatments")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", w)
        if y.shape != w.shape:
            raise ValidationError("outcomes and treatments shapes differ")
        n, t = y.shape
        if n < 2 or t < 2:
            raise ValidationError("panel requires N >= 2 and T >= 2")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes must be finite")
        bad = (w != 0) & (w != 1)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ValidationError(
                f"treatment must be 0 or 1; found {w[i, j]!r} at unit index {i},"
                f" period index {j}"
            )
        if self.covariates is not None:
            x = _as_float_matrix(self.covariates, "covariates")
            if x.shape[0] != n:
                raise ValidationError("covariates row count must equal N")
            if not np.all(np.isfinite(x)):
                raise ValidationError("covariates must be finite")
            object.__setattr__(self, "covariates", x)
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(range(n)))
        elif len(self.unit_ids) != n:
            raise ValidationError("unit_ids length must equal N")
        y.setflags(write=False)
        w.setflags(write=False)
        if self.covariates is not None:
            self.covariates.setflags(write=False)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]


@dataclass(frozen=True)
class AssignmentSupport:
    """Distinct treatment paths W_k with probabilities pi_k.

    Args:
      paths: binary K x T matrix with pairwise distinct rows.
      probs: length-K vector of positive probabilities summing to one.
    """

    paths: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        w = _as_float_matrix(self.paths, "paths")
        p = np.asarray(self.probs, dtype=float).ravel()
        object.__setattr__(self, "paths", w)
        object.__setattr__(self, "probs", p)
        if np.any((w != 0) & (w != 1)):
            raise ValidationError("paths must be binary")
        k, t = w.shape
        if p.size != k:
            raise ValidationError("probs length must match path count")
        if k > 2**t:
            raise ValidationError("more distinct paths than 2^T")
        if np.any(p <= 0):
            raise ValidationError("all probabilities must be positive")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError("probabilities must sum to 1")
        seen = {tuple(row) for row in w.astype(int).tolist()}
        if len(seen) != k:
            raise ValidationError("support rows must be pairwise distinct")
        w.setflags(write=False)
        p.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_periods(self) -> int:
        return self.paths.shape[1]


@dataclass(frozen=True)
class WeightTable:
    """Weights over (row, period) cells at population or sample level."""

    weights: np.ndarray
    level: str = "population"

    def __post_init__(self):
        w = _as_float_matrix(self.weights, "weights")
        object.__setattr__(self, "weights", w)
        if self.level not in ("population", "sample"):
            raise ValidationError("level must be 'population' or 'sample'")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite")
        w.setflags(write=False)


@dataclass(frozen=True)
class BasisSpec:
    """Dictionary of balance functions of (X_i, S_i, t).

    psi0 functions see (x_i, t); psi1 functions see (x_i, s_i, t) where
    s_i is the unit's statistic value. Each callable returns a fixed-size
    1-D vector; the full basis is their concatenation. A basis can instead
    carry a precomputed per-cell table (N x T x p), used verbatim.

    Args:
      psi0: callables (x, t) -> vector, covariate-by-time part.
      psi1: callables (x, s, t) -> vector, statistic-dependent part.
      name: label used in reports and config files.
      table: optional precomputed N x T x p array overriding the callables.
    """

    psi0: tuple = ()
    psi1: tuple = ()
    name: str = "custom"
    table: Optional[np.ndarray] = None

    def evaluate(self, data: PanelDataset, stat_values=None) -> np.ndarray:
        """Evaluate the basis on every cell, returning an N x T x p array."""
        n, t_len = data.n_units, data.n_periods
        if self.table is not None:
            table = np.asarray(self.table, dtype=float)
            if table.ndim != 3 or table.shape[:2] != (n, t_len):
                raise ValidationError("basis table shape does not match the panel")
            return table
        if self.psi1 and stat_values is None:
            raise ValidationError("basis has psi1 terms but no statistic given")
        rows = []
        for i in range(n):
            x_i = None if data.covariates is None else data.covariates[i]
            s_i = None if stat_values is None else stat_values[i]
            cells = []
            for t in range(t_len):
                parts = [np.atleast_1d(np.asarray(f(x_i, t), dtype=float)) for f in self.psi0]
                parts += [
                    np.atleast_1d(np.asarray(f(x_i, s_i, t), dtype=float)) for f in self.psi1
                ]
                cells.append(np.concatenate(parts) if parts else np.zeros(0))
            rows.append(cells)
        out = np.asarray(rows, dtype=float)
        if out.size and not np.all(np.isfinite(out)):
            raise ValidationError("basis produced non-finite values")
        return out

    @property
    def is_empty(self) -> bool:
        return not self.psi0 and not self.psi1


def load_panel(path, schema: Optional[dict] = None) -> PanelDataset:
    """Read a long-format CSV into a validated balanced PanelDataset.

    Args:
      path: CSV file with header row.
      schema: optional column-name mapping with keys 'unit', 'time', 'y',
        'w'; covariates are every column whose name starts with 'x'.

    Units and periods are indexed densely in sorted order of their
    identifiers. Raises ValidationError on unbalanced panels, non-binary
    treatments, or non-numeric outcomes.
    """
    names = {"unit": "unit", "time": "time", "y": "y", "w": "w"}
    if schema:
        names.update(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError("empty file")
        for key in ("unit", "time", "y", "w"):
            if names[key] not in reader.fieldnames:
                raise ValidationError(f"missing required column {names[key]!r}")
        x_cols = [
            c
            for c in reader.fieldnames
            if c not in names.values() and c.lower().startswith("x")
        ]
        records = list(reader)
    if not records:
        raise ValidationError("no data rows")

    cells = {}
    for lineno, rec in enumerate(records, start=2):
        unit = rec[names["unit"]]
        try:
            time = int(rec[names["time"]])
        except (TypeError, ValueError):
            raise ValidationError(f"non-integer time {rec[names['time']]!r} on line {lineno}")
        try:
            y = float(rec[names["y"]])
        except (TypeError, ValueError):
            raise ValidationError(
                f"non-numeric outcome {rec[names['y']]!r} at unit {unit}, time {time}"
            )
        try:
            w = float(rec[names["w"]])
        except (TypeError, ValueError):
            raise ValidationError(
                f"non-numeric treatment {rec[names['w']]!r} at unit {unit}, time {time}"
            )
        if w not in (0.0, 1.0):
            raise ValidationError(
                f"treatment must be 0 or 1; found {rec[names['w']]!r} at unit {unit},"
                f" time {time}"
            )
        try:
            xs = [float(rec[c]) for c in x_cols]
        except (TypeError, ValueError):
            raise ValidationError(f"non-numeric covariate at unit {unit}, time {time}")
        if (unit, time) in cells:
            raise ValidationError(f"duplicate cell for unit {unit}, time {time}")
        cells[(unit, time)] = (y, w, xs)

    units = sorted({u for u, _ in cells}, key=_unit_sort_key)
    times = sorted({t for _, t in cells})
    lo, hi = times[0], times[-1]
    expected = list(range(lo, hi + 1))
    if times != expected:
        raise ValidationError("time values must form a contiguous integer range")
    missing = [
        str(u) for u in units if any((u, t) not in cells for t in expected)
    ]
    if missing:
        raise ValidationError(f"unbalanced panel; units missing periods: {', '.join(missing)}")

    n, t_len = len(units), len(expected)
    y = np.empty((n, t_len))
    w = np.empty((n, t_len))
    x = np.empty((n, len(x_cols))) if x_cols else None
    for i, u in enumerate(units):
        for j, t in enumerate(expected):
            y[i, j], w[i, j], _ = cells[(u, t)]
        if x is not None:
            first = cells[(u, expected[0])][2]
            for j, t in enumerate(expected):
                if cells[(u, t)][2] != first:
                    raise ValidationError(
                        f"covariates must be time-invariant; unit {u} varies at time {t}"
                    )
            x[i] = first
    return PanelDataset(outcomes=y, treatments=w, covariates=x, unit_ids=tuple(units))


def _unit_sort_key(u: str):
    try:
        return (0, float(u), u)
    except ValueError:
        return (1, 0.0, u)


def write_panel(data: PanelDataset, path) -> None:
    """Write a PanelDataset to CSV so that load_panel round-trips it."""
    p = 0 if data.covariates is None else data.covariates.shape[1]
    header = ["unit", "time", "y", "w"] + [f"x{j + 1}" for j in range(p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n_units):
            for t in range(data.n_periods):
                row = [
                    data.unit_ids[i],
                    t + 1,
                    repr(float(data.outcomes[i, t])),
                    int(data.treatments[i, t]),
                ]
                if p:
                    row += [repr(float(v)) for v in data.covariates[i]]
                writer.writerow(row)


def empirical_support(data: PanelDataset) -> AssignmentSupport:
    """Distinct treatment paths with empirical frequencies.

    Rows are ordered lexicographically by path for determinism.
    """
    w = data.treatments.astype(int)
    paths, counts = np.unique(w, axis=0, return_counts=True)
    # np.unique sorts lexicographically by row already.
    return AssignmentSupport(paths=paths.astype(float), probs=counts / w.shape[0])
