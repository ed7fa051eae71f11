"""Dataset containers, CSV ingestion and stratified train/calibration splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Invalid input data: bad CSV cell, non-binary treatment, non-finite value."""


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (n, d), binary treatment ``t``, factual outcome ``y``.

    ``counterfactual_truth`` holds Y(1 - T) and is only known for synthetic data.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    counterfactual_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"covariates must be a non-empty (n, d) matrix, got shape {x.shape}")
        n = x.shape[0]
        t_raw = np.asarray(self.treatment, dtype=float).ravel()
        y = np.asarray(self.outcome, dtype=float).ravel()
        if t_raw.shape[0] != n or y.shape[0] != n:
            raise DataError(
                f"length mismatch: covariates {n}, treatment {t_raw.shape[0]}, outcome {y.shape[0]}"
            )
        if not np.all((t_raw == 0) | (t_raw == 1)):
            bad = int(np.flatnonzero((t_raw != 0) & (t_raw != 1))[0])
            raise DataError(f"treatment must be 0/1, got {t_raw[bad]!r} at row {bad + 1}")
        _check_finite("covariates", x)
        _check_finite("outcome", y)
        cf = self.counterfactual_truth
        if cf is not None:
            cf = np.asarray(cf, dtype=float).ravel()
            if cf.shape[0] != n:
                raise DataError(f"counterfactual_truth has length {cf.shape[0]}, expected {n}")
            _check_finite("counterfactual_truth", cf)
            cf.setflags(write=False)
        t = t_raw.astype(np.int8)
        for arr in (x, t, y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "counterfactual_truth", cf)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def arm(self, t: int) -> np.ndarray:
        """Row indices of units with treatment ``t``."""
        return np.flatnonzero(self.treatment == t)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        cf = None if self.counterfactual_truth is None else self.counterfactual_truth[idx]
        return Dataset(self.covariates[idx], self.treatment[idx], self.outcome[idx], cf)

    def units(self) -> list["Unit"]:
        return [Unit(self.covariates[i], float(self.outcome[i]), int(self.treatment[i])) for i in range(self.n)]

    def require_both_arms(self):
        for t in (0, 1):
            if not np.any(self.treatment == t):
                raise DataError(f"treatment arm {t} is empty; both arms are needed to fit")


def _check_finite(name: str, arr: np.ndarray):
    bad = ~np.isfinite(arr)
    if bad.any():
        pos = np.argwhere(bad)[0]
        where = f"row {pos[0] + 1}" + (f", column {pos[1] + 1}" if arr.ndim == 2 else "")
        raise DataError(f"non-finite value in {name} at {where}")


@dataclass(frozen=True)
class Unit:
    """A query point: covariates ``x``, factual outcome ``y_obs`` observed under arm ``t``."""

    x: np.ndarray
    y_obs: float
    t: int

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.ndim != 1:
            raise DataError("unit covariates must be a vector")
        if not (np.all(np.isfinite(x)) and math.isfinite(self.y_obs)):
            raise DataError("unit has non-finite entries")
        if self.t not in (0, 1):
            raise DataError(f"unit treatment must be 0 or 1, got {self.t!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y_obs", float(self.y_obs))
        object.__setattr__(self, "t", int(self.t))


@dataclass(frozen=True)
class CsvSchema:
    """Column-role mapping for CSV files (roles are declared, never positional)."""

    x_cols: Sequence[str]
    t_col: str
    y_col: str
    cf_col: Optional[str] = None

    def __post_init__(self):
        if not self.x_cols:
            raise DataError("schema needs at least one covariate column")
        object.__setattr__(self, "x_cols", tuple(self.x_cols))


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read a comma-delimited file with a header row into a validated :class:`Dataset`.

    Errors name the 1-based data row (header excluded) and the column.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        roles = list(schema.x_cols) + [schema.t_col, schema.y_col]
        if schema.cf_col is not None:
            roles.append(schema.cf_col)
        missing = [c for c in roles if c not in header]
        if missing:
            raise DataError(f"{path}: mapped column(s) not in header: {', '.join(missing)}")
        pos = {name: header.index(name) for name in roles}
        x_rows, t_vals, y_vals, cf_vals = [], [], [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")

            def cell(col):
                raw = row[pos[col]].strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise DataError(f"{path}: row {r}, column {col!r}: non-numeric value {raw!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {r}, column {col!r}: non-finite value {raw!r}")
                return v

            x_rows.append([cell(c) for c in schema.x_cols])
            tv = cell(schema.t_col)
            if tv not in (0.0, 1.0):
                raise DataError(f"{path}: row {r}, column {schema.t_col!r}: treatment must be 0 or 1, got {row[pos[schema.t_col]].strip()!r}")
            t_vals.append(tv)
            y_vals.append(cell(schema.y_col))
            if schema.cf_col is not None:
                cf_vals.append(cell(schema.cf_col))
    if not x_rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(
        np.array(x_rows, dtype=float),
        np.array(t_vals),
        np.array(y_vals),
        np.array(cf_vals) if schema.cf_col is not None else None,
    )


def write_csv(ds: Dataset, path, schema: Optional[CsvSchema] = None) -> CsvSchema:
    """Write ``ds`` with full-precision floats; returns the schema used."""
    if schema is None:
        schema = CsvSchema(
            [f"x{j + 1}" for j in range(ds.d)], "t", "y",
            "y_cf" if ds.counterfactual_truth is not None else None,
        )
    header = list(schema.x_cols) + [schema.t_col, schema.y_col]
    if schema.cf_col is not None:
        if ds.counterfactual_truth is None:
            raise DataError("schema maps a counterfactual column but the dataset has none")
        header.append(schema.cf_col)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.covariates[i]]
            row += [str(int(ds.treatment[i])), repr(float(ds.outcome[i]))]
            if schema.cf_col is not None:
                row.append(repr(float(ds.counterfactual_truth[i])))
            w.writerow(row)
    return schema


def write_metadata(path, items: dict):
    """Plain-text ``key=value`` sidecar, one entry per line, keys sorted."""
    with Path(path).open("w") as fh:
        for k in sorted(items):
            fh.write(f"{k}={items[k]}\n")


def read_metadata(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise DataError(f"{path}: expected key=value, got {line!r}")
        out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class SplitPlan:
    train_indices: np.ndarray
    calib_indices: np.ndarray
    seed: int = field(default=0)


def split(ds: Dataset, calib_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """Stratified train/calibration split.

    Each arm contributes ``floor(calib_fraction * n_arm)`` calibration units,
    the remainder go to training. Pure function of ``(ds, calib_fraction, seed)``.
    """
    if not 0.0 < calib_fraction < 1.0:
        raise ValueError(f"calib_fraction must be in (0, 1), got {calib_fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5B1]))
    train, calib = [], []
    for t in (0, 1):
        idx = ds.arm(t)
        if idx.size < 2:
            raise DataError(f"arm {t} has {idx.size} unit(s); at least 2 are needed to stratify")
        k = math.floor(calib_fraction * idx.size + 1e-9)
        if k < 1:
            raise DataError(
                f"arm {t} has {idx.size} units; calib_fraction {calib_fraction} gives no calibration unit"
            )
        if k >= idx.size:
            raise DataError(f"arm {t}: calib_fraction {calib_fraction} leaves no training unit")
        perm = rng.permutation(idx)
        calib.append(perm[:k])
        train.append(perm[k:])
    return SplitPlan(np.sort(np.concatenate(train)), np.sort(np.concatenate(calib)), int(seed))
