"""Dataset container, CSV ingestion and cluster-robust covariance."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "ColumnSpec",
    "load_csv",
    "export_csv",
    "cluster_robust_vcov",
]


class DataError(ValueError):
    """Raised when data violate the structure the estimators rely on."""


def _first_bad_row(mask) -> int:
    return int(np.flatnonzero(mask)[0])


def _as_binary(name, values):
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    bad = ~np.isin(arr, (0, 1))
    if bad.any():
        i = _first_bad_row(bad)
        raise DataError(f"{name} must be coded 0/1; row {i} has {arr[i]!r}")
    return arr.astype(np.int8)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates and outcomes for one sample.

    ``x`` enters the participation index and ``z`` the reporting index.
    ``y_validated`` is the partially validated outcome (reported
    participation that survived the follow-up check) and must never exceed
    ``y_reported``.
    """

    x: np.ndarray
    z: np.ndarray
    y_reported: np.ndarray
    y_validated: Optional[np.ndarray] = None
    cluster_ids: Optional[np.ndarray] = None
    x_names: tuple = ()
    z_names: tuple = ()
    continuous_columns: tuple = ()

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        n = x.shape[0]
        if z.shape[0] != n:
            raise DataError(f"x has {n} rows but z has {z.shape[0]}")
        for name, m in (("x", x), ("z", z)):
            bad = ~np.isfinite(m).all(axis=1)
            if bad.any():
                raise DataError(f"{name} has missing or non-finite values at row {_first_bad_row(bad)}")
        yr = _as_binary("y_reported", self.y_reported)
        if yr.shape[0] != n:
            raise DataError("y_reported length does not match x")
        yv = None
        if self.y_validated is not None:
            yv = _as_binary("y_validated", self.y_validated)
            if yv.shape[0] != n:
                raise DataError("y_validated length does not match x")
            bad = yv > yr
            if bad.any():
                raise DataError(
                    f"partial-validation violation: y_validated=1 with y_reported=0 at row {_first_bad_row(bad)}")
        cl = None
        if self.cluster_ids is not None:
            cl = np.asarray(self.cluster_ids)
            if cl.shape != (n,):
                raise DataError("cluster_ids length does not match x")
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        z_names = tuple(self.z_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(x_names) != x.shape[1] or len(z_names) != z.shape[1]:
            raise DataError("column name count does not match matrix width")
        for attr, val in (("x", x), ("z", z), ("y_reported", yr), ("y_validated", yv),
                          ("cluster_ids", cl), ("x_names", x_names), ("z_names", z_names),
                          ("continuous_columns", tuple(self.continuous_columns))):
            object.__setattr__(self, attr, val)
        for arr in (x, z, yr, yv, cl):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def require_validated(self) -> np.ndarray:
        if self.y_validated is None:
            raise DataError("this estimator needs the validated outcome column")
        return self.y_validated

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            x=self.x[mask], z=self.z[mask], y_reported=self.y_reported[mask],
            y_validated=None if self.y_validated is None else self.y_validated[mask],
            cluster_ids=None if self.cluster_ids is None else self.cluster_ids[mask],
            x_names=self.x_names, z_names=self.z_names,
            continuous_columns=self.continuous_columns,
        )

    def validate_structure(self) -> None:
        """Rank conditions and the exclusion restriction."""
        for name, m in (("x", self.x), ("z", self.z)):
            if np.linalg.matrix_rank(m) < m.shape[1]:
                raise DataError(f"{name} is not of full column rank")
        xs, zs = set(self.x_names), set(self.z_names)
        if not (zs - xs) and not (xs - zs):
            raise DataError("no exclusion restriction: x and z contain the same columns")


@dataclass
class ColumnSpec:
    outcome_reported: str
    x_columns: Sequence[str]
    z_columns: Sequence[str]
    outcome_validated: Optional[str] = None
    cluster_column: Optional[str] = None
    continuous_columns: Sequence[str] = field(default_factory=list)
    # name used for an intercept column generated on load
    intercept_name: str = "const"

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ColumnSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "outcome_reported": self.outcome_reported,
            "outcome_validated": self.outcome_validated,
            "x_columns": list(self.x_columns),
            "z_columns": list(self.z_columns),
            "cluster_column": self.cluster_column,
            "continuous_columns": list(self.continuous_columns),
            "intercept_name": self.intercept_name,
        }


def load_csv(path, spec: ColumnSpec, validate: bool = True) -> Dataset:
    """Read a header-first CSV into a :class:`Dataset`.

    A name in ``x_columns``/``z_columns`` equal to ``spec.intercept_name``
    that is absent from the file is filled with ones.  Values are parsed as
    floats with ``float()``, so exported data round-trip exactly.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    index = {h: j for j, h in enumerate(header)}
    wanted = [spec.outcome_reported, *spec.x_columns, *spec.z_columns]
    if spec.outcome_validated:
        wanted.append(spec.outcome_validated)
    if spec.cluster_column:
        wanted.append(spec.cluster_column)
    missing = [c for c in wanted if c not in index and c != spec.intercept_name]
    if missing:
        raise DataError(f"{path}: columns not found in header: {missing}")

    n = len(rows)
    cols = {}

    def column(name, numeric=True):
        if name in cols:
            return cols[name]
        if name == spec.intercept_name and name not in index:
            cols[name] = np.ones(n)
            return cols[name]
        j = index[name]
        out = []
        for i, row in enumerate(rows):
            if len(row) != len(header):
                raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
            cell = row[j].strip()
            if cell == "":
                raise DataError(f"{path}: missing value in column {name!r} at row {i}")
            if numeric:
                try:
                    out.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {cell!r} in column {name!r} at row {i}") from None
            else:
                out.append(cell)
        cols[name] = np.asarray(out) if not numeric else np.asarray(out, dtype=float)
        return cols[name]

    def binary(name):
        vals = column(name)
        bad = ~np.isin(vals, (0.0, 1.0))
        if bad.any():
            i = _first_bad_row(bad)
            raise DataError(f"{path}: column {name!r} must be 0/1; row {i} has {rows[i][index[name]]!r}")
        return vals.astype(np.int8)

    x = np.column_stack([column(c) for c in spec.x_columns]) if spec.x_columns else np.empty((n, 0))
    z = np.column_stack([column(c) for c in spec.z_columns]) if spec.z_columns else np.empty((n, 0))
    yr = binary(spec.outcome_reported)
    yv = binary(spec.outcome_validated) if spec.outcome_validated else None
    if yv is not None and (yv > yr).any():
        i = _first_bad_row(yv > yr)
        raise DataError(f"{path}: partial-validation violation at row {i}: "
                        f"{spec.outcome_validated}=1 but {spec.outcome_reported}=0")
    cl = column(spec.cluster_column, numeric=False) if spec.cluster_column else None
    data = Dataset(x=x, z=z, y_reported=yr, y_validated=yv, cluster_ids=cl,
                   x_names=tuple(spec.x_columns), z_names=tuple(spec.z_columns),
                   continuous_columns=tuple(spec.continuous_columns))
    if validate:
        data.validate_structure()
    return data


def export_csv(data: Dataset, path, spec: Optional[ColumnSpec] = None,
               extra: Optional[dict] = None) -> ColumnSpec:
    """Write ``data`` as CSV and return the matching :class:`ColumnSpec`.

    Floats are written with ``repr`` so that :func:`load_csv` reproduces
    them bit for bit.  ``extra`` maps column names to additional 1-d arrays.
    """
    names = list(dict.fromkeys([*data.x_names, *data.z_names]))
    mat = {}
    for j, nm in enumerate(data.x_names):
        mat[nm] = data.x[:, j]
    for j, nm in enumerate(data.z_names):
        if nm in mat and not np.array_equal(mat[nm], data.z[:, j]):
            raise DataError(f"column {nm!r} differs between x and z")
        mat[nm] = data.z[:, j]
    if spec is None:
        spec = ColumnSpec(
            outcome_reported="y_reported",
            outcome_validated="y_validated" if data.y_validated is not None else None,
            x_columns=list(data.x_names), z_columns=list(data.z_names),
            cluster_column="cluster" if data.cluster_ids is not None else None,
            continuous_columns=list(data.continuous_columns),
        )
    header = names + [spec.outcome_reported]
    cols = [mat[nm] for nm in names] + [data.y_reported]
    if data.y_validated is not None:
        header.append(spec.outcome_validated)
        cols.append(data.y_validated)
    if data.cluster_ids is not None:
        header.append(spec.cluster_column)
        cols.append(data.cluster_ids)
    for nm, arr in (extra or {}).items():
        header.append(nm)
        cols.append(np.asarray(arr))

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, (np.integer,)):
            return str(int(v))
        return str(v)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            w.writerow([fmt(c[i]) for c in cols])
    return spec


def cluster_robust_vcov(fit, data: Dataset) -> np.ndarray:
    """Cluster-robust sandwich covariance for a fitted likelihood model.

    ``B^{-1} (sum_g S_g S_g') B^{-1}`` with ``B = sum_i S_i S_i'`` the
    outer-product information and ``S_g`` the within-cluster score sums.
    No finite-cluster correction is applied, so singleton clusters reproduce
    the plain OPG covariance.
    """
    if data.cluster_ids is None:
        raise DataError("dataset has no cluster identifiers")
    scores = getattr(fit, "scores", None)
    if scores is None:
        raise DataError("fit carries no individual scores")
    if scores.shape[0] != data.n:
        raise DataError("fit scores do not match the dataset size")
    _, inverse = np.unique(data.cluster_ids, return_inverse=True)
    n_groups = int(inverse.max()) + 1
    if n_groups < 2:
        raise DataError("cluster-robust covariance needs at least two clusters")
    sums = np.zeros((n_groups, scores.shape[1]))
    np.add.at(sums, inverse, scores)
    bread = np.linalg.inv(scores.T @ scores)
    meat = sums.T @ sums
    out = bread @ meat @ bread
    return 0.5 * (out + out.T)
