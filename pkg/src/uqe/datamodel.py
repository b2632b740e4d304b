"""Core value types: targets, subject records, datasets, standardization and folds.

A :class:`Dataset` stores its content column-wise (feature matrix, target
matrix with NaN for missing values, boolean presence mask) so that training
and evaluation can work on arrays directly. :attr:`Dataset.records` gives the
row-wise view.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class TargetId(str, enum.Enum):
    VAT = "VAT"
    SAT = "SAT"
    TAT = "TAT"
    TLT = "TLT"
    TTM = "TTM"
    LFF = "LFF"


@dataclass(frozen=True)
class TargetSpec:
    id: TargetId
    unit: str
    display_name: str


TARGETS: tuple[TargetSpec, ...] = (
    TargetSpec(TargetId.VAT, "L", "Visceral Adipose Tissue"),
    TargetSpec(TargetId.SAT, "L", "Abdominal Subcutaneous Adipose Tissue"),
    TargetSpec(TargetId.TAT, "L", "Total Adipose Tissue"),
    TargetSpec(TargetId.TLT, "L", "Total Lean Tissue"),
    TargetSpec(TargetId.TTM, "L", "Total Thigh Muscle"),
    TargetSpec(TargetId.LFF, "%", "Liver Fat Fraction"),
)
TARGET_NAMES: tuple[str, ...] = tuple(t.id.value for t in TARGETS)
N_TARGETS = len(TARGETS)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    features: tuple[float, ...]
    targets: tuple[float | None, ...]
    target_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.targets) != len(self.target_mask):
            raise DataError(f"subject {self.subject_id!r}: targets and mask differ in length")
        for value, present in zip(self.targets, self.target_mask):
            if present != (value is not None):
                raise DataError(f"subject {self.subject_id!r}: mask does not match targets")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered collection of subjects with features and optional targets.

    Args:
        ids: Subject identifiers, unique.
        features: ``(N, D)`` float array.
        targets: ``(N, T)`` float array, NaN where a target is missing.
        provenance: Free-form origin description.
    """

    ids: tuple[str, ...]
    features: np.ndarray
    targets: np.ndarray
    provenance: str = ""
    target_names: tuple[str, ...] = TARGET_NAMES

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        features = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(ids):
            raise DataError("features must be an (N, D) array matching the number of ids")
        if features.shape[1] < 1:
            raise DataError("feature_dim must be positive")
        if targets.shape != (len(ids), len(self.target_names)):
            raise DataError(f"targets must have shape ({len(ids)}, {len(self.target_names)})")
        if not np.all(np.isfinite(features)):
            raise DataError("features must be finite")
        if np.any(np.isinf(targets)):
            raise DataError("targets must be finite or missing")
        seen: set[str] = set()
        for subject_id in ids:
            if subject_id in seen:
                raise DataError(f"duplicate subject_id {subject_id!r}")
            seen.add(subject_id)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "targets", _frozen(targets))
        object.__setattr__(self, "target_names", tuple(self.target_names))

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], provenance: str = "",
                     target_names: Sequence[str] = TARGET_NAMES) -> "Dataset":
        if not records:
            raise DataError("a dataset needs at least one record")
        dims = {len(r.features) for r in records}
        if len(dims) != 1:
            raise DataError("feature length differs between records")
        feats = np.array([r.features for r in records], dtype=np.float64)
        targs = np.array([[np.nan if v is None else v for v in r.targets] for r in records],
                         dtype=np.float64)
        return cls(tuple(r.subject_id for r in records), feats, targs, provenance,
                   tuple(target_names))

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.targets)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_targets(self) -> int:
        return len(self.target_names)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def records(self) -> list[SubjectRecord]:
        out = []
        for i, subject_id in enumerate(self.ids):
            row = self.targets[i]
            out.append(SubjectRecord(
                subject_id,
                tuple(float(v) for v in self.features[i]),
                tuple(None if math.isnan(v) else float(v) for v in row),
                tuple(not math.isnan(v) for v in row),
            ))
        return out

    def subset(self, index: Iterable[int] | np.ndarray, provenance: str | None = None) -> "Dataset":
        index = np.asarray(list(index) if not isinstance(index, np.ndarray) else index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(tuple(self.ids[i] for i in index), self.features[index],
                       self.targets[index],
                       self.provenance if provenance is None else provenance,
                       self.target_names)

    def equals(self, other: "Dataset") -> bool:
        return (self.ids == other.ids and self.target_names == other.target_names
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.targets, other.targets, equal_nan=True))


# --------------------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`ingest_csv`.

    ``targets`` maps target names to column names; targets not listed are
    treated as entirely missing.
    """

    id_column: str
    feature_columns: tuple[str, ...]
    targets: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def infer(cls, header: Sequence[str], id_column: str = "subject_id") -> "CsvSchema":
        """Schema for files written by :func:`export_csv`: every non-id,
        non-target column is a feature."""
        if id_column not in header:
            raise DataError(f"missing id column {id_column!r}")
        targets = {name: name for name in TARGET_NAMES if name in header}
        feats = tuple(c for c in header if c != id_column and c not in targets)
        return cls(id_column, feats, targets)


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}: non-numeric {what} {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: non-finite {what} {text!r}")
    return value


def ingest_csv(path: str | Path, schema: CsvSchema | None = None, provenance: str | None = None) -> Dataset:
    """Read a dataset from a UTF-8 comma-separated file with a header row.

    Empty target cells denote missing values. Row numbers in error messages
    count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if schema is None:
            schema = CsvSchema.infer(header)
        if not schema.feature_columns:
            raise DataError("schema needs at least one feature column")
        unknown = set(schema.targets) - set(TARGET_NAMES)
        if unknown:
            raise DataError(f"unknown targets in schema: {sorted(unknown)}")
        col = {name: i for i, name in enumerate(header)}
        needed = [schema.id_column, *schema.feature_columns, *schema.targets.values()]
        missing = [c for c in needed if c not in col]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        id_i = col[schema.id_column]
        feat_i = [col[c] for c in schema.feature_columns]
        targ_i = [col[schema.targets[t]] if t in schema.targets else None for t in TARGET_NAMES]

        ids: list[str] = []
        seen: dict[str, int] = {}
        feats: list[list[float]] = []
        targs: list[list[float]] = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            subject_id = row[id_i]
            if not subject_id:
                raise DataError(f"row {row_no}: empty subject_id")
            if subject_id in seen:
                raise DataError(f"row {row_no}: duplicate subject_id {subject_id!r} "
                                f"(first seen in row {seen[subject_id]})")
            seen[subject_id] = row_no
            ids.append(subject_id)
            feats.append([_parse_float(row[i], "feature", row_no) for i in feat_i])
            targs.append([np.nan if i is None or row[i].strip() == ""
                          else _parse_float(row[i], "target", row_no) for i in targ_i])
    if not ids:
        raise DataError(f"{path}: no data rows")
    return Dataset(tuple(ids), np.array(feats), np.array(targs),
                   str(path) if provenance is None else provenance)


def export_csv(data: Dataset, path: str | Path, feature_prefix: str = "f") -> None:
    """Write ``data`` in the dialect read by :func:`ingest_csv` (round-trip exact)."""
    feature_cols = [f"{feature_prefix}{j}" for j in range(data.feature_dim)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", *feature_cols, *data.target_names])
        for i, subject_id in enumerate(data.ids):
            writer.writerow([subject_id, *(repr(float(v)) for v in data.features[i]),
                             *("" if math.isnan(v) else repr(float(v)) for v in data.targets[i])])


# ------------------------------------------------------------------- standardizer


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-target affine map to zero mean and unit sample standard deviation."""

    mean: np.ndarray
    std: np.ndarray
    fitted: bool = True

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-d arrays of equal length")
        if self.fitted and not np.all(std > 0):
            raise ValueError("std must be positive")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "std", _frozen(std))

    def _check(self):
        if not self.fitted:
            raise RuntimeError("standardizer is not fitted")

    def forward(self, values):
        """Map original-unit values to z-scores; NaN (missing) passes through."""
        self._check()
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values):
        self._check()
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def inverse_variance(self, variances):
        self._check()
        return np.asarray(variances, dtype=np.float64) * self.std ** 2

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_standardizer(train: Dataset) -> Standardizer:
    """Per-target mean and unbiased (n-1) standard deviation over present values."""
    means, stds = [], []
    for t, name in enumerate(train.target_names):
        column = train.targets[:, t]
        present = column[~np.isnan(column)]
        if present.size < 2:
            raise DataError(f"target {name}: fewer than 2 present values")
        std = float(np.std(present, ddof=1))
        if not std > 0:
            raise DataError(f"target {name}: zero spread")
        means.append(float(np.mean(present)))
        stds.append(std)
    return Standardizer(np.array(means), np.array(stds))


# -------------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    fold_of: Mapping[str, int]

    def members(self, fold: int, ids: Sequence[str]) -> np.ndarray:
        """Row indices (into ``ids``) belonging to ``fold``."""
        return np.array([i for i, s in enumerate(ids) if self.fold_of[s] == fold], dtype=np.intp)

    def sizes(self) -> list[int]:
        counts = [0] * self.n_folds
        for f in self.fold_of.values():
            counts[f] += 1
        return counts

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "fold_of": dict(self.fold_of)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldAssignment":
        return cls(int(d["n_folds"]), {str(k): int(v) for k, v in d["fold_of"].items()})


def assign_folds(data: Dataset, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Seeded random permutation split into ``k`` contiguous chunks."""
    if k < 2:
        raise ValueError("k must be at least 2")
    n = len(data)
    if k > n:
        raise ValueError(f"cannot split {n} records into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    fold_of: dict[str, int] = {}
    for fold, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            fold_of[data.ids[i]] = fold
    return FoldAssignment(k, fold_of)
