"""Deep ensembles of MLP regressors: training, aggregation, inference, CV."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import (Dataset, FoldAssignment, Standardizer, assign_folds,
                        fit_standardizer)
from .net import NetConfig, NetParams, TrainLog, forward, train
from .uncertainty import fit_scaling_factor


@dataclass(frozen=True)
class EnsembleConfig:
    net: NetConfig
    members: int = 10
    fold_withholding: bool = True
    member_seeds: tuple[int, ...] | None = None
    n_folds: int = 10
    fold_seed: int = 0
    # variance_recal = variance * factor ** factor_exponent (2: factors scale sigma)
    factor_exponent: float = 2.0

    def __post_init__(self):
        if self.members < 1:
            raise ValueError("an ensemble needs at least one member")
        if self.members == 1 and self.net.head == "least_squares":
            raise ValueError("a single least-squares network provides no uncertainty")
        seeds = self.member_seeds
        if seeds is None:
            seeds = tuple(self.net.seed + m for m in range(self.members))
        seeds = tuple(int(s) for s in seeds)
        if len(seeds) != self.members:
            raise ValueError(f"expected {self.members} member seeds, got {len(seeds)}")
        object.__setattr__(self, "member_seeds", seeds)
        if self.fold_withholding and self.members > self.n_folds:
            raise ValueError(f"cannot withhold distinct folds for {self.members} members "
                             f"with {self.n_folds} folds")
        if self.factor_exponent <= 0:
            raise ValueError("factor_exponent must be positive")

    @property
    def head(self) -> str:
        return self.net.head

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["member_seeds"] = list(self.member_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        d = dict(d)
        net = dict(d.pop("net"))
        if net.get("image_shape") is not None:
            net["image_shape"] = tuple(net["image_shape"])
        net["hidden"] = tuple(net.get("hidden", (64, 64)))
        if d.get("member_seeds") is not None:
            d["member_seeds"] = tuple(d["member_seeds"])
        return cls(NetConfig(**net), **d)


@dataclass(eq=False)
class EnsembleBundle:
    config: EnsembleConfig
    members: list[NetParams]
    standardizer: Standardizer
    factors: np.ndarray
    folds: FoldAssignment | None = None
    logs: list[TrainLog] = field(default_factory=list)

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64)
        if len(self.members) != self.config.members:
            raise ValueError("member count does not match config")
        if self.factors.shape != (self.config.net.n_targets,) or np.any(self.factors <= 0):
            raise ValueError("need one positive scaling factor per target")

    def with_factors(self, factors) -> "EnsembleBundle":
        return EnsembleBundle(self.config, self.members, self.standardizer,
                              np.asarray(factors, dtype=np.float64), self.folds, self.logs)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.config.to_dict(),
            "factors": [float(f) for f in self.factors],
            "standardizer": self.standardizer.to_dict(),
            "folds": None if self.folds is None else self.folds.to_dict(),
            "member_files": [f"member_{m:02d}.json" for m in range(len(self.members))],
        }
        _write_json(directory / "bundle.json", meta)
        for name, params, m in zip(meta["member_files"], self.members, range(len(self.members))):
            payload = params.to_dict()
            if m < len(self.logs):
                payload["train_log"] = self.logs[m].to_dict()
            _write_json(directory / name, payload)

    @classmethod
    def load(cls, directory: str | Path) -> "EnsembleBundle":
        directory = Path(directory)
        meta = json.loads((directory / "bundle.json").read_text())
        members = [NetParams.from_dict(json.loads((directory / name).read_text()))
                   for name in meta["member_files"]]
        folds = None if meta["folds"] is None else FoldAssignment.from_dict(meta["folds"])
        return cls(EnsembleConfig.from_dict(meta["config"]), members,
                   Standardizer.from_dict(meta["standardizer"]), np.array(meta["factors"]), folds)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------- training


def _train_member(args):
    net_cfg, data, standardizer, folds, fold = args
    return train(net_cfg, data, standardizer, folds, fold)


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def train_ensemble(cfg: EnsembleConfig, train_set: Dataset, jobs: int = 1) -> EnsembleBundle:
    """Train ``cfg.members`` networks; member ``m`` withholds fold ``m``.

    The standardizer is fitted once on the whole of ``train_set``.
    """
    standardizer = fit_standardizer(train_set)
    folds = None
    if cfg.fold_withholding:
        if len(train_set) < cfg.n_folds:
            raise ValueError(f"{len(train_set)} samples are too few for {cfg.n_folds} folds")
        folds = assign_folds(train_set, cfg.n_folds, cfg.fold_seed)
    tasks = [(replace(cfg.net, seed=seed), train_set, standardizer, folds,
              m if cfg.fold_withholding else None)
             for m, seed in enumerate(cfg.member_seeds)]
    results = _map(_train_member, tasks, jobs)
    return EnsembleBundle(cfg, [p for p, _ in results], standardizer,
                          np.ones(cfg.net.n_targets), folds, [log for _, log in results])


# -------------------------------------------------------------------- aggregation


def aggregate(member_means, member_variances=None):
    """Uniform-mixture moments over the leading (member) axis.

    Returns ``(mean, variance)`` where variance is the mean member variance
    (zero for least-squares members) plus the population variance of the
    member means.
    """
    mu = np.asarray(member_means, dtype=np.float64)
    if mu.shape[0] < 1:
        raise ValueError("need at least one member")
    # centring on the first member keeps identical members at exactly zero spread
    dev = mu - mu[0]
    shift = dev.mean(axis=0)
    mean = mu[0] + shift
    spread = np.mean((dev - shift) ** 2, axis=0)
    if member_variances is None:
        return mean, spread
    var = np.asarray(member_variances, dtype=np.float64)
    if var.shape != mu.shape:
        raise ValueError("member means and variances differ in shape")
    return mean, var.mean(axis=0) + spread


@dataclass(frozen=True)
class PredictionRecord:
    subject_id: str
    target: str
    mean: float
    variance: float
    variance_recal: float
    member_means: tuple[float, ...]
    member_variances: tuple[float, ...] | None
    reference: float | None = None


_BASE_COLUMNS = ["subject_id", "target", "mean", "variance", "variance_recal", "reference"]


@dataclass(eq=False)
class PredictionTable:
    """Predictions for ``N`` subjects and ``T`` targets in original units.

    ``member_means`` and ``member_variances`` have shape ``(M, N, T)``;
    ``reference`` holds known target values (NaN when missing).
    """

    ids: tuple[str, ...]
    target_names: tuple[str, ...]
    mean: np.ndarray
    variance: np.ndarray
    variance_recal: np.ndarray
    member_means: np.ndarray | None = None
    member_variances: np.ndarray | None = None
    reference: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def sigma_recal(self) -> np.ndarray:
        return np.sqrt(self.variance_recal)

    @property
    def records(self) -> list[PredictionRecord]:
        out = []
        for i, subject_id in enumerate(self.ids):
            for t, name in enumerate(self.target_names):
                mm = () if self.member_means is None else tuple(self.member_means[:, i, t].tolist())
                mv = None if self.member_variances is None else tuple(self.member_variances[:, i, t].tolist())
                ref = None
                if self.reference is not None and not math.isnan(self.reference[i, t]):
                    ref = float(self.reference[i, t])
                out.append(PredictionRecord(subject_id, name, float(self.mean[i, t]),
                                            float(self.variance[i, t]), float(self.variance_recal[i, t]),
                                            mm, mv, ref))
        return out

    def take(self, index) -> "PredictionTable":
        index = np.asarray(index, dtype=np.intp)
        pick = (lambda a: None if a is None else a[index])
        pick_m = (lambda a: None if a is None else a[:, index])
        return PredictionTable(tuple(self.ids[i] for i in index), self.target_names,
                               self.mean[index], self.variance[index], self.variance_recal[index],
                               pick_m(self.member_means), pick_m(self.member_variances),
                               pick(self.reference))

    @classmethod
    def concat(cls, tables: Sequence["PredictionTable"]) -> "PredictionTable":
        first = tables[0]

        def cat(attr, axis=0):
            parts = [getattr(t, attr) for t in tables]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts, axis=axis)

        return cls(tuple(i for t in tables for i in t.ids), first.target_names,
                   cat("mean"), cat("variance"), cat("variance_recal"),
                   cat("member_means", 1), cat("member_variances", 1), cat("reference"))

    def write_csv(self, path: str | Path, include_members: bool = True) -> None:
        m = 0 if self.member_means is None or not include_members else self.member_means.shape[0]
        with_var = include_members and self.member_variances is not None
        header = list(_BASE_COLUMNS)
        header += [f"member_mean_{k}" for k in range(m)]
        if with_var:
            header += [f"member_var_{k}" for k in range(m)]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, subject_id in enumerate(self.ids):
                for t, name in enumerate(self.target_names):
                    ref = "" if self.reference is None or math.isnan(self.reference[i, t]) \
                        else repr(float(self.reference[i, t]))
                    row = [subject_id, name, repr(float(self.mean[i, t])), repr(float(self.variance[i, t])),
                           repr(float(self.variance_recal[i, t])), ref]
                    row += [repr(float(v)) for v in self.member_means[:m, i, t]] if m else []
                    if with_var:
                        row += [repr(float(v)) for v in self.member_variances[:, i, t]]
                    writer.writerow(row)

    @classmethod
    def read_csv(cls, path: str | Path) -> "PredictionTable":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:len(_BASE_COLUMNS)] != _BASE_COLUMNS:
                raise ValueError(f"{path}: unexpected prediction header")
            rows = list(reader)
        mm_cols = [i for i, h in enumerate(header) if h.startswith("member_mean_")]
        mv_cols = [i for i, h in enumerate(header) if h.startswith("member_var_")]
        ids: list[str] = []
        names: list[str] = []
        for r in rows:
            if not ids or ids[-1] != r[0]:
                if r[0] in ids:
                    raise ValueError(f"{path}: rows for subject {r[0]!r} are not contiguous")
                ids.append(r[0])
            if r[1] not in names:
                names.append(r[1])
        n, t = len(ids), len(names)
        if len(rows) != n * t:
            raise ValueError(f"{path}: expected {n * t} rows, got {len(rows)}")
        arr = np.full((4, n, t), np.nan)
        mm = np.full((len(mm_cols), n, t), np.nan)
        mv = np.full((len(mv_cols), n, t), np.nan)
        row_of = {s: i for i, s in enumerate(ids)}
        col_of = {s: j for j, s in enumerate(names)}
        for r in rows:
            i, j = row_of[r[0]], col_of[r[1]]
            arr[:, i, j] = [float(r[2]), float(r[3]), float(r[4]), float(r[5]) if r[5] else np.nan]
            mm[:, i, j] = [float(r[c]) for c in mm_cols]
            mv[:, i, j] = [float(r[c]) for c in mv_cols]
        return cls(tuple(ids), tuple(names), arr[0], arr[1], arr[2],
                   mm if mm_cols else None, mv if mv_cols else None, arr[3])


def predict(bundle: EnsembleBundle, data: Dataset) -> PredictionTable:
    """Ensemble predictions in original target units, with references from ``data``."""
    cfg = bundle.config
    if data.feature_dim != cfg.net.input_dim:
        raise ValueError(f"bundle expects {cfg.net.input_dim} features, data has {data.feature_dim}")
    outs = [forward(p, data.features, cfg.head) for p in bundle.members]
    z_means = np.stack([o.mean for o in outs])
    z_vars = None if cfg.head == "least_squares" else np.stack([o.variance for o in outs])
    z_mean, z_var = aggregate(z_means, z_vars)
    std = bundle.standardizer
    variance = std.inverse_variance(z_var)
    return PredictionTable(
        ids=data.ids,
        target_names=data.target_names,
        mean=std.inverse(z_mean),
        variance=variance,
        variance_recal=variance * bundle.factors ** cfg.factor_exponent,
        member_means=std.inverse(z_means),
        member_variances=None if z_vars is None else std.inverse_variance(z_vars),
        reference=np.array(data.targets),
    )


def fit_recalibration(table: PredictionTable, factor_exponent: float = 2.0, grid=None) -> np.ndarray:
    """Per-target factors minimizing AUCE on tables with references.

    The fitted multiplier acts on sigma; it is stored as the factor ``f``
    with ``f ** factor_exponent == sigma_multiplier ** 2``.
    """
    if table.reference is None:
        raise ValueError("recalibration needs reference values")
    factors = []
    for t, name in enumerate(table.target_names):
        present = ~np.isnan(table.reference[:, t])
        if not np.any(present):
            factors.append(1.0)
            continue
        resid = table.reference[present, t] - table.mean[present, t]
        s = fit_scaling_factor(resid, np.sqrt(table.variance[present, t]), grid)
        factors.append(s ** (2.0 / factor_exponent))
    return np.array(factors)


def jensen_violations(table: PredictionTable, rel_tol: float = 1e-12) -> int:
    """Count subject-targets where ``|y - mean|`` exceeds the mean member error."""
    if table.member_means is None or table.reference is None:
        raise ValueError("need member means and references")
    present = ~np.isnan(table.reference)
    y = table.reference
    ens = np.abs(y - table.mean)
    members = np.mean(np.abs(y[None] - table.member_means), axis=0)
    slack = rel_tol * (np.abs(y) + np.abs(table.mean) + members)
    return int(np.count_nonzero(present & (ens > members + slack)))


# ---------------------------------------------------------------- cross-validation


@dataclass(eq=False)
class CrossValResult:
    folds: FoldAssignment
    bundles: list[EnsembleBundle]
    fold_predictions: list[PredictionTable]
    merged: PredictionTable


def run_cross_validation(cfg: EnsembleConfig, data: Dataset, k: int = 10, seed: int = 0,
                         jobs: int = 1) -> CrossValResult:
    """Train on ``k - 1`` folds and predict the held-out fold, for every fold.

    ``merged`` holds one out-of-fold prediction per subject, in the order of
    ``data``.
    """
    folds = assign_folds(data, k, seed)
    bundles, tables = [], []
    position = np.empty(len(data), dtype=np.intp)
    order: list[int] = []
    for f in range(k):
        test_idx = folds.members(f, data.ids)
        train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
        bundle = train_ensemble(cfg, data.subset(train_idx), jobs)
        bundles.append(bundle)
        tables.append(predict(bundle, data.subset(test_idx)))
        order.extend(test_idx.tolist())
    merged = PredictionTable.concat(tables)
    position[np.array(order)] = np.arange(len(order))
    return CrossValResult(folds, bundles, tables, merged.take(position))
