"""Agreement between predicted and reference measurements."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAPE_MIN_REF = 1e-9


def _pair(preds, refs):
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(refs, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} references")
    return p, y


def mae(preds, refs) -> float:
    p, y = _pair(preds, refs)
    if p.size == 0:
        raise ValueError("mae needs at least one pair")
    return float(np.mean(np.abs(p - y)))


def mape(preds, refs, return_excluded: bool = False):
    """Mean absolute percentage error in percent.

    Pairs with ``|ref| < 1e-9`` are dropped; with ``return_excluded`` the
    number of dropped pairs is returned as well.
    """
    p, y = _pair(preds, refs)
    keep = np.abs(y) >= MAPE_MIN_REF
    if not np.any(keep):
        raise ValueError("mape: no pairs with non-negligible reference")
    value = float(100.0 * np.mean(np.abs(p[keep] - y[keep]) / np.abs(y[keep])))
    if return_excluded:
        return value, int(np.count_nonzero(~keep))
    return value


def r_squared(preds, refs) -> float:
    p, y = _pair(preds, refs)
    if p.size < 2:
        raise ValueError("r_squared needs at least two pairs")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("r_squared: references have zero spread")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def pearson(preds, refs) -> float:
    p, y = _pair(preds, refs)
    if p.size < 2:
        raise ValueError("pearson needs at least two pairs")
    dp, dy = p - p.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dy * dy)))
    if denom == 0:
        raise ValueError("pearson: zero spread")
    return float(np.clip(np.sum(dp * dy) / denom, -1.0, 1.0))


def icc_2_1(preds, refs) -> float:
    """ICC(2,1): two-way random effects, single measures, absolute agreement.

    The two inputs are treated as the ``k = 2`` raters of ``n`` subjects::

        ICC = (MSR - MSE) / (MSR + (k-1) MSE + k (MSC - MSE) / n)
    """
    p, y = _pair(preds, refs)
    n, k = p.size, 2
    if n < 3:
        raise ValueError("icc_2_1 needs at least three subjects")
    table = np.column_stack([p, y])
    grand = table.mean()
    ss_rows = k * float(np.sum((table.mean(axis=1) - grand) ** 2))
    ss_cols = n * float(np.sum((table.mean(axis=0) - grand) ** 2))
    ss_total = float(np.sum((table - grand) ** 2))
    ss_err = ss_total - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if not denom > 0:
        raise ValueError("icc_2_1: degenerate ANOVA (non-positive denominator)")
    return (msr - mse) / denom


@dataclass(frozen=True)
class TargetAgreement:
    target: str
    n: int
    icc: float
    r2: float
    mae: float
    mape: float
    pearson_r: float
    missing_refs: int
    mape_excluded: int


@dataclass(frozen=True)
class AgreementReport:
    targets: tuple[TargetAgreement, ...]

    def to_dict(self) -> dict:
        return {"targets": [asdict(t) for t in self.targets]}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["target", "N", "ICC", "R2", "MAE", "MAPE", "r"])
            for t in self.targets:
                writer.writerow([t.target, t.n, repr(t.icc), repr(t.r2), repr(t.mae),
                                 repr(t.mape), repr(t.pearson_r)])


def agreement_report(preds: np.ndarray, refs: np.ndarray, target_names: Sequence[str]) -> AgreementReport:
    """Per-target metrics with pairwise deletion of missing references.

    Targets with fewer than three references are skipped.
    """
    preds = np.asarray(preds, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    rows = []
    for t, name in enumerate(target_names):
        present = ~np.isnan(refs[:, t]) & ~np.isnan(preds[:, t])
        if np.count_nonzero(present) < 3:
            continue
        p, y = preds[present, t], refs[present, t]
        m, excluded = mape(p, y, return_excluded=True)
        rows.append(TargetAgreement(name, int(p.size), icc_2_1(p, y), r_squared(p, y), mae(p, y),
                                    m, pearson(p, y), int(np.count_nonzero(~present)), excluded))
    return AgreementReport(tuple(rows))
