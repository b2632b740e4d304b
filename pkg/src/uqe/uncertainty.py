"""Sparsification, calibration and recalibration of predictive uncertainties."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CURVE_KINDS = ("sparsification", "oracle", "calibration")
DEFAULT_LEVELS = np.round(np.arange(1, 100) / 100.0, 2)


@dataclass(frozen=True, eq=False)
class CurveSeries:
    kind: str
    x: np.ndarray
    y: np.ndarray
    summary: float = 0.0

    def __post_init__(self):
        if self.kind not in CURVE_KINDS:
            raise ValueError(f"kind must be one of {CURVE_KINDS}")
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("x and y must be 1-d arrays of equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x": self.x.tolist(), "y": self.y.tolist(),
                "summary": float(self.summary)}

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "y"])
            for x, y in zip(self.x, self.y):
                writer.writerow([repr(float(x)), repr(float(y))])


# ----------------------------------------------------------------- sparsification


def default_steps(n: int) -> int:
    """One step per measurement up to 1000 measurements, 1% steps beyond."""
    return n if n <= 1000 else 100


def sparsification_curve(abs_errors, uncertainties, steps: int | None = None,
                         kind: str = "sparsification", baseline_mae: float | None = None) -> CurveSeries:
    """MAE of the retained subset after excluding the most uncertain share.

    At exclusion fraction ``i / steps`` the ``floor(i * N / steps)`` most
    uncertain measurements are removed (ties keep the original order).
    ``summary`` is the relative MAE reduction at zero exclusion versus
    ``baseline_mae`` (0 when no baseline is given).
    """
    e = np.asarray(abs_errors, dtype=np.float64).ravel()
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    if e.shape != u.shape:
        raise ValueError(f"length mismatch: {e.size} errors vs {u.size} uncertainties")
    n = e.size
    if n < 2:
        raise ValueError("at least two measurements are required")
    steps = default_steps(n) if steps is None else int(steps)
    if not 1 <= steps <= n:
        raise ValueError(f"steps must lie in [1, {n}]")
    order = np.argsort(-u, kind="stable")
    ranked = e[order]
    # tail sums: mean of ranked[k:] for every k
    tail = np.cumsum(ranked[::-1])[::-1]
    removed = (np.arange(steps) * n) // steps
    y = tail[removed] / (n - removed)
    x = np.arange(steps) / steps
    summary = 0.0 if baseline_mae is None else 1.0 - y[0] / baseline_mae
    return CurveSeries(kind, x, y, summary)


def oracle_curve(abs_errors, steps: int | None = None, baseline_mae: float | None = None) -> CurveSeries:
    """Sparsification ranked by the true absolute errors themselves."""
    e = np.asarray(abs_errors, dtype=np.float64)
    return sparsification_curve(e, e, steps, kind="oracle", baseline_mae=baseline_mae)


def relative_curve(curve: CurveSeries, baseline_mae: float) -> np.ndarray:
    """Change in MAE relative to a baseline, as plotted in sparsification figures."""
    return curve.y / baseline_mae - 1.0


def sparsification_error_area(curve: CurveSeries, oracle: CurveSeries) -> float:
    """Mean gap between a sparsification curve and its oracle."""
    if not np.array_equal(curve.x, oracle.x):
        raise ValueError("curves are sampled on different grids")
    return float(np.mean(curve.y - oracle.y))


# --------------------------------------------------------------- normal quantile

# Acklam's rational approximation (relative error < 1.2e-9), followed by one
# Halley step against erfc, which brings the error to machine precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def normal_quantile(p: float, refine: bool = True) -> float:
    """Inverse standard normal CDF for ``0 < p < 1``."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    x = _acklam(p)
    if refine:
        e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
        u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
        x = x - u / (1.0 + 0.5 * x * u)
    return x


def interval_half_widths(levels) -> np.ndarray:
    """Standard-normal half-width ``z_{(1+p)/2}`` of each central interval level."""
    return np.array([normal_quantile(0.5 * (1.0 + p)) for p in np.asarray(levels, dtype=np.float64)])


# ------------------------------------------------------------------- calibration


def _check_levels(levels):
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=np.float64)
    if levels.ndim != 1 or levels.size < 2 or np.any((levels <= 0) | (levels >= 1)):
        raise ValueError("levels must be at least two values in (0, 1)")
    return levels


def calibration_curve(residuals, sigmas, levels=None) -> CurveSeries:
    """Empirical coverage of central Gaussian intervals at each confidence level.

    ``summary`` holds the AUCE of the curve.
    """
    r = np.abs(np.asarray(residuals, dtype=np.float64).ravel())
    s = np.asarray(sigmas, dtype=np.float64).ravel()
    if r.shape != s.shape:
        raise ValueError("residuals and sigmas differ in length")
    if r.size == 0:
        raise ValueError("calibration needs at least one residual")
    if np.any(~(s > 0)):
        raise ValueError("sigmas must be positive")
    levels = _check_levels(levels)
    z = interval_half_widths(levels)
    coverage = np.array([np.count_nonzero(r <= zp * s) for zp in z], dtype=np.float64) / r.size
    curve = CurveSeries("calibration", levels, coverage)
    return CurveSeries("calibration", levels, coverage, auce(curve))


def auce(curve: CurveSeries) -> float:
    """Area under the absolute calibration error, normalized by the level span."""
    if curve.kind != "calibration":
        raise ValueError("auce needs a calibration curve")
    p, y = curve.x, curve.y
    gap = np.abs(y - p)
    area = float(np.sum(0.5 * (gap[1:] + gap[:-1]) * np.diff(p)))
    return area / float(p[-1] - p[0])


def default_scale_grid() -> np.ndarray:
    return np.geomspace(0.25, 4.0, 400)


def scaled_auce(residuals, sigmas, factors, levels=None) -> np.ndarray:
    """AUCE of the calibration curve for ``factor * sigmas`` at every factor.

    Coverage at factor ``c`` and level ``p`` is the share of normalized
    residuals ``|r| / sigma`` not exceeding ``c * z_p``, computed by binary
    search over the sorted normalized residuals.
    """
    r = np.abs(np.asarray(residuals, dtype=np.float64).ravel())
    s = np.asarray(sigmas, dtype=np.float64).ravel()
    if r.size == 0 or r.shape != s.shape:
        raise ValueError("residuals and sigmas must be non-empty and equally long")
    if np.any(~(s > 0)):
        raise ValueError("sigmas must be positive")
    levels = _check_levels(levels)
    z = interval_half_widths(levels)
    t = np.sort(r / s)
    factors = np.asarray(factors, dtype=np.float64)
    thresholds = factors[:, None] * z[None, :]
    coverage = np.searchsorted(t, thresholds.ravel(), side="right").reshape(thresholds.shape) / t.size
    gap = np.abs(coverage - levels[None, :])
    area = np.sum(0.5 * (gap[:, 1:] + gap[:, :-1]) * np.diff(levels)[None, :], axis=1)
    return area / float(levels[-1] - levels[0])


def fit_scaling_factor(residuals, sigmas, grid=None, levels=None) -> float:
    """Grid factor on ``sigma`` minimizing AUCE; ties resolve to the smallest factor."""
    grid = default_scale_grid() if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("grid must hold positive factors")
    scores = scaled_auce(residuals, sigmas, grid, levels)
    return float(grid[int(np.argmin(scores))])
