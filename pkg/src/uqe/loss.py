"""Masked training criteria in standardized target space.

All functions take ``(B, T)`` arrays. ``mask`` may be boolean or a
non-negative float weight per sample-target pair; missing targets get weight
zero and may hold NaN in ``targets``. The reported ``total`` is the weighted
mean over contributing pairs, so missing targets do not shrink the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    per_target: tuple[float, ...]
    contributing_count: int


def _prepare(targets, mask, ref):
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(mask, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if targets.shape != ref.shape or weights.shape != ref.shape:
        raise ValueError(f"shape mismatch: {ref.shape}, {targets.shape}, {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("mask weights must be non-negative")
    # masked entries may hold NaN; they must not leak into sums
    safe = np.where(weights > 0, targets, 0.0)
    norm = float(weights.sum())
    if not norm > 0:
        raise ValueError("no unmasked sample-target pairs")
    return safe, weights, norm


def _breakdown(terms, weights, norm) -> LossBreakdown:
    weighted = terms * weights
    col_w = weights.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_target = np.where(col_w > 0, weighted.sum(axis=0) / np.where(col_w > 0, col_w, 1.0), np.nan)
    return LossBreakdown(float(weighted.sum() / norm), tuple(float(v) for v in per_target),
                         int(np.count_nonzero(weights)))


def mse_loss(means, targets, mask) -> LossBreakdown:
    means = np.asarray(means, dtype=np.float64)
    y, w, norm = _prepare(targets, mask, means)
    return _breakdown((y - means) ** 2, w, norm)


def nll_loss(means, variances, targets, mask) -> LossBreakdown:
    """Gaussian negative log-likelihood including the constant 0.5*log(2*pi)."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    y, w, norm = _prepare(targets, mask, means)
    if variances.shape != means.shape:
        raise ValueError("variances and means differ in shape")
    if np.any(variances[w > 0] <= 0):
        raise ValueError("variances must be positive")
    var = np.where(w > 0, variances, 1.0)
    terms = 0.5 * np.log(var) + (y - means) ** 2 / (2.0 * var) + HALF_LOG_2PI
    return _breakdown(terms, w, norm)


def mse_grad(means, targets, mask):
    """Loss value and d(total)/d(means)."""
    means = np.asarray(means, dtype=np.float64)
    y, w, norm = _prepare(targets, mask, means)
    r = means - y
    value = float((r * r * w).sum() / norm)
    return value, 2.0 * w * r / norm


def nll_grad_logvar(means, log_var, targets, mask, clamp: float = 10.0):
    """Loss value and gradients w.r.t. means and raw log-variance outputs.

    The variance is ``exp(clip(log_var, -clamp, clamp))``; the gradient of
    the log-variance is zero outside the clamp range.
    """
    means = np.asarray(means, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    y, w, norm = _prepare(targets, mask, means)
    s = np.clip(log_var, -clamp, clamp)
    inv_var = np.exp(-s)
    r = means - y
    r2_over_var = r * r * inv_var
    value = float(((0.5 * s + 0.5 * r2_over_var + HALF_LOG_2PI) * w).sum() / norm)
    d_mean = w * r * inv_var / norm
    inside = (log_var >= -clamp) & (log_var <= clamp)
    d_s = np.where(inside, w * 0.5 * (1.0 - r2_over_var) / norm, 0.0)
    return value, d_mean, d_s
