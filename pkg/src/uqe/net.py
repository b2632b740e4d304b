"""Multilayer perceptron regressor with hand-written backpropagation and Adam.

The trunk is a stack of ReLU layers shared by all targets. The head is linear
and emits ``T`` means (least-squares head) or ``T`` means followed by ``T``
raw log-variances (mean-variance head). Variances are obtained as
``exp(clip(s, -10, 10))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import Dataset, FoldAssignment, Standardizer
from .loss import mse_grad, nll_grad_logvar

LOGVAR_CLAMP = 10.0
HEADS = ("least_squares", "mean_variance")


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    head: str = "mean_variance"
    seed: int = 0
    batch_size: int = 32
    base_lr: float = 1e-4
    total_iters: int = 6000
    drop_at: int = 5000
    drop_factor: float = 10.0
    jitter_std: float = 0.0
    n_targets: int = 6
    # image inputs: features are a flattened (H, W, C) array shifted by up to shift_px
    image_shape: tuple[int, int, int] | None = None
    shift_px: int = 0
    log_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.input_dim < 1 or self.n_targets < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be positive")
        if not 0 <= self.drop_at < self.total_iters:
            raise ValueError("drop_at must lie in [0, total_iters)")
        if self.base_lr <= 0 or self.drop_factor <= 0 or self.jitter_std < 0:
            raise ValueError("base_lr and drop_factor must be positive, jitter_std non-negative")
        if self.shift_px < 0:
            raise ValueError("shift_px must be non-negative")
        if self.shift_px and (self.image_shape is None
                              or math.prod(self.image_shape) != self.input_dim):
            raise ValueError("shift augmentation needs image_shape matching input_dim")

    @property
    def n_outputs(self) -> int:
        return self.n_targets * (2 if self.head == "mean_variance" else 1)

    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.n_outputs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["image_shape"] = None if self.image_shape is None else list(self.image_shape)
        return d


class NetParams:
    """Weights and biases stored contiguously in one flat float64 vector.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; both lists are views into
    :attr:`flat`.
    """

    def __init__(self, sizes: Sequence[int], flat: np.ndarray | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        n = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        self.flat = np.zeros(n) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.flat.shape}")
        self.weights, self.biases = _views(self.flat, self.sizes)

    def copy(self) -> "NetParams":
        return NetParams(self.sizes, self.flat)

    def zeros_like(self) -> "NetParams":
        return NetParams(self.sizes)

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "layers": [{"weight": {"shape": list(w.shape), "data": w.ravel().tolist()},
                        "bias": {"shape": list(b.shape), "data": b.tolist()}}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetParams":
        params = cls(d["sizes"])
        for layer, w, b in zip(d["layers"], params.weights, params.biases):
            if tuple(layer["weight"]["shape"]) != w.shape or tuple(layer["bias"]["shape"]) != b.shape:
                raise ValueError("serialized layer shape does not match sizes")
            w[...] = np.array(layer["weight"]["data"], dtype=np.float64).reshape(w.shape)
            b[...] = np.array(layer["bias"]["data"], dtype=np.float64)
        return params

    def __eq__(self, other):
        return (isinstance(other, NetParams) and self.sizes == other.sizes
                and np.array_equal(self.flat, other.flat))


def _views(flat, sizes):
    weights, biases, pos = [], [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b))
        pos += a * b
        biases.append(flat[pos:pos + b])
        pos += b
    return weights, biases


def init_params(config: NetConfig, rng: np.random.Generator | None = None) -> NetParams:
    """He-normal trunk, Glorot-normal head, zero biases."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    params = NetParams(config.layer_sizes())
    last = len(params.weights) - 1
    for i, w in enumerate(params.weights):
        fan_in, fan_out = w.shape
        std = math.sqrt(2.0 / fan_in) if i < last else math.sqrt(2.0 / (fan_in + fan_out))
        w[...] = rng.normal(0.0, std, size=w.shape)
    return params


@dataclass(frozen=True)
class NetOutput:
    mean: np.ndarray
    log_var: np.ndarray | None = None  # raw, before clamping

    @property
    def variance(self) -> np.ndarray | None:
        if self.log_var is None:
            return None
        return np.exp(np.clip(self.log_var, -LOGVAR_CLAMP, LOGVAR_CLAMP))


def _forward_cache(params: NetParams, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(params: NetParams, features, head: str = "mean_variance") -> NetOutput:
    """Evaluate the network on one feature vector or an ``(N, D)`` batch."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ValueError(f"expected features of length {params.sizes[0]}, got shape {x.shape}")
    out = _forward_cache(params, x)[-1]
    if head == "mean_variance":
        t = out.shape[1] // 2
        mean, log_var = out[:, :t], out[:, t:]
    elif head == "least_squares":
        mean, log_var = out, None
    else:
        raise ValueError(f"unknown head {head!r}")
    if single:
        mean = mean[0]
        log_var = None if log_var is None else log_var[0]
    return NetOutput(mean, log_var)


def backward(params: NetParams, features, targets, mask, head: str = "mean_variance"):
    """Batch loss and its exact gradient with respect to every parameter.

    ``targets`` are in standardized space; ``mask`` is a boolean or weight
    array of the same shape. Returns ``(loss, grads)`` where ``grads`` is a
    :class:`NetParams` holding the gradient. A fully masked batch yields loss
    ``0.0`` and an all-zero gradient.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != params.sizes[0]:
        raise ValueError(f"expected a non-empty (B, {params.sizes[0]}) batch, got {x.shape}")
    grads = params.zeros_like()
    if not np.any(np.asarray(mask, dtype=np.float64) > 0):
        return 0.0, grads
    acts = _forward_cache(params, x)
    out = acts[-1]
    if head == "mean_variance":
        t = out.shape[1] // 2
        loss, d_mean, d_s = nll_grad_logvar(out[:, :t], out[:, t:], targets, mask, LOGVAR_CLAMP)
        delta = np.concatenate([d_mean, d_s], axis=1)
    elif head == "least_squares":
        loss, delta = mse_grad(out, targets, mask)
    else:
        raise ValueError(f"unknown head {head!r}")
    for i in range(len(params.weights) - 1, -1, -1):
        grads.weights[i][...] = acts[i].T @ delta
        grads.biases[i][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    return loss, grads


def batch_loss(params: NetParams, features, targets, mask, head: str = "mean_variance") -> float:
    """Loss value only; used by finite-difference checks."""
    return backward(params, features, targets, mask, head)[0]


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat))


def adam_step(params: NetParams, state: AdamState, grads: NetParams, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    g = grads.flat
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient at Adam step {state.t + 1}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    flat = params.flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return NetParams(params.sizes, flat), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def learning_rate(config: NetConfig, iteration: int) -> float:
    """Step schedule: ``base_lr`` before ``drop_at``, divided by ``drop_factor`` after."""
    return config.base_lr if iteration < config.drop_at else config.base_lr / config.drop_factor


# ----------------------------------------------------------------------- training


def shift_images(batch: np.ndarray, shape: tuple[int, int, int], shifts: np.ndarray) -> np.ndarray:
    """Translate each flattened ``(H, W, C)`` image by integer ``(dy, dx)``, zero filled."""
    h, w, c = shape
    imgs = batch.reshape(-1, h, w, c)
    out = np.zeros_like(imgs)
    for k, (dy, dx) in enumerate(shifts):
        dy, dx = int(dy), int(dx)
        src_y = slice(max(0, -dy), min(h, h - dy))
        dst_y = slice(max(0, dy), min(h, h + dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[k, dst_y, dst_x] = imgs[k, src_y, src_x]
    return out.reshape(batch.shape)


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    n_train: int = 0

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "iterations": self.iterations,
                "learning_rates": self.learning_rates, "losses": self.losses}


def train(config: NetConfig, train_set: Dataset, standardizer: Standardizer,
          folds: FoldAssignment | None = None, withhold_fold: int | None = None,
          sample_weight: np.ndarray | None = None) -> tuple[NetParams, TrainLog]:
    """Minibatch Adam training with the step learning-rate schedule.

    Minibatches are drawn by epoch-wise shuffling without replacement; the
    final batch of an epoch may be smaller. When ``withhold_fold`` is given,
    the subjects of that fold (per ``folds``) are left out entirely.
    """
    if train_set.feature_dim != config.input_dim:
        raise ValueError(f"config expects {config.input_dim} features, dataset has {train_set.feature_dim}")
    if train_set.n_targets != config.n_targets:
        raise ValueError("dataset target count does not match config")
    x_all = train_set.features
    z_all = standardizer.forward(train_set.targets)
    w_all = (~np.isnan(z_all)).astype(np.float64)
    if sample_weight is not None:
        sample_weight = np.asarray(sample_weight, dtype=np.float64)
        if sample_weight.shape != (len(train_set),):
            raise ValueError("sample_weight must have one entry per subject")
        w_all = w_all * sample_weight[:, None]
    if withhold_fold is not None:
        if folds is None:
            raise ValueError("withhold_fold requires a fold assignment")
        keep = np.array([folds.fold_of[s] != withhold_fold for s in train_set.ids])
        x_all, z_all, w_all = x_all[keep], z_all[keep], w_all[keep]
    n = x_all.shape[0]
    if n == 0:
        raise ValueError("training set is empty after withholding")

    init_ss, shuffle_ss, aug_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(config, np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    state = AdamState.zeros(params)
    log = TrainLog(n_train=n)

    order = order_rng.permutation(n)
    pos = 0
    for it in range(config.total_iters):
        if pos >= n:
            order = order_rng.permutation(n)
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        xb = x_all[idx]
        if config.shift_px:
            shifts = aug_rng.integers(-config.shift_px, config.shift_px + 1, size=(len(idx), 2))
            xb = shift_images(xb, config.image_shape, shifts)
        if config.jitter_std > 0:
            xb = xb + aug_rng.normal(0.0, config.jitter_std, size=xb.shape)
        loss, grads = backward(params, xb, z_all[idx], w_all[idx], config.head)
        lr = learning_rate(config, it)
        params, state = adam_step(params, state, grads, lr)
        if it % config.log_every == 0 or it == config.total_iters - 1:
            log.iterations.append(it)
            log.learning_rates.append(lr)
            log.losses.append(float(loss))
    return params, log
