"""Synthetic heteroscedastic cohort with known per-subject noise.

Each subject has three standard-normal latent factors ``(size, adiposity,
muscularity)``. Target means are log-linear in the latents::

    VAT = 2.5 * exp(0.25*size + 0.55*adiposity)
    SAT = 6.0 * exp(0.25*size + 0.45*adiposity)
    TAT = 20.0 * exp(0.30*size + 0.40*adiposity)
    TLT = 25.0 * exp(0.20*size + 0.25*muscularity)
    TTM = 10.0 * exp(0.20*size + 0.30*muscularity)
    LFF = 5.0 * exp(0.60*adiposity - 0.15*muscularity)

and observations add Gaussian noise with standard deviation
``noise_floor + noise_slope * mean``. Features are a fixed random linear map
of the latents plus N(0, 0.05^2) noise. Artifact subjects get a random half of
their features sign-flipped and offset by +3.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import N_TARGETS, TARGET_NAMES, Dataset

_BASE = np.array([2.5, 6.0, 20.0, 25.0, 10.0, 5.0])
# rows: targets, columns: (size, adiposity, muscularity)
_LOADINGS = np.array([
    [0.25, 0.55, 0.00],
    [0.25, 0.45, 0.00],
    [0.30, 0.40, 0.00],
    [0.20, 0.00, 0.25],
    [0.20, 0.00, 0.30],
    [0.00, 0.60, -0.15],
])
FEATURE_NOISE = 0.05
ARTIFACT_OFFSET = 3.0


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 1000
    feature_dim: int = 16
    seed: int = 0
    noise_floor: float = 0.05
    noise_slope: float = 0.08
    missing_rate: tuple[float, ...] = field(default=(0.0,) * N_TARGETS)
    artifact_rate: float = 0.0

    def __post_init__(self):
        rates = self.missing_rate
        if isinstance(rates, (int, float)):
            rates = (float(rates),) * N_TARGETS
        rates = tuple(float(r) for r in rates)
        object.__setattr__(self, "missing_rate", rates)
        if len(rates) != N_TARGETS:
            raise ValueError(f"missing_rate needs {N_TARGETS} entries")
        if not all(0.0 <= r < 1.0 for r in rates):
            raise ValueError("missing rates must lie in [0, 1)")
        if not 0.0 <= self.artifact_rate < 1.0:
            raise ValueError("artifact_rate must lie in [0, 1)")
        if not self.noise_floor > 0:
            raise ValueError("noise_floor must be positive")
        if self.noise_slope < 0:
            raise ValueError("noise_slope must be non-negative")
        if self.n_subjects < 10:
            raise ValueError("n_subjects must be at least 10")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["missing_rate"] = list(self.missing_rate)
        return d


@dataclass(frozen=True, eq=False)
class GroundTruth:
    ids: tuple[str, ...]
    true_mean: np.ndarray  # (N, T)
    true_var: np.ndarray   # (N, T)
    artifact: np.ndarray   # (N,) bool
    latents: np.ndarray    # (N, 3)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", "target", "true_mean", "true_var"])
            for i, subject_id in enumerate(self.ids):
                for t, name in enumerate(TARGET_NAMES):
                    writer.writerow([subject_id, name, repr(float(self.true_mean[i, t])),
                                     repr(float(self.true_var[i, t]))])


def target_means(latents: np.ndarray) -> np.ndarray:
    return _BASE * np.exp(np.asarray(latents) @ _LOADINGS.T)


def generate(cfg: SynthConfig) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n_subjects, cfg.feature_dim
    mixing = rng.normal(0.0, 1.0, size=(3, d))
    latents = rng.standard_normal((n, 3))
    features = latents @ mixing + FEATURE_NOISE * rng.standard_normal((n, d))

    mean = target_means(latents)
    std = cfg.noise_floor + cfg.noise_slope * mean
    observed = mean + std * rng.standard_normal((n, N_TARGETS))
    drop = rng.random((n, N_TARGETS)) < np.array(cfg.missing_rate)
    observed = np.where(drop, np.nan, observed)

    artifact = rng.random(n) < cfg.artifact_rate
    for i in np.flatnonzero(artifact):
        cols = rng.permutation(d)[: d // 2 if d > 1 else 1]
        features[i, cols] = -features[i, cols] + ARTIFACT_OFFSET

    ids = tuple(f"S{i:06d}" for i in range(n))
    flagged = ",".join(ids[i] for i in np.flatnonzero(artifact))
    provenance = f"synthgen seed={cfg.seed} n={n} artifacts=[{flagged}]"
    data = Dataset(ids, features, observed, provenance)
    return data, GroundTruth(ids, mean, std ** 2, artifact, latents)


# ------------------------------------------------------------------ toy volumes


def phantom_volumes(dims: Sequence[int] = (32, 24, 48), seed: int = 0,
                    body_radii: Sequence[float] = (0.42, 0.38, 0.46),
                    fat_radii: Sequence[float] = (0.25, 0.20, 0.30)):
    """Two nested ellipsoids: a water-dominated body with an inner fat core.

    Returns ``(water, fat)`` as :class:`~uqe.volume.RawVolume`.
    """
    from .volume import RawVolume

    rng = np.random.default_rng(seed)
    nx, ny, nz = (int(v) for v in dims)
    gx, gy, gz = np.meshgrid((np.arange(nx) + 0.5) / nx - 0.5, (np.arange(ny) + 0.5) / ny - 0.5,
                             (np.arange(nz) + 0.5) / nz - 0.5, indexing="ij")

    def inside(radii):
        return (gx / radii[0]) ** 2 + (gy / radii[1]) ** 2 + (gz / radii[2]) ** 2 <= 1.0

    body, core = inside(body_radii), inside(fat_radii)
    water = np.where(body & ~core, 100.0, np.where(core, 20.0, 0.0))
    fat = np.where(core, 80.0, np.where(body, 10.0, 0.0))
    water = water + body * rng.uniform(0.0, 5.0, size=water.shape)
    fat = fat + body * rng.uniform(0.0, 5.0, size=fat.shape)
    return (RawVolume(water.astype(np.float32), "water"),
            RawVolume(fat.astype(np.float32), "fat"))
