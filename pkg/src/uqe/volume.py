"""Formatting of co-aligned water/fat volumes into a 3-channel 8-bit image.

Volumes are indexed ``[x, y, z]`` (left-right, anterior-posterior,
head-foot). The coronal view collapses ``y`` and yields an ``(x, z)`` plane,
the sagittal view collapses ``x`` and yields a ``(y, z)`` plane. Planes are
laid out as images with rows along ``z`` and the coronal plane to the left of
the sagittal one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RV3D"
CHANNELS = ("water", "fat")
AXES = ("coronal", "sagittal")


@dataclass(frozen=True, eq=False)
class RawVolume:
    voxels: np.ndarray  # (nx, ny, nz)
    channel: str

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3-d with positive dims, got {v.shape}")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("voxels must be finite and non-negative")
        v = np.array(v, copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "voxels", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


def write_raw3d(volume: RawVolume, path: str | Path) -> None:
    nx, ny, nz = volume.dims
    payload = np.asarray(volume.voxels, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<3I", nx, ny, nz) + payload)


def read_raw3d(path: str | Path, channel: str) -> RawVolume:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a RAW3D file")
    nx, ny, nz = struct.unpack("<3I", blob[4:16])
    count = nx * ny * nz
    if len(blob) != 16 + 4 * count:
        raise ValueError(f"{path}: expected {count} voxels")
    voxels = np.frombuffer(blob, dtype="<f4", count=count, offset=16)
    return RawVolume(voxels.reshape((nx, ny, nz), order="F").astype(np.float32), channel)


def mean_intensity_projection(volume: RawVolume, axis: str) -> np.ndarray:
    """Sum of voxel values along the viewing axis, as a ``(z, ·)`` plane.

    Despite the customary name, no division by the path length is applied.
    """
    v = volume.voxels.astype(np.float64)
    if axis == "coronal":
        return v.sum(axis=1).T
    if axis == "sagittal":
        return v.sum(axis=0).T
    raise ValueError(f"axis must be one of {AXES}")


def fat_fraction(water: RawVolume, fat: RawVolume) -> RawVolume:
    """Voxel-wise ``fat / (water + fat)``; 0 where both signals vanish."""
    if water.dims != fat.dims:
        raise ValueError(f"dimension mismatch: {water.dims} vs {fat.dims}")
    w = water.voxels.astype(np.float64)
    f = fat.voxels.astype(np.float64)
    total = w + f
    ff = np.divide(f, total, out=np.zeros_like(total), where=total > 0)
    return RawVolume(np.clip(ff, 0.0, 1.0), "fat")


def select_slices(water: RawVolume, fat: RawVolume) -> tuple[int, int]:
    """Coronal (y) and sagittal (x) indices with maximal summed water+fat signal."""
    total = water.voxels.astype(np.float64) + fat.voxels.astype(np.float64)
    return int(np.argmax(total.sum(axis=(0, 2)))), int(np.argmax(total.sum(axis=(1, 2))))


def normalize(plane: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant plane maps to all zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def resize_bilinear(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    plane = np.asarray(plane, dtype=np.float64)
    src_h, src_w = plane.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(height, src_h)
    x0, x1, fx = coords(width, src_w)
    top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
    bottom = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 8-bit, rounding halves away from zero."""
    scaled = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class FormattedImage:
    pixels: np.ndarray  # (height, width, 3) uint8: water, fat, fat fraction

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def save(self, path: str | Path) -> Path:
        """Write headerless interleaved bytes plus a ``.json`` sidecar."""
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.pixels, dtype=np.uint8).tobytes())
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "width": self.width, "height": self.height, "channels": 3,
            "layout": "row-major HWC uint8",
            "channel_order": ["water_projection", "fat_projection", "fat_fraction_slices"],
        }, indent=2, sort_keys=True) + "\n")
        return sidecar

    @classmethod
    def load(cls, path: str | Path) -> "FormattedImage":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        return cls(data.reshape(meta["height"], meta["width"], 3).copy())


def _side_by_side(volume: RawVolume) -> np.ndarray:
    return np.concatenate([mean_intensity_projection(volume, "coronal"),
                           mean_intensity_projection(volume, "sagittal")], axis=1)


def format_subject(water: RawVolume, fat: RawVolume, coronal_index: int | None = None,
                   sagittal_index: int | None = None, out_size: tuple[int, int] = (256, 256)) -> FormattedImage:
    """Dual projection with fat-fraction slices as an 8-bit 3-channel image.

    ``out_size`` is ``(width, height)``. Slice indices default to
    :func:`select_slices`.
    """
    if water.dims != fat.dims:
        raise ValueError(f"dimension mismatch: {water.dims} vs {fat.dims}")
    nx, ny, _ = water.dims
    auto_c, auto_s = select_slices(water, fat) if coronal_index is None or sagittal_index is None else (0, 0)
    ci = auto_c if coronal_index is None else int(coronal_index)
    si = auto_s if sagittal_index is None else int(sagittal_index)
    if not 0 <= ci < ny:
        raise ValueError(f"coronal index {ci} out of range [0, {ny})")
    if not 0 <= si < nx:
        raise ValueError(f"sagittal index {si} out of range [0, {nx})")
    ff = fat_fraction(water, fat).voxels
    ff_plane = np.concatenate([ff[:, ci, :].T, ff[si, :, :].T], axis=1)
    width, height = out_size
    channels = []
    for plane in (_side_by_side(water), _side_by_side(fat), ff_plane):
        plane = normalize(plane)
        if plane.shape != (height, width):
            plane = resize_bilinear(plane, height, width)
        channels.append(quantize(plane))
    return FormattedImage(np.stack(channels, axis=-1))


def image_features(image: FormattedImage, pool: int = 8) -> np.ndarray:
    """Fixed reduction of an image to a feature vector for the MLP backbone.

    Non-overlapping ``pool x pool`` average pooling (trailing rows/columns
    that do not fill a block are dropped), scaled to [0, 1], flattened HWC.
    """
    px = image.pixels.astype(np.float64) / 255.0
    h, w = (image.height // pool) * pool, (image.width // pool) * pool
    if h == 0 or w == 0:
        raise ValueError("pool size larger than image")
    blocks = px[:h, :w].reshape(h // pool, pool, w // pool, pool, 3)
    return blocks.mean(axis=(1, 3)).ravel()
