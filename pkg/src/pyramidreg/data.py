"""Synthetic registration pairs with ground-truth labels, plus volume I/O.

File format: a ``{name}.json`` sidecar with dims/spacing/dtype/byte order and
a ``{name}.raw`` payload of exactly d*h*w scalars in z-major order,
little-endian.  Deformation fields are f32 3-channel raws in channel-major
layout; label volumes are u16.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor
from .fields import DeformationField, warp_labels
from .autodiff import warp_array
from .metrics import LabelVolume

MAX_DIM = 4096  # refuse absurd headers before allocating


class VolumeIOError(RuntimeError):
    """Base class for on-disk volume format errors."""


class MalformedHeaderError(VolumeIOError):
    pass


class TruncatedPayloadError(VolumeIOError):
    pass


class DimensionOverflowError(VolumeIOError):
    pass


@dataclass
class Volume:
    """Scalar intensity field in [0,1] with voxel spacing metadata."""

    values: np.ndarray  # (D, H, W) float64
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be rank-3, got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    def as_tensor(self) -> Tensor:
        return Tensor(self.values[None, None])


@dataclass
class SynthSpec:
    grid_size: int = 32
    num_blobs: int = 8
    deform_amplitude: float = 2.0   # rms displacement magnitude, voxels
    deform_smoothness: float = 5.5  # gaussian radius in voxels
    seed: int = 0

    def __post_init__(self):
        if self.grid_size % 16:
            raise ValueError("grid_size must be divisible by 16")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")


def _base_volume(spec: SynthSpec, rng: np.random.Generator):
    g = spec.grid_size
    coords = np.stack(np.meshgrid(*(np.arange(g),) * 3, indexing="ij"), axis=-1)
    intens = np.zeros((g, g, g))
    labels = np.zeros((g, g, g), dtype=np.uint16)
    best = np.full((g, g, g), np.inf)
    for blob_id in range(1, spec.num_blobs + 1):
        center = rng.uniform(0.2 * g, 0.8 * g, size=3)
        radius = rng.uniform(g / 16.0, g / 9.0)
        d = np.linalg.norm(coords - center, axis=-1)
        intens += np.exp(-(d ** 2) / (2.0 * (radius / 1.5) ** 2))
        inside = (d <= radius) & (d < best)
        labels[inside] = blob_id
        best = np.where(inside, d, best)
    # mild smooth background texture so local NCC sees structure everywhere
    intens += 0.15 * gaussian_filter(rng.standard_normal((g, g, g)), 3.0)
    intens -= intens.min()
    peak = intens.max()
    if peak > 0:
        intens /= peak
    return intens, labels


def _random_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    g = spec.grid_size
    u = rng.standard_normal((3, g, g, g))
    for c in range(3):
        u[c] = gaussian_filter(u[c], spec.deform_smoothness)
    # amplitude is the rms magnitude, so typical motion really is that large
    rms = np.sqrt((u ** 2).sum(axis=0).mean())
    if rms > 0:
        u *= spec.deform_amplitude / rms
    else:
        u[:] = 0.0
    return u


def make_pair(spec: SynthSpec):
    """Return (fixed, moving, fixed_labels, moving_labels, gt_field).

    Moving is the fixed volume warped by a smooth random field, so the
    ground-truth field maps moving coordinates toward fixed content.
    Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    intens, labels = _base_volume(spec, rng)
    if spec.deform_amplitude == 0:
        u = np.zeros((3, spec.grid_size, spec.grid_size, spec.grid_size))
        moving_i, moving_l = intens.copy(), labels.copy()
    else:
        u = _random_field(spec, rng)
        moving_i = np.clip(warp_array(intens[None, None], u[None])[0, 0], 0.0, 1.0)
        moving_l = warp_labels(labels, u)
    fixed = Volume(intens)
    moving = Volume(moving_i)
    gt = DeformationField(Tensor(u[None]), scale_level=0)
    return (fixed, moving, LabelVolume(labels), LabelVolume(moving_l), gt)


# -- on-disk format ---------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


def _write_raw(path: Path, array: np.ndarray, dims, dtype: str, spacing):
    path = Path(path)
    meta = {
        "dims": [int(d) for d in dims],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype,
        "byte_order": "little",
    }
    if array.ndim == 4:
        meta["channels"] = int(array.shape[0])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    path.with_suffix(".raw").write_bytes(
        np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())


def _read_meta(path: Path) -> dict:
    sidecar = Path(path).with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"cannot read sidecar {sidecar}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "byte_order"):
        if key not in meta:
            raise MalformedHeaderError(f"{sidecar}: missing field '{key}'")
    dims = meta["dims"]
    if len(dims) != 3 or any(not isinstance(d, int) or d <= 0 for d in dims):
        raise MalformedHeaderError(f"{sidecar}: bad dims {dims!r}")
    if any(d > MAX_DIM for d in dims):
        raise DimensionOverflowError(f"{sidecar}: dims {dims} exceed {MAX_DIM}")
    if meta["dtype"] not in _DTYPES:
        raise MalformedHeaderError(f"{sidecar}: unknown dtype {meta['dtype']!r}")
    if meta["byte_order"] != "little":
        raise MalformedHeaderError(
            f"{sidecar}: unsupported byte order {meta['byte_order']!r}")
    return meta


def _read_raw(path: Path, expected_channels: int | None = None):
    meta = _read_meta(path)
    dims = meta["dims"]
    channels = int(meta.get("channels", 1))
    if expected_channels is not None and channels != expected_channels:
        raise MalformedHeaderError(
            f"{path}: expected {expected_channels} channels, got {channels}")
    dtype = _DTYPES[meta["dtype"]]
    payload = Path(path).with_suffix(".raw").read_bytes()
    expected = channels * dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    array = np.frombuffer(payload, dtype=dtype)
    shape = ([channels] if channels > 1 else []) + dims
    return array.reshape(shape), meta


def save_volume(path, volume: Volume):
    _write_raw(Path(path), volume.values, volume.shape, "f32", volume.spacing)


def load_volume(path) -> Volume:
    array, meta = _read_raw(Path(path), expected_channels=1)
    return Volume(array.astype(np.float64), tuple(meta["spacing"]))


def save_labels(path, labels: LabelVolume):
    _write_raw(Path(path), labels.labels, labels.labels.shape, "u16",
               labels.spacing)


def load_labels(path) -> LabelVolume:
    array, meta = _read_raw(Path(path), expected_channels=1)
    return LabelVolume(array.astype(np.int64), tuple(meta["spacing"]))


def save_field(path, field: DeformationField):
    u = field.disp.data[0]
    _write_raw(Path(path), u, u.shape[1:], "f32", (1.0, 1.0, 1.0))


def load_field(path) -> DeformationField:
    array, _ = _read_raw(Path(path), expected_channels=3)
    return DeformationField(Tensor(array.astype(np.float64)[None]), 0)
