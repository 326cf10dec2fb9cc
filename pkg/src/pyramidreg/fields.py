"""Deformation-field algebra: warping, composition, resampling, folding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class DeformationField:
    """Per-voxel displacement (dz,dy,dx) in voxel units of its own grid.

    ``scale_level`` 0 is full resolution; level l lives on a grid downsampled
    by 2**l.
    """

    disp: Tensor  # (B, 3, D, H, W)
    scale_level: int = 0

    def __post_init__(self):
        if self.disp.data.ndim != 5 or self.disp.shape[1] != 3:
            raise ShapeError(
                f"deformation field must be (B,3,D,H,W), got {self.disp.shape}")

    @property
    def shape(self):
        return self.disp.shape

    @classmethod
    def zero(cls, spatial, scale_level: int = 0) -> "DeformationField":
        d, h, w = spatial
        return cls(Tensor(np.zeros((1, 3, d, h, w))), scale_level)


def warp(image: Tensor, field: DeformationField) -> Tensor:
    """Trilinear warp of a (B,C,D,H,W) tensor by a same-grid field."""
    return ad.warp(image, field.disp)


def warp_labels(labels: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp of an integer (D,H,W) label volume."""
    D, H, W = labels.shape
    gz, gy, gx = np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                             indexing="ij")
    zi = np.clip(np.rint(gz + disp[0]).astype(np.int64), 0, D - 1)
    yi = np.clip(np.rint(gy + disp[1]).astype(np.int64), 0, H - 1)
    xi = np.clip(np.rint(gx + disp[2]).astype(np.int64), 0, W - 1)
    return labels[zi, yi, xi]


def compose(prev: DeformationField, new: DeformationField) -> DeformationField:
    """Accumulate: out(x) = prev(x + new(x)) + new(x)."""
    if prev.shape != new.shape:
        raise ShapeError(
            f"compose: field shapes differ: {prev.shape} vs {new.shape}")
    if prev.scale_level != new.scale_level:
        raise ShapeError(
            f"compose: scale levels differ: {prev.scale_level} vs "
            f"{new.scale_level}")
    sampled = ad.warp(prev.disp, new.disp)
    return DeformationField(ad.add(sampled, new.disp), prev.scale_level)


def upsample_field(field: DeformationField, factor: int) -> DeformationField:
    """Upsample the grid by ``factor`` and rescale displacement values.

    Displacements are stored in voxel units of their own grid, so one coarse
    voxel equals ``factor`` fine voxels.
    """
    f = int(factor)
    if f < 1:
        raise ValueError("upsample factor must be >= 1")
    if f == 1:
        return field
    up = ad.mul(ad.upsample_trilinear(field.disp, f), float(f))
    level = field.scale_level - (f.bit_length() - 1)
    return DeformationField(up, level)


def jacobian_folding_fraction(field: DeformationField) -> float:
    """Fraction of interior voxels with det(I + grad u) <= 0.

    Forward differences; boundary voxels are excluded from the denominator.
    """
    u = field.disp.data[0]  # (3, D, H, W)
    D, H, W = u.shape[1:]
    if min(D, H, W) < 2:
        raise ShapeError("jacobian needs spatial dims >= 2")
    # grad[c][a] = d u_c / d axis a, on the (D-1, H-1, W-1) interior block
    core = u[:, :-1, :-1, :-1]
    gz = u[:, 1:, :-1, :-1] - core
    gy = u[:, :-1, 1:, :-1] - core
    gx = u[:, :-1, :-1, 1:] - core
    j00, j01, j02 = 1.0 + gz[0], gy[0], gx[0]
    j10, j11, j12 = gz[1], 1.0 + gy[1], gx[1]
    j20, j21, j22 = gz[2], gy[2], 1.0 + gx[2]
    det = (j00 * (j11 * j22 - j12 * j21)
           - j01 * (j10 * j22 - j12 * j20)
           + j02 * (j10 * j21 - j11 * j20))
    return float((det <= 0.0).mean())
