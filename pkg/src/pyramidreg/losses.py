"""Training objective: local NCC similarity plus field-gradient smoothness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .fields import DeformationField


@dataclass
class LossConfig:
    patch_size: int = 9       # local NCC window edge, odd
    smooth_weight: float = 1.0
    variance_floor: float = 1e-5

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be > 0")


def local_ncc_map(fixed: Tensor, warped: Tensor, patch_size: int,
                  variance_floor: float = 1e-5) -> Tensor:
    """Per-voxel local correlation of n^3 neighbourhoods, in [-1, 1].

    Border neighbourhoods use zero-padded sums with matching valid counts;
    the denominator is guarded by the variance floor.
    """
    if fixed.shape != warped.shape:
        raise ShapeError(
            f"ncc: shapes differ: {fixed.shape} vs {warped.shape}")
    n = patch_size
    cnt = ad.box_filter_sum(Tensor(np.ones(fixed.shape)), n)
    sum_f = ad.box_filter_sum(fixed, n)
    sum_w = ad.box_filter_sum(warped, n)
    mean_f = sum_f / cnt
    mean_w = sum_w / cnt
    cross = ad.box_filter_sum(fixed * warped, n) - mean_f * mean_w * cnt
    var_f = ad.box_filter_sum(fixed * fixed, n) - mean_f * mean_f * cnt
    var_w = ad.box_filter_sum(warped * warped, n) - mean_w * mean_w * cnt
    return cross / ad.sqrt(var_f * var_w + variance_floor)


def ncc_loss(fixed: Tensor, warped: Tensor, config: LossConfig) -> Tensor:
    """Negated sum of local correlations over the whole volume."""
    n = config.patch_size
    if any(n > d for d in fixed.shape[2:]):
        raise ShapeError(
            f"ncc patch {n} larger than spatial dims {fixed.shape[2:]}")
    corr = local_ncc_map(fixed, warped, n, config.variance_floor)
    return -corr.sum()


def smooth_loss(field: DeformationField) -> Tensor:
    """Sum of squared forward differences of the displacement field."""
    u = field.disp
    if min(u.shape[2:]) < 2:
        raise ShapeError("smooth_loss needs spatial dims >= 2")
    dz = u[:, :, 1:, :, :] - u[:, :, :-1, :, :]
    dy = u[:, :, :, 1:, :] - u[:, :, :, :-1, :]
    dx = u[:, :, :, :, 1:] - u[:, :, :, :, :-1]
    return (dz * dz).sum() + (dy * dy).sum() + (dx * dx).sum()


def total_loss(fixed: Tensor, warped: Tensor, field: DeformationField,
               config: LossConfig) -> Tensor:
    loss = ncc_loss(fixed, warped, config)
    if config.smooth_weight:
        loss = loss + config.smooth_weight * smooth_loss(field)
    return loss
