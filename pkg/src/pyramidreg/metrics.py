"""Overlap and surface-distance metrics for labelled volumes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class LabelVolume:
    labels: np.ndarray  # rank-3 integer field
    spacing: tuple = (1.0, 1.0, 1.0)
    label_set: frozenset = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be rank-3, got {self.labels.shape}")
        self.label_set = frozenset(int(v) for v in np.unique(self.labels))

    def foreground_labels(self):
        return sorted(v for v in self.label_set if v != 0)


def dice(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when the label is empty on both sides."""
    if a.labels.shape != b.labels.shape:
        raise ValueError(
            f"dice: shapes differ: {a.labels.shape} vs {b.labels.shape}")
    ma = a.labels == label
    mb = b.labels == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / denom


def mean_dice(a: LabelVolume, b: LabelVolume) -> float:
    """Mean Dice over foreground labels present in the first volume."""
    labels = a.foreground_labels()
    if not labels:
        return 1.0
    return float(np.mean([dice(a, b, lab) for lab in labels]))


def _boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one 6-neighbour outside it."""
    eroded = mask.copy()
    for axis in range(3):
        lo = np.roll(mask, 1, axis=axis)
        hi = np.roll(mask, -1, axis=axis)
        # rolled-in faces count as outside the mask
        idx_lo = [slice(None)] * 3
        idx_lo[axis] = 0
        lo[tuple(idx_lo)] = False
        idx_hi = [slice(None)] * 3
        idx_hi[axis] = -1
        hi[tuple(idx_hi)] = False
        eroded &= lo & hi
    return np.argwhere(mask & ~eroded)


def surface_distances(a: LabelVolume, b: LabelVolume, label: int):
    """(hd95, assd) between label boundaries, in physical units."""
    if a.labels.shape != b.labels.shape:
        raise ValueError(
            f"surface_distances: shapes differ: {a.labels.shape} vs "
            f"{b.labels.shape}")
    ma = a.labels == label
    mb = b.labels == label
    if not ma.any() or not mb.any():
        raise ValueError(f"label {label} absent in one of the volumes")
    spacing = np.asarray(a.spacing, dtype=np.float64)
    pa = _boundary_voxels(ma) * spacing
    pb = _boundary_voxels(mb) * spacing
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    both = np.concatenate([d_ab, d_ba])
    hd95 = float(np.percentile(both, 95))
    assd = float(both.mean())
    return hd95, assd


def mse(fixed: np.ndarray, warped: np.ndarray) -> float:
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if fixed.shape != warped.shape:
        raise ValueError(f"mse: shapes differ: {fixed.shape} vs {warped.shape}")
    return float(np.mean((fixed - warped) ** 2))
