"""Resampling to a target spacing and foreground z-score normalization.

Grid convention: voxel i of an axis with spacing s covers [i*s, (i+1)*s) mm,
with its center at (i + 0.5)*s.  Resampling evaluates the input at the
physical centers of the output voxels; samples falling outside the input
grid clamp to the boundary voxel.  Output dims are
max(1, round(dims_i * spacing_i / target_i)) with round-half-away-from-zero,
which preserves physical extent up to one voxel.

Images interpolate trilinearly; masks use nearest-neighbor (ties round half
up) so they stay binary and keep their component topology.
"""

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.ndimage import map_coordinates

from .core_io import Mask3D, Volume3D
from .errors import EmptyForeground, InvalidSpacing, ZeroStd


def _check_target(target_spacing) -> tuple[float, float, float]:
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(not math.isfinite(t) or t <= 0 for t in target):
        raise InvalidSpacing(f"target spacing must be 3 positive finite values, got {target_spacing!r}")
    return target


def target_dims(dims, spacing, target) -> tuple[int, int, int]:
    return tuple(
        max(1, int(math.floor(d * s / t + 0.5))) for d, s, t in zip(dims, spacing, target)
    )


def _center_coords(n_out: int, scale: float) -> np.ndarray:
    # input-grid index of each output voxel center; scale = target/source
    return (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5


def resample_volume(vol: Volume3D, target_spacing) -> Volume3D:
    """Trilinearly resample a volume onto the target spacing."""
    target = _check_target(target_spacing)
    out_dims = target_dims(vol.dims, vol.spacing, target)
    coords = [
        _center_coords(n, t / s) for n, s, t in zip(out_dims, vol.spacing, target)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    src = vol.data.astype(np.float64)
    out = map_coordinates(src, grid, order=1, mode="nearest")
    # linear interpolation is convex; clip guards against float round-off
    out = np.clip(out, src.min(), src.max())
    return Volume3D(out_dims, target, out.astype(np.float32))


def resample_mask_to_grid(mask: Mask3D, out_dims, out_spacing) -> Mask3D:
    """Nearest-neighbor sample a mask onto an explicit output grid."""
    out_spacing = _check_target(out_spacing)
    out_dims = tuple(int(d) for d in out_dims)
    idx = []
    for n_out, n_in, s, t in zip(out_dims, mask.dims, mask.spacing, out_spacing):
        u = _center_coords(n_out, t / s)
        idx.append(np.clip(np.floor(u + 0.5).astype(np.intp), 0, n_in - 1))
    data = mask.data[np.ix_(*idx)]
    return Mask3D(out_dims, out_spacing, np.ascontiguousarray(data))


def resample_mask(mask: Mask3D, target_spacing) -> Mask3D:
    target = _check_target(target_spacing)
    return resample_mask_to_grid(mask, target_dims(mask.dims, mask.spacing, target), target)


@dataclass
class IntensityStats:
    """Foreground intensity statistics pooled over a dataset."""

    mean: float
    std: float
    voxel_count: int

    def __post_init__(self):
        if self.voxel_count <= 0:
            raise EmptyForeground("stats over zero foreground voxels are unusable")
        if self.std < 0:
            raise ValueError(f"negative std {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "voxel_count": self.voxel_count}

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityStats":
        return cls(mean=float(d["mean"]), std=float(d["std"]), voxel_count=int(d["voxel_count"]))


def compute_foreground_stats(cases: Iterable[tuple[Volume3D, Mask3D]]) -> IntensityStats:
    """Mean and population std of image intensities at mask==1 voxels, pooled."""
    n = 0
    total = 0.0
    total_sq = 0.0
    for vol, mask in cases:
        if vol.dims != mask.dims:
            raise InvalidSpacing(f"volume dims {vol.dims} != mask dims {mask.dims}")
        values = vol.data[mask.data != 0].astype(np.float64)
        n += values.size
        total += float(values.sum())
        total_sq += float(np.square(values).sum())
    if n == 0:
        raise EmptyForeground("no foreground voxels across the dataset")
    mean = total / n
    var = max(0.0, total_sq / n - mean * mean)
    return IntensityStats(mean=mean, std=math.sqrt(var), voxel_count=n)


def znormalize(vol: Volume3D, stats: IntensityStats) -> Volume3D:
    """Map every voxel v to (v - mean) / std."""
    if stats.std <= 0:
        raise ZeroStd("z-score normalization needs std > 0")
    data = (vol.data.astype(np.float64) - stats.mean) / stats.std
    return Volume3D(vol.dims, vol.spacing, data.astype(np.float32))
