"""Segmentation evaluation: Dice coefficient and 95% Hausdorff distance (mm).

Conventions, pinned here and exercised by the tests:

* dice(empty, empty) = 1.0 (an empty prediction of an empty truth is perfect).
* A boundary voxel is a foreground voxel with at least one background
  6-neighbor; voxels beyond the grid edge count as background, so masks
  touching the border still have a surface.
* hd95 is the 95th percentile, with linear interpolation between order
  statistics, of the pooled bidirectional surface distances.  This pooled
  form is symmetric by construction.  ``directed_max=True`` switches to
  max(p95(a->b), p95(b->a)) for sensitivity checks.
* hd95 is undefined (None in reports) when either mask is empty.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core_io import Mask3D
from .errors import DimsMismatch, EmptyMask, GeometryMismatch


def _check_dims(a: Mask3D, b: Mask3D):
    if a.dims != b.dims:
        raise DimsMismatch(f"dims {a.dims} != {b.dims}")


def _resolve_spacing(a: Mask3D, b: Mask3D, spacing):
    if spacing is None:
        if a.spacing != b.spacing:
            raise GeometryMismatch(f"spacing {a.spacing} != {b.spacing}")
        return a.spacing
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise GeometryMismatch(f"bad spacing override {spacing!r}")
    return spacing


def dice(a: Mask3D, b: Mask3D) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    _check_dims(a, b)
    fa = a.data != 0
    fb = b.data != 0
    na = int(fa.sum())
    nb = int(fb.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(fa, fb).sum())
    return 2.0 * inter / (na + nb)


def boundary_voxels(mask: Mask3D) -> np.ndarray:
    """Boolean grid of foreground voxels with a background 6-neighbor."""
    fg = mask.data != 0
    padded = np.pad(fg, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    return fg & ~interior


def surface_distances(a: Mask3D, b: Mask3D, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Directed surface distance lists (a->b, b->a) in mm.

    Each boundary voxel of one mask is mapped to its nearest boundary voxel
    of the other; distances are Euclidean between voxel centers in physical
    coordinates.  Spacing defaults to the masks' shared spacing.
    """
    _check_dims(a, b)
    spacing = _resolve_spacing(a, b, spacing)
    if a.foreground_count() == 0 or b.foreground_count() == 0:
        raise EmptyMask("surface distances need two non-empty masks")
    surf_a = boundary_voxels(a)
    surf_b = boundary_voxels(b)
    # distance at every voxel to the nearest boundary voxel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~surf_a, sampling=spacing)
    return dist_to_b[surf_a], dist_to_a[surf_b]


def hd95(a: Mask3D, b: Mask3D, spacing=None, directed_max: bool = False) -> float:
    d_ab, d_ba = surface_distances(a, b, spacing)
    if directed_max:
        return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


@dataclass
class MetricsReport:
    """Per-case evaluation; hd95_mm is None when undefined (an empty mask)."""

    dsc: float
    hd95_mm: float | None
    directed: dict | None = None

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "hd95_mm": self.hd95_mm, "directed": self.directed}


def _direction_stats(d: np.ndarray) -> dict:
    return {
        "p50": float(np.percentile(d, 50)),
        "p95": float(np.percentile(d, 95)),
        "max": float(d.max()),
    }


def evaluate_case(pred: Mask3D, gt: Mask3D, spacing=None) -> MetricsReport:
    """Bundle dice and hd95; hd95 becomes None instead of erroring on empties."""
    _check_dims(pred, gt)
    spacing = _resolve_spacing(pred, gt, spacing)
    dsc = dice(pred, gt)
    if pred.foreground_count() == 0 or gt.foreground_count() == 0:
        return MetricsReport(dsc=dsc, hd95_mm=None, directed=None)
    d_ab, d_ba = surface_distances(pred, gt, spacing)
    pooled = np.concatenate([d_ab, d_ba])
    return MetricsReport(
        dsc=dsc,
        hd95_mm=float(np.percentile(pooled, 95)),
        directed={"pred_to_gt": _direction_stats(d_ab), "gt_to_pred": _direction_stats(d_ba)},
    )


def summarize(reports: list[MetricsReport]) -> dict:
    """Mean/std summary over cases, the shape of a results-table row.

    Cases with undefined hd95 are excluded from the hd95 aggregate and
    counted separately. Std is the population standard deviation.
    """
    if not reports:
        raise EmptyMask("no reports to summarize")
    dscs = np.array([r.dsc for r in reports], dtype=np.float64)
    hds = np.array([r.hd95_mm for r in reports if r.hd95_mm is not None], dtype=np.float64)
    undefined = sum(1 for r in reports if r.hd95_mm is None)
    out = {
        "dsc": {"mean": float(dscs.mean()), "std": float(dscs.std()), "n": len(dscs)},
        "hd95_mm": {
            "mean": float(hds.mean()) if hds.size else None,
            "std": float(hds.std()) if hds.size else None,
            "n": int(hds.size),
            "undefined": undefined,
        },
    }
    return out
