"""Synthetic two-tube phantoms with ground truth for desk-scale runs.

Each phantom holds two tubes, one per x-half of the volume, built by
sweeping a sphere along a smooth random curve that runs monotonically in z.
The halves never touch (a guaranteed empty slab sits at the midline), so
ground truth always has exactly two 26-connected components, which is the
anatomical prior the selection stage relies on.

Two controlled defects reproduce the failure modes the dataset filters
exist for: `end_blur` fades tube contrast toward the z extremes so a
threshold-based segmenter under-segments the ends, and `degrade_label` cuts
bands out of the annotation so it gains extra components while the image
and the ground truth stay intact.
"""

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .components import component_count
from .core_io import (CaseRecord, DatasetManifest, Mask3D, Volume3D,
                      save_manifest, save_mask_bundle, save_volume_bundle)
from .errors import DimsTooSmall
from .rand import derive_rng, derive_seed


@dataclass
class PhantomSpec:
    dims: tuple = (40, 40, 40)
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)
    tube_radius_vox: tuple = (2.0, 3.0)
    curvature_vox: tuple = (0.0, 3.0)
    intensity: tuple = (1.0, 0.0, 0.05)  # foreground, background, noise std
    end_blur: tuple = None               # (length_vox, strength) or None
    degrade_label: int = None            # segments to cut out of the annotation

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.seed = int(self.seed)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.tube_radius_vox = (float(self.tube_radius_vox[0]), float(self.tube_radius_vox[1]))
        rlo, rhi = self.tube_radius_vox
        if rlo < 1 or rhi < rlo:
            raise ValueError(f"radius range must be ordered with lo >= 1, got {self.tube_radius_vox}")
        self.curvature_vox = (float(self.curvature_vox[0]), float(self.curvature_vox[1]))
        if self.curvature_vox[0] < 0 or self.curvature_vox[1] < self.curvature_vox[0]:
            raise ValueError(f"curvature range must be ordered and >= 0, got {self.curvature_vox}")
        fg, bg, noise = (float(v) for v in self.intensity)
        if fg == bg:
            raise ValueError("foreground and background levels must differ")
        if noise < 0:
            raise ValueError(f"noise std must be >= 0, got {noise}")
        self.intensity = (fg, bg, noise)
        if self.end_blur is not None:
            length, strength = float(self.end_blur[0]), float(self.end_blur[1])
            if length <= 0 or not 0 <= strength <= 1:
                raise ValueError(f"end_blur needs length > 0 and strength in [0,1], got {self.end_blur}")
            self.end_blur = (length, strength)
        if self.degrade_label is not None:
            self.degrade_label = int(self.degrade_label)
            if self.degrade_label < 1:
                raise ValueError(f"degrade_label must be >= 1, got {self.degrade_label}")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "seed": self.seed,
            "spacing": list(self.spacing),
            "tube_radius_vox": list(self.tube_radius_vox),
            "curvature_vox": list(self.curvature_vox),
            "intensity": list(self.intensity),
            "end_blur": list(self.end_blur) if self.end_blur is not None else None,
            "degrade_label": self.degrade_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        kw = {k: d[k] for k in (
            "dims", "seed", "spacing", "tube_radius_vox", "curvature_vox",
            "intensity", "end_blur", "degrade_label",
        ) if k in d and d[k] is not None}
        if "end_blur" in d and d["end_blur"] is not None:
            kw["end_blur"] = tuple(d["end_blur"])
        return cls(**kw)


def _check_dims(dims, r_max: float):
    nx, ny, nz = dims
    if nx / 2 - 2 - r_max < 1 + r_max:
        raise DimsTooSmall(f"x extent {nx} cannot hold two radius-{r_max} tubes apart")
    if ny - 2 - r_max < 1 + r_max:
        raise DimsTooSmall(f"y extent {ny} too small for radius {r_max}")
    if nz < 12:
        raise DimsTooSmall(f"z extent {nz} below the 12-slice minimum")


def _sweep_tube(dims, rng, x_range, y_range, curv_range, radius: float) -> np.ndarray:
    """Boolean tube mask: sphere of the given radius swept along a random curve."""
    nx, ny, nz = dims
    x_start = rng.uniform(*x_range)
    x_end = rng.uniform(*x_range)
    amp_x = rng.uniform(*curv_range) * (1 if rng.integers(0, 2) else -1)
    y_start = rng.uniform(*y_range)
    y_end = rng.uniform(*y_range)
    amp_y = rng.uniform(*curv_range) * (1 if rng.integers(0, 2) else -1)
    off0 = int(rng.integers(0, max(1, nz // 10) + 1))
    off1 = int(rng.integers(0, max(1, nz // 10) + 1))
    z0, z1 = off0, nz - 1 - off1
    if z1 - z0 < max(6, int(0.6 * nz)):
        z0, z1 = 0, nz - 1

    s = (np.arange(z0, z1 + 1) - z0) / max(1, z1 - z0)
    cx = np.clip((1 - s) * x_start + s * x_end + amp_x * 4 * s * (1 - s), *x_range)
    cy = np.clip((1 - s) * y_start + s * y_end + amp_y * 4 * s * (1 - s), *y_range)

    gx = np.arange(nx, dtype=np.float64)[:, None]
    gy = np.arange(ny, dtype=np.float64)[None, :]
    mask = np.zeros(dims, dtype=bool)
    r2 = radius * radius
    reach = int(math.ceil(radius))
    for i, z in enumerate(range(z0, z1 + 1)):
        plane_d2 = (gx - cx[i]) ** 2 + (gy - cy[i]) ** 2
        for dz in range(-reach, reach + 1):
            zz = z + dz
            if 0 <= zz < nz:
                budget = r2 - dz * dz
                if budget >= 0:
                    mask[:, :, zz] |= plane_d2 <= budget
    return mask


def _cut_segments(annotation: np.ndarray, tube_masks: list, n_segments: int, rng) -> np.ndarray:
    """Remove z-bands from tube interiors; every cut adds one component."""
    out = annotation.copy()
    used = {0: [], 1: []}
    for j in range(n_segments):
        ti = j % 2
        tube = tube_masks[ti]
        zs = np.flatnonzero(tube.any(axis=(0, 1)))
        lo, hi = int(zs[0]) + 2, int(zs[-1]) - 3
        candidates = [z for z in range(lo, hi + 1)
                      if all(abs(z - u) >= 4 for u in used[ti])]
        if not candidates:
            raise DimsTooSmall(f"tube too short to cut {n_segments} segments")
        z = int(candidates[int(rng.integers(0, len(candidates)))])
        used[ti].append(z)
        band = np.zeros_like(out, dtype=bool)
        band[:, :, z:z + 2] = tube[:, :, z:z + 2]
        out[band] = 0
    return out


def gen_phantom(spec: PhantomSpec):
    """Build (image, ground truth, annotation) for one phantom."""
    r_max = spec.tube_radius_vox[1]
    _check_dims(spec.dims, r_max)
    nx, ny, nz = spec.dims
    rng = derive_rng(spec.seed, "phantom")

    tubes = []
    mid = nx / 2.0
    y_range = (1 + r_max, ny - 2 - r_max)
    for x_range in ((1 + r_max, mid - 2 - r_max), (mid + 2 + r_max, nx - 2 - r_max)):
        radius = float(rng.uniform(*spec.tube_radius_vox))
        tubes.append(_sweep_tube(spec.dims, rng, x_range, y_range, spec.curvature_vox, radius))

    gt_data = (tubes[0] | tubes[1]).astype(np.uint8)
    gt = Mask3D(spec.dims, spec.spacing, gt_data)
    if component_count(gt, 26) != 2:
        raise RuntimeError("phantom construction broke the two-tube guarantee")

    fg, bg, noise_std = spec.intensity
    contrast = np.where(gt_data != 0, 1.0, 0.0)
    if spec.end_blur is not None:
        length, strength = spec.end_blur
        union = gt_data != 0
        zs = np.flatnonzero(union.any(axis=(0, 1)))
        z_lo, z_hi = int(zs[0]), int(zs[-1])
        z_idx = np.arange(nz, dtype=np.float64)
        dist = np.minimum(z_idx - z_lo, z_hi - z_idx)
        factor = 1.0 - strength * np.clip(1.0 - dist / length, 0.0, 1.0)
        contrast = contrast * factor[None, None, :]
    data = bg + (fg - bg) * contrast
    data = data + rng.normal(0.0, noise_std, size=spec.dims)
    vol = Volume3D(spec.dims, spec.spacing, data.astype(np.float32))

    ann_data = gt_data
    if spec.degrade_label is not None:
        ann_data = _cut_segments(gt_data, tubes, spec.degrade_label, rng)
    annotation = Mask3D(spec.dims, spec.spacing, ann_data)
    return vol, gt, annotation


def gen_dataset(out_dir, spec_template: PhantomSpec, labeled: int, unlabeled: int,
                heldout: int, n_disconnected: int = 0, n_blurred: int = 0,
                seed: int = 0, blur_length_frac: float = 0.35,
                blur_strength: float = 0.9):
    """Write a full synthetic dataset; returns (manifest, manifest_path).

    The first n_disconnected labeled cases get a cut annotation (image and
    ground truth stay clean); the next n_blurred get strong end fading in
    the image.  Ground truth goes to gt/ for every case as an evaluation and
    mock side-channel that is never listed in the manifest.
    """
    if n_disconnected + n_blurred > labeled:
        raise ValueError(
            f"{n_disconnected} disconnected + {n_blurred} blurred exceed {labeled} labeled cases")
    out_dir = str(out_dir)
    for sub in ("cases", "labels", "gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    blur = (max(4.0, round(blur_length_frac * spec_template.dims[2])), blur_strength)
    records = []

    def emit(case_id, spec, split, with_label):
        vol, gt, ann = gen_phantom(spec)
        save_volume_bundle(vol, os.path.join(out_dir, "cases", case_id))
        save_mask_bundle(gt, os.path.join(out_dir, "gt", case_id))
        label_ref = None
        if with_label:
            save_mask_bundle(ann, os.path.join(out_dir, "labels", case_id))
            label_ref = f"labels/{case_id}"
        records.append(CaseRecord(
            case_id=case_id,
            image=f"cases/{case_id}",
            label=label_ref,
            annotation_kind="dense" if with_label else "none",
            split=split,
        ))

    for i in range(labeled):
        case_id = f"lab_{i:04d}"
        spec = replace(spec_template, seed=derive_seed(seed, "labeled", i))
        if i < n_disconnected:
            spec = replace(spec, degrade_label=1)
        elif i < n_disconnected + n_blurred:
            spec = replace(spec, end_blur=blur)
        emit(case_id, spec, "labeled", with_label=True)
    for i in range(unlabeled):
        spec = replace(spec_template, seed=derive_seed(seed, "unlabeled", i))
        emit(f"unl_{i:04d}", spec, "unlabeled", with_label=False)
    for i in range(heldout):
        spec = replace(spec_template, seed=derive_seed(seed, "heldout", i))
        emit(f"hld_{i:04d}", spec, "heldout", with_label=True)

    manifest = DatasetManifest(cases=records)
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest, manifest_path)
    return manifest, manifest_path
