"""Weak/strong augmentation and invertible test-time augmentation.

Weak augmentation applies one identical geometric transform to an image and
its mask (flips, z-axis 90-degree rotation, resize, crop) plus a brightness
shift on the image alone.  Strong augmentation is intensity-only jitter for
student inputs: gamma, contrast, additive Gaussian noise, and noise-filled
cuboid painting; it never moves a voxel and never touches a mask.

TTA uses the finite group of axis flips times z-axis quarter turns (32
transforms).  These are pure index permutations, so the inverse is exact on
any grid and ensembled probabilities align voxel-for-voxel.

All randomness derives from (seed, stage, draw_index); augmentation is a pure
function of its inputs.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .core_io import Mask3D, Volume3D
from .errors import EmptyEnsemble, GeometryMismatch
from .rand import derive_rng

_AXES = ("x", "y", "z")
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def _check_range(name, pair):
    lo, hi = float(pair[0]), float(pair[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} must be an ordered finite range, got {pair!r}")
    return (lo, hi)


@dataclass
class WeakSpec:
    flip_axes: tuple = ()
    rot90_z: int = 0
    brightness_delta_range: tuple = (0.0, 0.0)
    scale_range: tuple = (1.0, 1.0)
    crop_fraction: float = 1.0

    def __post_init__(self):
        axes = tuple(sorted(set(self.flip_axes)))
        if any(a not in _AXES for a in axes):
            raise ValueError(f"flip axes must be drawn from x/y/z, got {self.flip_axes!r}")
        self.flip_axes = axes
        self.rot90_z = int(self.rot90_z)
        if not 0 <= self.rot90_z <= 3:
            raise ValueError(f"rot90_z must be 0..3, got {self.rot90_z}")
        self.brightness_delta_range = _check_range("brightness_delta_range", self.brightness_delta_range)
        self.scale_range = _check_range("scale_range", self.scale_range)
        if self.scale_range[0] <= 0:
            raise ValueError(f"scale factors must be positive, got {self.scale_range}")
        self.crop_fraction = float(self.crop_fraction)
        if not 0 < self.crop_fraction <= 1:
            raise ValueError(f"crop_fraction must be in (0,1], got {self.crop_fraction}")


@dataclass
class StrongSpec:
    gamma_range: tuple = (1.0, 1.0)
    contrast_range: tuple = (1.0, 1.0)
    noise_std: float = 0.0
    paint_patches: int = 0
    paint_size: int = 1

    def __post_init__(self):
        self.gamma_range = _check_range("gamma_range", self.gamma_range)
        if self.gamma_range[0] <= 0:
            raise ValueError(f"gamma must stay positive, got {self.gamma_range}")
        self.contrast_range = _check_range("contrast_range", self.contrast_range)
        self.noise_std = float(self.noise_std)
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        self.paint_patches = int(self.paint_patches)
        if self.paint_patches < 0:
            raise ValueError(f"paint_patches must be >= 0, got {self.paint_patches}")
        self.paint_size = int(self.paint_size)
        if self.paint_size < 1:
            raise ValueError(f"paint_size must be >= 1, got {self.paint_size}")


@dataclass
class AugmentSpec:
    """Sampling ranges for weak/strong augmentation plus the stream seed."""

    seed: int = 0
    weak: WeakSpec = field(default_factory=WeakSpec)
    strong: StrongSpec = field(default_factory=StrongSpec)

    def __post_init__(self):
        self.seed = int(self.seed)
        if isinstance(self.weak, dict):
            self.weak = WeakSpec(**self.weak)
        if isinstance(self.strong, dict):
            self.strong = StrongSpec(**self.strong)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "weak": {
                "flip_axes": list(self.weak.flip_axes),
                "rot90_z": self.weak.rot90_z,
                "brightness_delta_range": list(self.weak.brightness_delta_range),
                "scale_range": list(self.weak.scale_range),
                "crop_fraction": self.weak.crop_fraction,
            },
            "strong": {
                "gamma_range": list(self.strong.gamma_range),
                "contrast_range": list(self.strong.contrast_range),
                "noise_std": self.strong.noise_std,
                "paint_patches": self.strong.paint_patches,
                "paint_size": self.strong.paint_size,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        return cls(seed=d.get("seed", 0), weak=dict(d.get("weak", {})), strong=dict(d.get("strong", {})))


def _resize_trilinear(data: np.ndarray, out_dims) -> np.ndarray:
    coords = [
        (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        for n_out, n_in in zip(out_dims, data.shape)
    ]
    grid = np.meshgrid(*coords, indexing="ij")
    out = map_coordinates(data.astype(np.float64), grid, order=1, mode="nearest")
    return out.astype(np.float32)


def _resize_nearest(data: np.ndarray, out_dims) -> np.ndarray:
    idx = []
    for n_out, n_in in zip(out_dims, data.shape):
        u = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        idx.append(np.clip(np.floor(u + 0.5).astype(np.intp), 0, n_in - 1))
    return np.ascontiguousarray(data[np.ix_(*idx)])


def weak_augment(vol: Volume3D, mask: Mask3D, spec: AugmentSpec, draw_index: int):
    """One random geometric transform on both, brightness on the image only."""
    if vol.dims != mask.dims:
        raise GeometryMismatch(f"volume dims {vol.dims} != mask dims {mask.dims}")
    w = spec.weak
    rng = derive_rng(spec.seed, "weak", int(draw_index))

    # fixed draw sequence, consumed even when a stage is an identity,
    # so one spec field never shifts the sampling of the others
    flip_on = {a: bool(rng.integers(0, 2)) for a in w.flip_axes}
    k = int(rng.integers(0, w.rot90_z + 1))
    fac = float(rng.uniform(w.scale_range[0], w.scale_range[1]))

    vdata = vol.data
    mdata = mask.data
    spacing = list(vol.spacing)

    for a in w.flip_axes:
        if flip_on[a]:
            ax = _AXIS_INDEX[a]
            vdata = np.flip(vdata, axis=ax)
            mdata = np.flip(mdata, axis=ax)
    if k:
        vdata = np.rot90(vdata, k, axes=(0, 1))
        mdata = np.rot90(mdata, k, axes=(0, 1))
        if k % 2:
            spacing[0], spacing[1] = spacing[1], spacing[0]

    if fac != 1.0:
        out_dims = tuple(max(1, int(math.floor(n * fac + 0.5))) for n in vdata.shape)
        vdata = _resize_trilinear(vdata, out_dims)
        mdata = _resize_nearest(mdata, out_dims)

    sizes = [max(1, int(math.floor(n * w.crop_fraction + 0.5))) for n in vdata.shape]
    offsets = [int(rng.integers(0, n - s + 1)) for n, s in zip(vdata.shape, sizes)]
    if any(s != n for s, n in zip(sizes, vdata.shape)):
        sl = tuple(slice(o, o + s) for o, s in zip(offsets, sizes))
        vdata = vdata[sl]
        mdata = mdata[sl]

    delta = float(rng.uniform(w.brightness_delta_range[0], w.brightness_delta_range[1]))
    if delta != 0.0:
        vdata = vdata.astype(np.float32) + np.float32(delta)

    dims = tuple(int(n) for n in vdata.shape)
    out_vol = Volume3D(dims, tuple(spacing), np.ascontiguousarray(vdata))
    out_mask = Mask3D(dims, tuple(spacing), np.ascontiguousarray(mdata))
    return out_vol, out_mask


def strong_augment(vol: Volume3D, spec: AugmentSpec, draw_index: int) -> Volume3D:
    """Intensity jitter: gamma, contrast, Gaussian noise, painted cuboids."""
    s = spec.strong
    rng = derive_rng(spec.seed, "strong", int(draw_index))
    data = vol.data.astype(np.float64)
    dims = vol.dims

    g = float(rng.uniform(s.gamma_range[0], s.gamma_range[1]))
    if g != 1.0:
        lo, hi = float(data.min()), float(data.max())
        if hi > lo:
            data = np.power((data - lo) / (hi - lo), g) * (hi - lo) + lo

    c = float(rng.uniform(s.contrast_range[0], s.contrast_range[1]))
    if c != 1.0:
        mean = float(data.mean())
        data = mean + (data - mean) * c

    if s.noise_std > 0:
        data = data + rng.normal(0.0, s.noise_std, size=data.shape)

    if s.paint_patches > 0:
        mean = float(data.mean())
        std = float(data.std())
        for _ in range(s.paint_patches):
            edges = [min(int(rng.integers(1, s.paint_size + 1)), n) for n in dims]
            starts = [int(rng.integers(0, n - e + 1)) for n, e in zip(dims, edges)]
            sl = tuple(slice(o, o + e) for o, e in zip(starts, edges))
            data[sl] = rng.normal(mean, std, size=tuple(edges))

    return Volume3D(dims, vol.spacing, data.astype(np.float32))


@dataclass
class ProbabilityMap(Volume3D):
    """Volume whose values are probabilities in [0,1]."""

    def __post_init__(self):
        super().__post_init__()
        lo = float(self.data.min()) if self.data.size else 0.0
        hi = float(self.data.max()) if self.data.size else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"probabilities must lie in [0,1], got range [{lo}, {hi}]")


@dataclass(frozen=True)
class TtaTransform:
    """Axis flips followed by k quarter turns about the z axis."""

    flips: tuple = ()
    rot90_z: int = 0

    def __post_init__(self):
        axes = tuple(sorted(set(self.flips)))
        if any(a not in _AXES for a in axes):
            raise ValueError(f"flip axes must be drawn from x/y/z, got {self.flips!r}")
        object.__setattr__(self, "flips", axes)
        object.__setattr__(self, "rot90_z", int(self.rot90_z))
        if not 0 <= self.rot90_z <= 3:
            raise ValueError(f"rot90_z must be 0..3, got {self.rot90_z}")

    def to_dict(self) -> dict:
        return {"flips": list(self.flips), "rot90_z": self.rot90_z}

    @classmethod
    def from_dict(cls, d: dict) -> "TtaTransform":
        return cls(flips=tuple(d.get("flips", ())), rot90_z=d.get("rot90_z", 0))


IDENTITY_TRANSFORM = TtaTransform()


def all_tta_transforms() -> list:
    """All 32 members of the flip/z-rotation group, in a fixed order."""
    subsets = [()]
    for a in _AXES:
        subsets += [s + (a,) for s in subsets]
    return [TtaTransform(flips=s, rot90_z=k) for s in sorted(subsets) for k in range(4)]


def _rebuild(obj, data: np.ndarray, spacing):
    dims = tuple(int(n) for n in data.shape)
    return type(obj)(dims, tuple(spacing), np.ascontiguousarray(data))


def tta_forward(obj, t: TtaTransform):
    """Apply flips then the z rotation; works on volumes, maps, and masks."""
    data = obj.data
    spacing = list(obj.spacing)
    for a in t.flips:
        data = np.flip(data, axis=_AXIS_INDEX[a])
    if t.rot90_z:
        data = np.rot90(data, t.rot90_z, axes=(0, 1))
        if t.rot90_z % 2:
            spacing[0], spacing[1] = spacing[1], spacing[0]
    return _rebuild(obj, data, spacing)


def tta_inverse(obj, t: TtaTransform):
    """Exact inverse of tta_forward: undo the rotation, then the flips."""
    data = obj.data
    spacing = list(obj.spacing)
    if t.rot90_z:
        data = np.rot90(data, -t.rot90_z, axes=(0, 1))
        if t.rot90_z % 2:
            spacing[0], spacing[1] = spacing[1], spacing[0]
    for a in reversed(t.flips):
        data = np.flip(data, axis=_AXIS_INDEX[a])
    return _rebuild(obj, data, spacing)


def ensemble(probs: list, threshold: float) -> Mask3D:
    """Voxelwise mean probability, thresholded with >= into a binary mask."""
    if not probs:
        raise EmptyEnsemble("ensemble over zero probability maps")
    threshold = float(threshold)
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    first = probs[0]
    for p in probs[1:]:
        if p.dims != first.dims or p.spacing != first.spacing:
            raise GeometryMismatch(
                f"ensemble member geometry {p.dims}/{p.spacing} != {first.dims}/{first.spacing}"
            )
    acc = np.zeros(first.dims, dtype=np.float64)
    for p in probs:
        acc += p.data.astype(np.float64)
    mean = acc / len(probs)
    return Mask3D(first.dims, first.spacing, (mean >= threshold).astype(np.uint8))
