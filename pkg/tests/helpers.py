"""Shared construction helpers for the test suite."""

import numpy as np

from selret import Mask3D, Volume3D


def mk_mask(arr, spacing=(1.0, 1.0, 1.0)) -> Mask3D:
    arr = np.asarray(arr, dtype=np.uint8)
    return Mask3D(arr.shape, spacing, arr)


def mk_vol(arr, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    arr = np.asarray(arr, dtype=np.float32)
    return Volume3D(arr.shape, spacing, arr)


def random_mask_array(rng, dims, density: float):
    return (rng.random(dims) < density).astype(np.uint8)


def random_dims(rng, lo=1, hi=12):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(3))
