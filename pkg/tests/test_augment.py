import numpy as np
import pytest

from selret import (IDENTITY_TRANSFORM, AugmentSpec, ProbabilityMap,
                    StrongSpec, TtaTransform, WeakSpec, all_tta_transforms,
                    ensemble, strong_augment, tta_forward, tta_inverse,
                    weak_augment)
from selret.errors import EmptyEnsemble, GeometryMismatch

from helpers import mk_mask, mk_vol, random_mask_array
from oracles import mean_ensemble_bruteforce


def _pair(rng, dims=(8, 9, 10), spacing=(1.0, 1.0, 1.0)):
    vol = mk_vol(rng.standard_normal(dims).astype(np.float32), spacing)
    mask = mk_mask(random_mask_array(rng, dims, 0.3), spacing)
    return vol, mask


def test_spec_validation():
    with pytest.raises(ValueError):
        WeakSpec(flip_axes=("x", "q"))
    with pytest.raises(ValueError):
        WeakSpec(rot90_z=4)
    with pytest.raises(ValueError):
        WeakSpec(scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        WeakSpec(scale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        WeakSpec(crop_fraction=0.0)
    with pytest.raises(ValueError):
        StrongSpec(gamma_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        StrongSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        StrongSpec(paint_size=0)
    with pytest.raises(ValueError):
        TtaTransform(flips=("w",))


def test_augment_spec_round_trip():
    spec = AugmentSpec(seed=42,
                       weak={"flip_axes": ["z", "x"], "rot90_z": 3,
                             "brightness_delta_range": [-0.1, 0.1],
                             "scale_range": [0.9, 1.1], "crop_fraction": 0.8},
                       strong={"gamma_range": [0.7, 1.5], "contrast_range": [0.65, 1.5],
                               "noise_std": 0.1, "paint_patches": 3, "paint_size": 4})
    back = AugmentSpec.from_dict(spec.to_dict())
    assert back.to_dict() == spec.to_dict()
    assert back.weak.flip_axes == ("x", "z")


def test_weak_identity_spec_is_identity():
    rng = np.random.default_rng(0)
    vol, mask = _pair(rng)
    spec = AugmentSpec(seed=1)
    out_v, out_m = weak_augment(vol, mask, spec, 0)
    assert np.array_equal(out_v.data, vol.data)
    assert np.array_equal(out_m.data, mask.data)
    assert out_v.spacing == vol.spacing


def test_weak_determinism():
    rng = np.random.default_rng(1)
    vol, mask = _pair(rng)
    spec = AugmentSpec(seed=7, weak={"flip_axes": ["x", "y", "z"], "rot90_z": 3,
                                     "brightness_delta_range": [-0.2, 0.2],
                                     "scale_range": [0.8, 1.2], "crop_fraction": 0.7})
    a_v, a_m = weak_augment(vol, mask, spec, 5)
    b_v, b_m = weak_augment(vol, mask, spec, 5)
    assert np.array_equal(a_v.data, b_v.data)
    assert np.array_equal(a_m.data, b_m.data)
    c_v, _ = weak_augment(vol, mask, spec, 6)
    assert a_v.dims != c_v.dims or not np.array_equal(a_v.data, c_v.data)


def test_weak_flip_twice_is_identity():
    rng = np.random.default_rng(2)
    vol, mask = _pair(rng)
    spec = AugmentSpec(seed=3, weak={"flip_axes": ["x"]})
    once_v, once_m = weak_augment(vol, mask, spec, 0)
    twice_v, twice_m = weak_augment(once_v, once_m, spec, 0)
    assert np.array_equal(twice_v.data, vol.data)
    assert np.array_equal(twice_m.data, mask.data)


def test_weak_geometric_stages_share_one_transform():
    # flips and rotations alone permute voxels, so foreground count is conserved
    rng = np.random.default_rng(3)
    vol, mask = _pair(rng, dims=(6, 6, 6))
    spec = AugmentSpec(seed=9, weak={"flip_axes": ["x", "y", "z"], "rot90_z": 3})
    for draw in range(10):
        out_v, out_m = weak_augment(vol, mask, spec, draw)
        assert out_m.foreground_count() == mask.foreground_count()
        assert out_v.dims == out_m.dims
        assert set(np.unique(out_m.data)) <= {0, 1}


def test_weak_scale_and_crop_dims():
    rng = np.random.default_rng(4)
    vol, mask = _pair(rng, dims=(10, 10, 10))
    spec = AugmentSpec(seed=5, weak={"scale_range": [0.5, 0.5]})
    out_v, out_m = weak_augment(vol, mask, spec, 0)
    assert out_v.dims == (5, 5, 5)
    assert out_m.dims == (5, 5, 5)
    spec = AugmentSpec(seed=5, weak={"crop_fraction": 0.6})
    out_v, out_m = weak_augment(vol, mask, spec, 0)
    assert out_v.dims == (6, 6, 6)
    assert out_m.dims == (6, 6, 6)


def test_weak_brightness_volume_only():
    rng = np.random.default_rng(5)
    vol, mask = _pair(rng)
    spec = AugmentSpec(seed=2, weak={"brightness_delta_range": [0.5, 0.5]})
    out_v, out_m = weak_augment(vol, mask, spec, 0)
    assert np.allclose(out_v.data, vol.data + 0.5, atol=1e-6)
    assert np.array_equal(out_m.data, mask.data)


def test_weak_geometry_mismatch():
    rng = np.random.default_rng(6)
    vol, _ = _pair(rng, dims=(4, 4, 4))
    _, mask = _pair(rng, dims=(4, 4, 5))
    with pytest.raises(GeometryMismatch):
        weak_augment(vol, mask, AugmentSpec(), 0)


def test_strong_identity_spec():
    rng = np.random.default_rng(7)
    vol, _ = _pair(rng)
    out = strong_augment(vol, AugmentSpec(seed=1), 0)
    assert np.array_equal(out.data, vol.data)


def test_strong_noise_std_statistics():
    vol = mk_vol(np.zeros((64, 64, 64), np.float32))
    spec = AugmentSpec(seed=13, strong={"noise_std": 0.37})
    out = strong_augment(vol, spec, 0)
    measured = float((out.data - vol.data).std())
    assert abs(measured - 0.37) / 0.37 <= 0.05


def test_strong_painting_bound():
    rng = np.random.default_rng(8)
    base = mk_vol(rng.standard_normal((16, 16, 16)).astype(np.float32))
    spec = AugmentSpec(seed=21, strong={"paint_patches": 3, "paint_size": 4})
    out = strong_augment(base, spec, 0)
    assert int((out.data != base.data).sum()) <= 3 * 4 ** 3
    assert out.dims == base.dims


def test_strong_determinism_and_geometry():
    rng = np.random.default_rng(9)
    vol, mask = _pair(rng)
    spec = AugmentSpec(seed=3, strong={"gamma_range": [0.7, 1.5],
                                       "contrast_range": [0.65, 1.5],
                                       "noise_std": 0.1,
                                       "paint_patches": 2, "paint_size": 3})
    a = strong_augment(vol, spec, 4)
    b = strong_augment(vol, spec, 4)
    assert np.array_equal(a.data, b.data)
    assert a.dims == vol.dims
    assert a.spacing == vol.spacing
    c = strong_augment(vol, spec, 5)
    assert not np.array_equal(a.data, c.data)


def test_probability_map_range_check():
    ProbabilityMap((2, 2, 2), (1, 1, 1), np.full((2, 2, 2), 0.5, np.float32))
    with pytest.raises(ValueError):
        ProbabilityMap((1, 1, 1), (1, 1, 1), np.array([[[1.5]]], np.float32))
    with pytest.raises(ValueError):
        ProbabilityMap((1, 1, 1), (1, 1, 1), np.array([[[-0.1]]], np.float32))


def test_transform_group_has_32_members():
    transforms = all_tta_transforms()
    assert len(transforms) == 32
    assert len(set(transforms)) == 32
    assert IDENTITY_TRANSFORM in transforms
    assert transforms == all_tta_transforms()  # stable order


def test_identity_transform_noop():
    rng = np.random.default_rng(10)
    vol, _ = _pair(rng)
    out = tta_forward(vol, IDENTITY_TRANSFORM)
    assert np.array_equal(out.data, vol.data)
    assert out.spacing == vol.spacing


def test_all_transforms_round_trip_bitwise():
    rng = np.random.default_rng(11)
    vol = mk_vol(rng.standard_normal((5, 6, 7)).astype(np.float32), (0.5, 1.0, 2.0))
    mask = mk_mask(random_mask_array(rng, (5, 6, 7), 0.4), (0.5, 1.0, 2.0))
    prob = ProbabilityMap((5, 6, 7), (0.5, 1.0, 2.0),
                          rng.random((5, 6, 7)).astype(np.float32))
    for t in all_tta_transforms():
        for obj in (vol, mask, prob):
            fwd = tta_forward(obj, t)
            back = tta_inverse(fwd, t)
            assert type(back) is type(obj)
            assert back.dims == obj.dims
            assert back.spacing == obj.spacing
            assert np.array_equal(back.data, obj.data)


def test_transform_serialization_round_trip():
    for t in all_tta_transforms():
        assert TtaTransform.from_dict(t.to_dict()) == t


def test_rotation_spacing_swap():
    vol = mk_vol(np.zeros((4, 6, 2), np.float32), (0.5, 1.5, 2.0))
    out = tta_forward(vol, TtaTransform(rot90_z=1))
    assert out.dims == (6, 4, 2)
    assert out.spacing == (1.5, 0.5, 2.0)


def test_ensemble_single_map_thresholds():
    rng = np.random.default_rng(12)
    p = ProbabilityMap((4, 4, 4), (1, 1, 1), rng.random((4, 4, 4)).astype(np.float32))
    out = ensemble([p], 0.5)
    assert np.array_equal(out.data, (p.data >= 0.5).astype(np.uint8))


def test_ensemble_boundary_mean_rule():
    one = ProbabilityMap((1, 1, 1), (1, 1, 1), np.ones((1, 1, 1), np.float32))
    zero = ProbabilityMap((1, 1, 1), (1, 1, 1), np.zeros((1, 1, 1), np.float32))
    assert ensemble([one, zero], 0.5).data[0, 0, 0] == 1


def test_ensemble_matches_mean_oracle():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        dims = (5, 4, 3)
        maps = [ProbabilityMap(dims, (1, 1, 1), rng.random(dims).astype(np.float32))
                for _ in range(n)]
        thr = float(rng.uniform(0.2, 0.8))
        got = ensemble(maps, thr)
        want = mean_ensemble_bruteforce([m.data for m in maps], thr)
        assert np.array_equal(got.data, want)


def test_ensemble_identical_maps_equal_threshold():
    rng = np.random.default_rng(14)
    p = ProbabilityMap((3, 3, 3), (1, 1, 1), rng.random((3, 3, 3)).astype(np.float32))
    a = ensemble([p], 0.5)
    b = ensemble([p, p, p, p], 0.5)
    assert np.array_equal(a.data, b.data)


def test_ensemble_errors():
    with pytest.raises(EmptyEnsemble):
        ensemble([], 0.5)
    a = ProbabilityMap((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 2), np.float32))
    b = ProbabilityMap((2, 2, 3), (1, 1, 1), np.zeros((2, 2, 3), np.float32))
    with pytest.raises(GeometryMismatch):
        ensemble([a, b], 0.5)
    with pytest.raises(ValueError):
        ensemble([a], 0.0)
    with pytest.raises(ValueError):
        ensemble([a], 1.0)
