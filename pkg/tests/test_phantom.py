import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from selret import (PhantomSpec, component_count, gen_dataset, gen_phantom,
                    label_components, load_manifest, load_mask_bundle,
                    load_volume_bundle, resolve_ref)
from selret.errors import DimsTooSmall


def test_default_spec_two_components():
    for seed in range(6):
        _, gt, ann = gen_phantom(PhantomSpec(seed=seed))
        assert component_count(gt, 26) == 2
        assert np.array_equal(gt.data, ann.data)


def test_determinism_bitwise():
    spec = PhantomSpec(dims=(40, 40, 40), seed=123)
    v1, g1, a1 = gen_phantom(spec)
    v2, g2, a2 = gen_phantom(spec)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(g1.data, g2.data)
    assert np.array_equal(a1.data, a2.data)
    v3, _, _ = gen_phantom(PhantomSpec(dims=(40, 40, 40), seed=124))
    assert not np.array_equal(v1.data, v3.data)


def test_tubes_have_contrast():
    vol, gt, _ = gen_phantom(PhantomSpec(seed=1))
    fg = vol.data[gt.data != 0].mean()
    bg = vol.data[gt.data == 0].mean()
    assert fg - bg > 0.5


def test_degrade_label_disconnects_annotation():
    spec = PhantomSpec(seed=5, degrade_label=1)
    _, gt, ann = gen_phantom(spec)
    assert component_count(gt, 26) == 2
    assert component_count(ann, 26) >= 3
    # degraded annotation only removes voxels, never adds
    assert not np.any(ann.data & ~gt.data)


def test_tubes_never_touch():
    for seed in range(8):
        _, gt, _ = gen_phantom(PhantomSpec(seed=seed, tube_radius_vox=(2.0, 3.5)))
        lab = label_components(gt, 26)
        assert lab.count == 2
        assert min(lab.sizes) > 20


def test_end_blur_reduces_endpoint_contrast():
    base = PhantomSpec(dims=(40, 40, 48), seed=9)
    vol_plain, gt, _ = gen_phantom(base)
    blurred_spec = PhantomSpec(dims=(40, 40, 48), seed=9, end_blur=(14, 0.9))
    vol_blur, gt_b, _ = gen_phantom(blurred_spec)
    assert np.array_equal(gt.data, gt_b.data)
    zs = np.nonzero(gt.data.any(axis=(0, 1)))[0]
    ends = list(zs[:3]) + list(zs[-3:])
    mid = list(zs[len(zs) // 2 - 1:len(zs) // 2 + 2])

    def fg_mean(vol, z_list):
        sel = np.zeros(gt.data.shape, bool)
        sel[:, :, z_list] = True
        return float(vol.data[(gt.data != 0) & sel].mean())

    assert fg_mean(vol_blur, ends) < fg_mean(vol_plain, ends) - 0.2
    assert abs(fg_mean(vol_blur, mid) - fg_mean(vol_plain, mid)) < 0.1


def test_dims_too_small():
    with pytest.raises(DimsTooSmall):
        gen_phantom(PhantomSpec(dims=(8, 8, 8)))
    with pytest.raises(DimsTooSmall):
        gen_phantom(PhantomSpec(dims=(40, 40, 8)))


def test_spec_validation_and_round_trip():
    spec = PhantomSpec(dims=(36, 38, 40), seed=2, tube_radius_vox=(1.5, 2.5),
                       end_blur=(10, 0.8), degrade_label=1)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        PhantomSpec(tube_radius_vox=(0.5, 2.0))
    with pytest.raises(ValueError):
        PhantomSpec(intensity=(1.0, 1.0, 0.05))


def test_gen_dataset_single_case(tmp_path):
    manifest, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                                  labeled=1, unlabeled=0, heldout=0)
    assert len(manifest.cases) == 1
    rec = manifest.cases[0]
    assert rec.split == "labeled"
    assert rec.annotation_kind == "dense"
    vol = load_volume_bundle(resolve_ref(mpath, rec.image))
    lbl = load_mask_bundle(resolve_ref(mpath, rec.label))
    assert vol.dims == (36, 36, 36)
    assert component_count(lbl, 26) == 2


def test_gen_dataset_layout_and_counts(tmp_path):
    manifest, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                                  labeled=4, unlabeled=3, heldout=2,
                                  n_disconnected=1, n_blurred=1, seed=7)
    loaded = load_manifest(mpath)
    assert len(loaded.by_split("labeled")) == 4
    assert len(loaded.by_split("unlabeled")) == 3
    assert len(loaded.by_split("heldout")) == 2
    # unlabeled cases carry no label ref
    assert all(c.label is None for c in loaded.by_split("unlabeled"))
    # ground truth side channel exists for every case but is not in the manifest
    for c in loaded.cases:
        assert (tmp_path / "ds" / "gt" / f"{c.case_id}.json").is_file()
    text = Path(mpath).read_text()
    assert "gt/" not in text
    # exactly one labeled annotation was degraded to >2 components
    disconnected = [c.case_id for c in loaded.by_split("labeled")
                    if component_count(load_mask_bundle(resolve_ref(mpath, c.label)), 26) > 2]
    assert disconnected == ["lab_0000"]


def test_gen_dataset_count_validation(tmp_path):
    with pytest.raises(ValueError):
        gen_dataset(tmp_path / "x", PhantomSpec(dims=(36, 36, 36)),
                    labeled=2, unlabeled=0, heldout=0, n_disconnected=2, n_blurred=1)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_dataset_regeneration_identical(tmp_path):
    spec = PhantomSpec(dims=(36, 36, 36))
    kwargs = dict(labeled=2, unlabeled=2, heldout=1, n_disconnected=1,
                  n_blurred=1, seed=11)
    gen_dataset(tmp_path / "a", spec, **kwargs)
    gen_dataset(tmp_path / "b", spec, **kwargs)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_gt_side_channel_matches_clean_annotation(tmp_path):
    manifest, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                                  labeled=2, unlabeled=1, heldout=1,
                                  n_disconnected=1, seed=3)
    root = tmp_path / "ds"
    # gt of the degraded case has 2 components even though its label does not
    gt = load_mask_bundle(root / "gt" / "lab_0000")
    assert component_count(gt, 26) == 2
    lbl = load_mask_bundle(root / "labels" / "lab_0000")
    assert component_count(lbl, 26) > 2
    # clean labeled case: label equals gt
    gt1 = load_mask_bundle(root / "gt" / "lab_0001")
    lbl1 = load_mask_bundle(root / "labels" / "lab_0001")
    assert np.array_equal(gt1.data, lbl1.data)
    # unlabeled gt exists with 2 components
    assert component_count(load_mask_bundle(root / "gt" / "unl_0000"), 26) == 2


def test_manifest_json_shape(tmp_path):
    _, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                           labeled=1, unlabeled=1, heldout=0, seed=2)
    doc = json.loads(Path(mpath).read_text())
    assert doc["format_version"] == 1
    kinds = {c["case_id"]: c["annotation_kind"] for c in doc["cases"]}
    assert kinds == {"lab_0000": "dense", "unl_0000": "none"}
