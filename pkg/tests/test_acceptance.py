"""Acceptance gate: one test per release criterion, each printing one summary line.

Run with `pytest tests/test_acceptance.py -v` to get a pass/fail line per
criterion.  Tolerances and scales are fixed here and must not be loosened;
oracle implementations live in tests/oracles.py and are intentionally
independent of the package internals.
"""

import json
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from selret import (Mask3D, PhantomSpec, ProbabilityMap, SelectionPolicy,
                    StabilityRecord, all_tta_transforms, component_count,
                    dice, ensemble, gen_dataset, hd95, label_components,
                    load_mask_bundle, rank_and_select, resample_mask,
                    resample_volume, selected_ids, tta_forward, tta_inverse)
from selret.pipeline import PipelineConfig, resume, run_pipeline, stage_names

from helpers import mk_mask, mk_vol
from oracles import (dice_exact, flood_fill_partition, hd95_bruteforce,
                     mean_ensemble_bruteforce, partition_of_labeling)


def test_criterion_1_metric_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)

    empty = np.zeros((3, 3, 3), np.uint8)
    single = empty.copy()
    single[1, 1, 1] = 1
    corner_a = np.zeros((4, 4, 4), np.uint8)
    corner_a[0, 0, 0] = 1
    corner_b = np.zeros((4, 4, 4), np.uint8)
    corner_b[3, 3, 3] = 1
    full = np.ones((2, 2, 2), np.uint8)
    one_cell = np.ones((1, 1, 1), np.uint8)
    pairs = [
        (empty, empty, (1.0, 1.0, 1.0)),
        (empty, single, (1.0, 1.0, 1.0)),
        (single, single, (2.0, 0.5, 1.0)),
        (corner_a, corner_b, (1.0, 1.0, 1.0)),
        (corner_a, corner_b, (0.5, 2.0, 1.5)),
        (full, full, (1.0, 1.0, 1.0)),
        (one_cell, one_cell, (3.0, 3.0, 3.0)),
        (full, np.zeros((2, 2, 2), np.uint8), (1.0, 1.0, 1.0)),
    ]
    for _ in range(200):
        dims = tuple(int(rng.integers(1, 13)) for _ in range(3))
        spacing = tuple(float(rng.uniform(0.5, 2.5)) for _ in range(3))
        density_a, density_b = rng.uniform(0.0, 0.7, size=2)
        a = (rng.random(dims) < density_a).astype(np.uint8)
        b = (rng.random(dims) < density_b).astype(np.uint8)
        pairs.append((a, b, spacing))

    max_dice_err = Fraction(0)
    max_hd_err = 0.0
    n_hd = 0
    for a, b, spacing in pairs:
        ma, mb = mk_mask(a, spacing), mk_mask(b, spacing)
        want = dice_exact(a, b)
        err = abs(Fraction(dice(ma, mb)) - want)
        max_dice_err = max(max_dice_err, err)
        assert err <= Fraction(1, 10**12)
        if a.any() and b.any():
            n_hd += 1
            got = hd95(ma, mb)
            ref = hd95_bruteforce(a, b, spacing)
            max_hd_err = max(max_hd_err, abs(got - ref))
            assert abs(got - ref) <= 1e-9, (a.shape, spacing)
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    print(f"criterion 1: {len(pairs)} pairs, dice err <= {float(max_dice_err):.2e}, "
          f"hd95 err <= {max_hd_err:.2e} over {n_hd} defined pairs, {elapsed:.1f}s")


def test_criterion_2_components_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(202)
    for trial in range(200):
        arr = (rng.random((32, 32, 32)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        mask = mk_mask(arr)
        counts = {}
        for conn in (6, 26):
            labeling = label_components(mask, conn)
            counts[conn] = labeling.count
            assert partition_of_labeling(labeling.labels) == set(
                flood_fill_partition(arr, conn)), (trial, conn)
        assert counts[26] <= counts[6], trial
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    print(f"criterion 2: 200 trials at 32^3, partitions exact, "
          f"count(26) <= count(6) everywhere, {elapsed:.1f}s")


def test_criterion_3_dataset_reconstruction_arithmetic(tmp_path):
    _, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                           labeled=153, unlabeled=290, heldout=0,
                           n_disconnected=2, n_blurred=40,
                           blur_length_frac=0.45, seed=29)
    cfg = PipelineConfig.from_dict({
        "manifest": str(mpath),
        "out_root": str(tmp_path / "run"),
        "segmenter": {"kind": "mock_threshold"},
        "seed": 5,
        "iterations": 0,
    })
    state = run_pipeline(cfg, stop_after="filter")

    assert len(state.splits["labeled"]) == 111
    assert len(state.splits["unlabeled"]) == 332
    dense = [d["case_id"] for d in state.filter_reports["dense"]["demoted"]]
    blurred = sorted(d["case_id"] for d in state.filter_reports["blurred"]["demoted"])
    assert dense == ["lab_0000", "lab_0001"]
    assert blurred == [f"lab_{i:04d}" for i in range(2, 42)]
    print("criterion 3: 153 dense + 290 unlabeled -> 111 labeled / 332 unlabeled, "
          "demotions exactly the 2 disconnected + 40 faded cases")


def test_criterion_4_selection_policy_suite():
    def rec(cid, score, comps=2):
        return StabilityRecord(case_id=cid, dice_to_final=[score, score],
                               stability_score=score, final_component_count=comps)

    policy = SelectionPolicy(top_k=3, min_score=0.9)

    # strict threshold boundary: a score exactly at the minimum is excluded
    at, above = rec("at", 0.9), rec("above", 0.9 + 1e-9)
    got = selected_ids(rank_and_select([at, above], policy))
    assert got == ["above"]

    # wrong component count is never selected, whatever the score
    rng = np.random.default_rng(404)
    records = [rec(f"c{i:03d}", float(rng.uniform(0.5, 1.0)),
                   comps=int(rng.integers(1, 5))) for i in range(60)]
    chosen = rank_and_select(records, SelectionPolicy(top_k=60, min_score=0.6))
    assert all(r.final_component_count == 2 for r in chosen if r.selected)
    assert any(r.selected for r in chosen)

    # cap: |selected| == min(top_k, eligible) over random policies
    for i in range(50):
        records = [rec(f"c{i:03d}", float(rng.uniform(0.0, 1.0)),
                       comps=int(rng.integers(1, 4))) for i in range(40)]
        pol = SelectionPolicy(top_k=int(rng.integers(0, 15)),
                              min_score=float(rng.uniform(0.0, 1.0)))
        eligible = [r for r in records
                    if r.final_component_count == 2 and r.stability_score > pol.min_score]
        picked = selected_ids(rank_and_select(records, pol))
        assert len(picked) == min(pol.top_k, len(eligible))

    # permutation invariance of the selected set and of assigned ranks
    records = [rec(f"c{i:03d}", float(rng.uniform(0.5, 1.0)),
                   comps=int(rng.integers(2, 4))) for i in range(30)]
    base = rank_and_select(records, policy)
    want = {r.case_id: r.rank for r in base if r.selected}
    for _ in range(8):
        perm = list(records)
        rng.shuffle(perm)
        got = rank_and_select(perm, policy)
        assert {r.case_id: r.rank for r in got if r.selected} == want

    # deterministic tie-break: equal scores resolve by ascending case id
    ties = [rec("p7", 0.95), rec("p2", 0.95), rec("p9", 0.95), rec("p1", 0.99)]
    got = selected_ids(rank_and_select(ties, policy))
    assert got == ["p1", "p2", "p7"]
    print("criterion 4: threshold boundary, component exclusion, cap, "
          "permutation invariance, tie-break all hold")


def test_criterion_5_tta_exactness():
    transforms = all_tta_transforms()
    assert len(transforms) == 32
    assert len({json.dumps(t.to_dict(), sort_keys=True) for t in transforms}) == 32

    rng = np.random.default_rng(505)
    for draw in range(25):
        dims = tuple(int(rng.integers(1, 9)) for _ in range(3))
        spacing = tuple(float(rng.uniform(0.5, 2.0)) for _ in range(3))
        vol = mk_vol(rng.random(dims, dtype=np.float32), spacing)
        mask = mk_mask((rng.random(dims) < 0.4).astype(np.uint8), spacing)
        prob = ProbabilityMap(dims, spacing, rng.random(dims, dtype=np.float32))
        for t in transforms:
            for x in (vol, mask, prob):
                back = tta_inverse(tta_forward(x, t), t)
                assert type(back) is type(x)
                assert back.dims == x.dims and back.spacing == x.spacing
                assert np.array_equal(back.data, x.data), (draw, t.to_dict())

    for draw in range(20):
        dims = tuple(int(rng.integers(1, 8)) for _ in range(3))
        k = int(rng.integers(1, 6))
        maps = [ProbabilityMap(dims, (1.0, 1.0, 1.0), rng.random(dims, dtype=np.float32))
                for _ in range(k)]
        thr = float(rng.uniform(0.05, 0.95))
        got = ensemble(maps, thr)
        want = mean_ensemble_bruteforce([m.data for m in maps], thr)
        assert np.array_equal(got.data, want), draw
    print("criterion 5: 32 transforms round-trip bitwise on 25 random grids; "
          "ensemble equals the per-voxel mean oracle exactly")


def test_criterion_6_resampling():
    rng = np.random.default_rng(606)

    vol = mk_vol(rng.random((9, 7, 5), dtype=np.float32), (1.3, 0.7, 2.1))
    same = resample_volume(vol, (1.3, 0.7, 2.1))
    assert same.dims == vol.dims
    vol_err = float(np.max(np.abs(same.data - vol.data)))
    assert vol_err <= 1e-6

    arr = (rng.random((9, 7, 5)) < 0.4).astype(np.uint8)
    mask = mk_mask(arr, (1.3, 0.7, 2.1))
    assert np.array_equal(resample_mask(mask, (1.3, 0.7, 2.1)).data, arr)

    coarse = mk_vol(rng.random((10, 12, 14), dtype=np.float32), (2.0, 2.0, 2.0))
    fine = resample_volume(coarse, (1.0, 1.0, 1.0))
    assert fine.dims == (20, 24, 28)
    assert fine.spacing == (1.0, 1.0, 1.0)
    coarse_mask = mk_mask((rng.random((10, 12, 14)) < 0.5).astype(np.uint8),
                          (2.0, 2.0, 2.0))
    assert resample_mask(coarse_mask, (1.0, 1.0, 1.0)).dims == (20, 24, 28)

    # physical-space linear ramp survives 2mm -> 1mm interpolation off-boundary
    nx = 16
    xs = (np.arange(nx, dtype=np.float64) + 0.5) * 2.0
    ramp = np.broadcast_to(xs[:, None, None], (nx, 8, 8)).astype(np.float32)
    out = resample_volume(mk_vol(np.ascontiguousarray(ramp), (2.0, 2.0, 2.0)),
                          (1.0, 1.0, 1.0))
    want = (np.arange(out.dims[0], dtype=np.float64) + 0.5) * 1.0
    inner = slice(2, -2)
    got = out.data[inner, :, :].astype(np.float64)
    ramp_err = float(np.max(np.abs(got - want[inner, None, None])))
    assert ramp_err <= 1e-5
    print(f"criterion 6: identity vol err {vol_err:.1e}, mask bitwise, "
          f"2mm->1mm dims double, ramp err {ramp_err:.1e}")


def test_criterion_7_end_to_end_self_training(tmp_path):
    t0 = time.monotonic()
    _, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                           labeled=10, unlabeled=30, heldout=10, seed=41)

    def config(out):
        return PipelineConfig.from_dict({
            "manifest": str(mpath),
            "out_root": str(out),
            "segmenter": {"kind": "mock_noisy_oracle",
                          "schedule": [0.10, 0.05, 0.03],
                          "seed": 2, "improvement_factor": 0.05,
                          "drop_scale": 0.5},
            "oracle_gt": str(tmp_path / "ds" / "gt"),
            "seed": 2,
            "iterations": 2,
            "policy": {"top_k": 12, "min_score": 0.75},
        })

    state = run_pipeline(config(tmp_path / "run_a"))
    elapsed = time.monotonic() - t0
    assert elapsed < 300.0

    means = [state.model(i)["metrics"]["summary"]["dsc"]["mean"] for i in (0, 1, 2)]
    assert means[1] - means[0] >= -0.005
    assert means[2] - means[1] >= -0.005
    assert means[2] - means[0] >= 0.01

    n_pseudo = 0
    for r in (1, 2):
        entry = state.round(r)
        assert entry["selected_ids"]
        for cid in entry["selected_ids"]:
            mask = load_mask_bundle(os.path.join(str(tmp_path / "run_a"),
                                                 entry["pseudo"][cid]), strict=False)
            assert component_count(mask, 26) == 2, (r, cid)
            n_pseudo += 1

    run_pipeline(config(tmp_path / "run_b"))
    summary_a = open(tmp_path / "run_a" / "summary.json", "rb").read()
    summary_b = open(tmp_path / "run_b" / "summary.json", "rb").read()
    assert summary_a == summary_b
    print(f"criterion 7: heldout DSC {means[0]:.4f} -> {means[1]:.4f} -> {means[2]:.4f} "
          f"(total {means[2]-means[0]:+.4f}), {n_pseudo} pseudo masks all 2-component, "
          f"rerun summary identical, {elapsed:.0f}s")


def test_criterion_8_resume_equivalence(tmp_path):
    _, mpath = gen_dataset(tmp_path / "ds", PhantomSpec(dims=(36, 36, 36)),
                           labeled=4, unlabeled=3, heldout=2,
                           n_disconnected=1, n_blurred=1,
                           blur_length_frac=0.45, seed=31)

    def config(out):
        return PipelineConfig.from_dict({
            "manifest": str(mpath),
            "out_root": str(out),
            "segmenter": {"kind": "mock_threshold"},
            "seed": 13,
            "iterations": 2,
            "policy": {"top_k": 2, "min_score": 0.5},
        })

    run_pipeline(config(tmp_path / "base"))
    want = open(tmp_path / "base" / "summary.json", "rb").read()

    names = stage_names(2)
    for i, cut in enumerate(names):
        out = tmp_path / f"cut{i:02d}"
        partial = run_pipeline(config(out), stop_after=cut)
        assert partial.stages_done[-1] == cut
        resume(os.path.join(str(out), "state.json"))
        got = open(out / "summary.json", "rb").read()
        assert got == want, f"summary diverged after interrupting at {cut}"
    print(f"criterion 8: {len(names)} interrupt points all resume to the "
          "byte-identical summary")
