"""Protocol conformance for the bundled node adapter.

These tests drive the adapter executable through the same bridge the
pipeline uses, over a five-phantom dataset.  They skip when the adapter
has not been built; nothing else in the suite ever invokes it.
"""

import pathlib
import shutil

import pytest

from selret.bridge import SegmenterHandle, predict, run_conformance, train
from selret.core_io import load_mask_bundle, resolve_ref
from selret.metrics import dice
from selret.phantom import PhantomSpec, gen_dataset

ADAPTER_CLI = pathlib.Path(__file__).resolve().parents[1] / "adapter" / "dist" / "cli.js"

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or not ADAPTER_CLI.exists(),
    reason="adapter not built; run `npm install && npm run build` in adapter/",
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapter_ds")
    manifest, mpath = gen_dataset(root, PhantomSpec(dims=(24, 24, 24)),
                                  labeled=3, unlabeled=2, heldout=0, seed=6)
    return manifest, mpath, root


def _handle(workdir) -> SegmenterHandle:
    return SegmenterHandle(workdir=str(workdir), exec_spec=["node", str(ADAPTER_CLI)])


def test_adapter_passes_conformance(dataset, tmp_path):
    _, mpath, _ = dataset
    result = run_conformance(_handle(tmp_path), str(mpath), str(tmp_path / "work"))
    assert result["protocol_version"] == 1
    assert result["concurrent_predict"] is True
    assert result["checkpoints"] == 3
    assert result["mask_cases"] == 2
    assert result["probability_cases"] == 2
    assert result["unknown_checkpoint_rejected"] is True


def test_adapter_segments_phantoms(dataset, tmp_path):
    manifest, mpath, root = dataset
    labeled = [
        (c.case_id, str(resolve_ref(mpath, c.image)), str(resolve_ref(mpath, c.label)))
        for c in manifest.by_split("labeled")
    ]
    unlabeled = [(c.case_id, str(resolve_ref(mpath, c.image)))
                 for c in manifest.by_split("unlabeled")]

    handle = _handle(tmp_path)
    ckpts = train(handle, labeled, [], [1 / 3, 2 / 3, 1.0], str(tmp_path / "train"))
    masks = predict(handle, ckpts.final, unlabeled, "masks", str(tmp_path / "predict"))

    for case_id, pred in masks.items():
        gt = load_mask_bundle(root / "gt" / case_id)
        assert dice(pred, gt) > 0.9, f"{case_id}: adapter mask strays from ground truth"
