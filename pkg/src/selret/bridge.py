"""Process-boundary protocol for pluggable segmenters, plus built-in mocks.

The orchestrator never links against a trainer.  It writes `<job>/job.json`,
invokes the segmenter command with the job directory as its one argument,
and reads the declared outputs back: `checkpoints.json` after training,
`out/<case_id>` bundles after prediction, `handshake.json` for capability
discovery.  Exit 0 plus schema-valid files is the whole contract, so any
ecosystem can provide the segmenter.

Two in-process mocks implement the same file protocol end to end.  The
threshold mock "trains" a global intensity threshold from labeled voxels
and predicts by thresholding plus largest-component cleanup.  The noisy
oracle reads ground truth from a side-channel directory and corrupts it
with boundary flips and component drop-out at a per-checkpoint rate, so
checkpoint quality improves over training exactly the way stability
scoring assumes.  The oracle keys its corruption on case id, not on the
input volume, so it cannot be used behind test-time augmentation.
"""

import json
import math
import os
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, generate_binary_structure

from .augment import ProbabilityMap
from .components import keep_largest_k, label_components
from .core_io import (Mask3D, bundle_paths, load_bundle_header,
                      load_mask_bundle, load_volume_bundle, save_mask_bundle,
                      save_volume_bundle)
from .errors import (EmptyTrainingSet, GeometryMismatch, LaunchFailure,
                     MissingGroundTruth, ProtocolViolation, SelretError,
                     TrainerFailure, UnknownCheckpoint)
from .metrics import boundary_voxels
from .rand import derive_rng

PROTOCOL_VERSION = 1

# pass-through training defaults; the bridge never interprets these
DEFAULT_TRAIN_CONFIG = {
    "batch_size": 2,
    "optimizer": "sgd",
    "learning_rate": 0.01,
    "epochs": 1000,
    "patch_size": [80, 160, 192],
    "loss": "ce_dice",
}


@dataclass
class CheckpointSet:
    """Checkpoint ids ordered by training fraction; the last one is final."""

    ids: list
    fractions: list

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.fractions = [float(f) for f in self.fractions]
        if len(self.ids) != len(self.fractions) or not self.ids:
            raise ValueError("checkpoint ids and fractions must align and be nonempty")
        if self.fractions[-1] != 1.0:
            raise ValueError(f"last checkpoint fraction must be 1.0, got {self.fractions[-1]}")

    @property
    def final(self) -> str:
        return self.ids[-1]

    @property
    def early(self) -> list:
        return self.ids[:-1]

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "fractions": list(self.fractions)}

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointSet":
        return cls(ids=d["ids"], fractions=d["fractions"])


@dataclass
class SegmenterHandle:
    """Where and how to run a segmenter: external command or in-process mock."""

    workdir: str
    exec_spec: list = None
    runner: object = None
    passthrough_config: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN_CONFIG))

    def __post_init__(self):
        if (self.exec_spec is None) == (self.runner is None):
            raise ValueError("exactly one of exec_spec or runner must be set")
        if self.exec_spec is not None and not self.exec_spec:
            raise ValueError("exec_spec must be a nonempty command list")


def _invoke(handle: SegmenterHandle, job_dir: str, command: str):
    if handle.runner is not None:
        handle.runner(job_dir)
        return
    argv = [str(a) for a in handle.exec_spec] + [job_dir]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except OSError as e:
        raise LaunchFailure(f"cannot launch {argv[0]!r}: {e}") from e
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip()[-2000:]
        msg = f"{argv[0]!r} exited {proc.returncode} on {command}: {tail}"
        if command == "train":
            raise TrainerFailure(msg)
        raise ProtocolViolation(msg)


def _write_job(job_dir: str, payload: dict):
    os.makedirs(job_dir, exist_ok=True)
    tmp = os.path.join(job_dir, "job.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    os.replace(tmp, os.path.join(job_dir, "job.json"))


def _read_json(path: str, what: str) -> dict:
    if not os.path.exists(path):
        raise ProtocolViolation(f"segmenter produced no {what} at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ProtocolViolation(f"unreadable {what} at {path}: {e}") from e


def handshake(handle: SegmenterHandle, job_dir: str) -> dict:
    """Capability discovery; returns the validated handshake payload."""
    _write_job(job_dir, {"protocol_version": PROTOCOL_VERSION, "command": "handshake"})
    _invoke(handle, job_dir, "handshake")
    data = _read_json(os.path.join(job_dir, "handshake.json"), "handshake.json")
    if data.get("protocol_version") != PROTOCOL_VERSION:
        raise ProtocolViolation(
            f"segmenter speaks protocol {data.get('protocol_version')!r}, need {PROTOCOL_VERSION}")
    if not isinstance(data.get("concurrent_predict"), bool):
        raise ProtocolViolation("handshake.json lacks boolean concurrent_predict")
    return data


def train(handle: SegmenterHandle, labeled_cases: list, pseudo_cases: list,
          fractions: list, job_dir: str, config: dict = None,
          init_checkpoint: str = None) -> CheckpointSet:
    """Run one training job; cases are (case_id, image_prefix, label_prefix)."""
    payload = {
        "protocol_version": PROTOCOL_VERSION,
        "command": "train",
        "cases": (
            [{"case_id": c, "image": img, "kind": "labeled"} for c, img, _ in labeled_cases]
            + [{"case_id": c, "image": img, "kind": "pseudo"} for c, img, _ in pseudo_cases]
        ),
        "labels": {c: lab for c, _, lab in list(labeled_cases) + list(pseudo_cases)},
        "config": {**handle.passthrough_config, **(config or {})},
        "checkpoint_fractions": [float(f) for f in fractions],
    }
    if init_checkpoint is not None:
        payload["init_checkpoint"] = str(init_checkpoint)
    _write_job(job_dir, payload)
    _invoke(handle, job_dir, "train")

    data = _read_json(os.path.join(job_dir, "checkpoints.json"), "checkpoints.json")
    entries = data.get("checkpoints")
    if not isinstance(entries, list) or len(entries) != len(fractions):
        raise ProtocolViolation(
            f"checkpoints.json must list {len(fractions)} checkpoints, got {entries!r}")
    ids = []
    for want, entry in zip(fractions, entries):
        cid = entry.get("id")
        got = entry.get("fraction")
        if not isinstance(cid, str) or not cid:
            raise ProtocolViolation(f"checkpoint entry without a string id: {entry!r}")
        if got is None or abs(float(got) - float(want)) > 1e-9:
            raise ProtocolViolation(f"checkpoint fraction {got!r} does not match requested {want}")
        ids.append(cid)
    return CheckpointSet(ids=ids, fractions=[float(f) for f in fractions])


def predict(handle: SegmenterHandle, checkpoint_id: str, cases: list,
            emit: str, job_dir: str, config: dict = None) -> dict:
    """Run one prediction job; cases are (case_id, image_prefix) pairs.

    Returns {case_id: Mask3D} for emit="masks" or {case_id: ProbabilityMap}
    for emit="probabilities"; every output is validated against the input
    geometry before it is returned.
    """
    if emit not in ("masks", "probabilities"):
        raise ValueError(f"emit must be 'masks' or 'probabilities', got {emit!r}")
    _write_job(job_dir, {
        "protocol_version": PROTOCOL_VERSION,
        "command": "predict",
        "cases": [{"case_id": c, "image": img} for c, img in cases],
        "checkpoint_id": str(checkpoint_id),
        "emit": emit,
        "config": dict(config or {}),
    })
    _invoke(handle, job_dir, "predict")

    out = {}
    for case_id, img in cases:
        prefix = os.path.join(job_dir, "out", case_id)
        header_path, _ = bundle_paths(prefix)
        if not os.path.exists(header_path):
            raise ProtocolViolation(f"no prediction written for case {case_id!r}")
        in_header = load_bundle_header(img)
        want_dims = tuple(in_header["dims"])
        want_spacing = tuple(float(s) for s in in_header["spacing_mm"])
        try:
            if emit == "masks":
                result = load_mask_bundle(prefix, strict=True)
            else:
                vol = load_volume_bundle(prefix)
                result = ProbabilityMap(vol.dims, vol.spacing, vol.data)
        except (ValueError, SelretError) as e:
            if isinstance(e, GeometryMismatch):
                raise
            raise ProtocolViolation(f"invalid prediction for case {case_id!r}: {e}") from e
        if result.dims != want_dims or result.spacing != want_spacing:
            raise GeometryMismatch(
                f"case {case_id!r}: prediction grid {result.dims}/{result.spacing} "
                f"!= input {want_dims}/{want_spacing}")
        out[case_id] = result
    return out


# ---------------------------------------------------------------------------
# mocks


def _load_job(job_dir: str) -> dict:
    with open(os.path.join(job_dir, "job.json"), "r", encoding="utf-8") as f:
        return json.load(f)


def _write_json(path: str, payload: dict):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    os.replace(tmp, path)


class _MockBase:
    def __call__(self, job_dir: str):
        job = _load_job(job_dir)
        command = job.get("command")
        if job.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolViolation(f"job protocol {job.get('protocol_version')!r} unsupported")
        if command == "handshake":
            _write_json(os.path.join(job_dir, "handshake.json"),
                        {"protocol_version": PROTOCOL_VERSION, "concurrent_predict": True})
        elif command == "train":
            self._train(job_dir, job)
        elif command == "predict":
            os.makedirs(os.path.join(job_dir, "out"), exist_ok=True)
            self._predict(job_dir, job)
        else:
            raise ProtocolViolation(f"unknown command {command!r}")

    def _load_state(self, checkpoint_id: str) -> dict:
        if not os.path.exists(checkpoint_id):
            raise UnknownCheckpoint(f"no checkpoint at {checkpoint_id!r}")
        with open(checkpoint_id, "r", encoding="utf-8") as f:
            return json.load(f)


class ThresholdMock(_MockBase):
    """Global-threshold segmenter: two-means midpoint fit, sigmoid probabilities.

    Checkpoint at fraction f fits on the first ceil(f*n) training cases, so
    later checkpoints see more data like a real training run would.
    """

    def __init__(self, connectivity: int = 26, keep_k: int = 2):
        self.connectivity = int(connectivity)
        self.keep_k = int(keep_k)

    def _train(self, job_dir: str, job: dict):
        cases = job["cases"]
        if not cases:
            raise EmptyTrainingSet("threshold fit needs at least one labeled case")
        labels = job["labels"]
        fractions = job["checkpoint_fractions"]
        stats = []  # per case: (fg_sum, fg_n, bg_sum, bg_n)
        for c in cases:
            vol = load_volume_bundle(c["image"])
            mask = load_mask_bundle(labels[c["case_id"]], strict=False)
            fg = mask.data != 0
            data = vol.data.astype(np.float64)
            stats.append((float(data[fg].sum()), int(fg.sum()),
                          float(data[~fg].sum()), int((~fg).sum())))

        entries = []
        for i, f in enumerate(fractions):
            n_fit = max(1, int(math.ceil(f * len(cases))))
            fg_sum = sum(s[0] for s in stats[:n_fit])
            fg_n = sum(s[1] for s in stats[:n_fit])
            bg_sum = sum(s[2] for s in stats[:n_fit])
            bg_n = sum(s[3] for s in stats[:n_fit])
            if fg_n == 0 or bg_n == 0:
                raise EmptyTrainingSet(f"fit over first {n_fit} cases has one-sided voxels")
            fg_mean = fg_sum / fg_n
            bg_mean = bg_sum / bg_n
            path = os.path.abspath(os.path.join(job_dir, f"ckpt_{i}.json"))
            _write_json(path, {
                "threshold": (fg_mean + bg_mean) / 2.0,
                "tau": max(1e-3, 0.1 * abs(fg_mean - bg_mean)),
                "connectivity": self.connectivity,
                "keep_k": self.keep_k,
            })
            entries.append({"id": path, "fraction": float(f)})
        _write_json(os.path.join(job_dir, "checkpoints.json"), {"checkpoints": entries})

    def _predict(self, job_dir: str, job: dict):
        state = self._load_state(job["checkpoint_id"])
        thr, tau = state["threshold"], state["tau"]
        for c in job["cases"]:
            vol = load_volume_bundle(c["image"])
            out_prefix = os.path.join(job_dir, "out", c["case_id"])
            if job["emit"] == "masks":
                raw = Mask3D(vol.dims, vol.spacing, (vol.data >= thr).astype(np.uint8))
                save_mask_bundle(
                    keep_largest_k(raw, state["connectivity"], state["keep_k"]), out_prefix)
            else:
                z = (vol.data.astype(np.float64) - thr) / tau
                probs = 1.0 / (1.0 + np.exp(-z))
                save_volume_bundle(
                    ProbabilityMap(vol.dims, vol.spacing, probs.astype(np.float32)), out_prefix)


class NoisyOracleMock(_MockBase):
    """Ground-truth corruptor simulating a model that improves over training.

    Checkpoint i predicts the stored ground truth with boundary voxels
    flipped at rate schedule[i] * exp(-improvement_factor * n_pseudo) and,
    at the same rate (times drop_scale), one whole component removed.
    Rates must not increase across checkpoints.  Predictions depend only on
    (seed, train job name, checkpoint index, case_id), never on the input
    volume, so this mock must not be combined with input-transforming TTA.
    """

    def __init__(self, gt_dir: str, schedule: list, seed: int = 0,
                 improvement_factor: float = 0.0, drop_scale: float = 1.0,
                 connectivity: int = 26):
        self.gt_dir = str(gt_dir)
        self.schedule = [float(r) for r in schedule]
        if not self.schedule or any(not 0 <= r <= 1 for r in self.schedule):
            raise ValueError(f"corruption schedule must be rates in [0,1], got {schedule!r}")
        if any(b > a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError(f"corruption schedule must not increase, got {schedule!r}")
        self.seed = int(seed)
        self.improvement_factor = float(improvement_factor)
        self.drop_scale = float(drop_scale)
        self.connectivity = int(connectivity)

    def _train(self, job_dir: str, job: dict):
        fractions = job["checkpoint_fractions"]
        if len(self.schedule) < len(fractions):
            raise TrainerFailure(
                f"schedule covers {len(self.schedule)} checkpoints, {len(fractions)} requested")
        n_pseudo = sum(1 for c in job["cases"] if c.get("kind") == "pseudo")
        scale = math.exp(-self.improvement_factor * n_pseudo)
        entries = []
        for i, f in enumerate(fractions):
            path = os.path.abspath(os.path.join(job_dir, f"ckpt_{i}.json"))
            _write_json(path, {
                "rate": self.schedule[i] * scale,
                "tag": f"{os.path.basename(os.path.normpath(job_dir))}:ckpt{i}",
            })
            entries.append({"id": path, "fraction": float(f)})
        _write_json(os.path.join(job_dir, "checkpoints.json"), {"checkpoints": entries})

    def _corrupt(self, gt: Mask3D, rate: float, rng) -> Mask3D:
        fg = gt.data != 0
        if rate > 0:
            erode_band = boundary_voxels(gt)
            dilate_band = binary_dilation(fg, generate_binary_structure(3, 1)) & ~fg
            flips = (erode_band | dilate_band) & (rng.random(gt.dims) < rate)
            fg = fg ^ flips
        mask = Mask3D(gt.dims, gt.spacing, fg.astype(np.uint8))
        if rate > 0 and rng.random() < rate * self.drop_scale:
            lab = label_components(mask, self.connectivity)
            if lab.count >= 2:
                victim = int(rng.integers(1, lab.count + 1))
                kept = np.where(lab.labels == victim, 0, mask.data).astype(np.uint8)
                mask = Mask3D(gt.dims, gt.spacing, kept)
        return mask

    def _predict(self, job_dir: str, job: dict):
        state = self._load_state(job["checkpoint_id"])
        rate, tag = state["rate"], state["tag"]
        for c in job["cases"]:
            gt_prefix = os.path.join(self.gt_dir, c["case_id"])
            header_path, _ = bundle_paths(gt_prefix)
            if not os.path.exists(header_path):
                raise MissingGroundTruth(f"oracle has no ground truth for {c['case_id']!r}")
            gt = load_mask_bundle(gt_prefix, strict=False)
            in_header = load_bundle_header(c["image"])
            want_dims = tuple(in_header["dims"])
            want_spacing = tuple(float(s) for s in in_header["spacing_mm"])
            if gt.dims != want_dims or gt.spacing != want_spacing:
                raise GeometryMismatch(
                    f"case {c['case_id']!r}: ground truth grid {gt.dims}/{gt.spacing} "
                    f"!= input {want_dims}/{want_spacing}")
            rng = derive_rng(self.seed, "oracle", tag, c["case_id"])
            mask = self._corrupt(gt, rate, rng)
            out_prefix = os.path.join(job_dir, "out", c["case_id"])
            if job["emit"] == "masks":
                save_mask_bundle(mask, out_prefix)
            else:
                probs = np.where(mask.data != 0, 0.95, 0.05).astype(np.float32)
                save_volume_bundle(ProbabilityMap(gt.dims, gt.spacing, probs), out_prefix)


def run_conformance(handle: SegmenterHandle, manifest_path: str, work_dir: str) -> dict:
    """Exercise the full protocol against a dataset; raises on any violation.

    Trains on the manifest's labeled cases, predicts masks and probabilities
    for every other case (all validated by predict itself), and checks that
    a bogus checkpoint id is rejected.  Returns a small result summary.
    """
    from .core_io import load_manifest, resolve_ref  # local to avoid widening module deps

    manifest = load_manifest(manifest_path)
    labeled = [
        (c.case_id, str(resolve_ref(manifest_path, c.image)), str(resolve_ref(manifest_path, c.label)))
        for c in manifest.by_split("labeled")
    ]
    others = [(c.case_id, str(resolve_ref(manifest_path, c.image)))
              for c in manifest.cases if c.split != "labeled"]
    if not others:
        others = [(cid, img) for cid, img, _ in labeled]

    hs = handshake(handle, os.path.join(work_dir, "handshake"))
    fractions = [1 / 3, 2 / 3, 1.0]
    ckpts = train(handle, labeled, [], fractions, os.path.join(work_dir, "train"))
    masks = predict(handle, ckpts.final, others, "masks", os.path.join(work_dir, "predict_masks"))
    probs = predict(handle, ckpts.ids[0], others, "probabilities",
                    os.path.join(work_dir, "predict_probs"))
    try:
        predict(handle, "conformance-bogus-checkpoint", others[:1], "masks",
                os.path.join(work_dir, "predict_bogus"))
        rejected = False
    except (UnknownCheckpoint, ProtocolViolation, TrainerFailure):
        rejected = True
    if not rejected:
        raise ProtocolViolation("segmenter accepted a checkpoint id it never produced")
    return {
        "protocol_version": PROTOCOL_VERSION,
        "concurrent_predict": hs["concurrent_predict"],
        "checkpoints": len(ckpts.ids),
        "mask_cases": len(masks),
        "probability_cases": len(probs),
        "unknown_checkpoint_rejected": rejected,
    }


def mock_threshold_segmenter(workdir: str, connectivity: int = 26,
                             keep_k: int = 2) -> SegmenterHandle:
    return SegmenterHandle(workdir=str(workdir),
                           runner=ThresholdMock(connectivity=connectivity, keep_k=keep_k))


def mock_noisy_oracle(workdir: str, gt_dir: str, schedule: list, seed: int = 0,
                      improvement_factor: float = 0.0, drop_scale: float = 1.0,
                      connectivity: int = 26) -> SegmenterHandle:
    return SegmenterHandle(workdir=str(workdir), runner=NoisyOracleMock(
        gt_dir=gt_dir, schedule=schedule, seed=seed,
        improvement_factor=improvement_factor, drop_scale=drop_scale,
        connectivity=connectivity))
