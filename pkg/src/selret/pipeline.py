"""Self-training orchestration over the segmenter protocol.

The pipeline is a fixed sequence of stages: preprocess (component filter on
raw annotations, resample, normalize), reliability filter (demote labeled
cases whose self-prediction Dice is low), then per round r: predict all
unlabeled cases at every checkpoint of the current teacher, score stability,
select pseudo-labels, train the next model on labeled + selected pseudo
cases, and evaluate it on the heldout split.  Model 0 is the teacher trained
on labeled data alone; the model trained in round r is both the round-r
student and the round-(r+1) teacher, so each model is trained exactly once.

Every stage persists its results to `state.json` atomically before the next
stage starts, and completed stages are never re-executed: resuming after an
interruption replays the done list and continues, producing byte-identical
artifacts under fixed seeds and deterministic segmenters.  All paths stored
in the state are relative to the output root; checkpoint ids are the only
opaque absolute references, owned by the segmenter.

Selection is cumulative by default: each round keeps every previously
selected case (refreshing its pseudo-label when the new prediction is still
eligible) and adds up to policy.top_k new eligible cases, so the training
set can only grow.  A "fresh" mode instead re-selects r * top_k cases from
scratch each round.
"""

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import bridge
from .augment import AugmentSpec, all_tta_transforms, strong_augment, tta_forward, tta_inverse
from .core_io import (CaseRecord, DatasetManifest, Mask3D, bundle_paths,
                      load_manifest, load_mask_bundle, load_volume_bundle,
                      resolve_ref, save_manifest, save_mask_bundle,
                      save_volume_bundle, _atomic_write_text)
from .errors import ConfigError, EmptyState, MissingGroundTruth, StateCorruption
from .metrics import evaluate_case, summarize
from .preprocess import (compute_foreground_stats, resample_mask,
                         resample_volume, znormalize)
from .rand import derive_seed
from .selection import (FilterReport, SelectionPolicy, StabilityRecord,
                        filter_blurred_boundaries, filter_dense_labels,
                        rank_and_select, score_case, selected_ids)

STATE_VERSION = 1

_SEGMENTER_KINDS = ("mock_threshold", "mock_noisy_oracle", "external")


@dataclass
class PipelineConfig:
    manifest: str
    out_root: str
    segmenter: dict
    seed: int = 0
    iterations: int = 2
    target_spacing: tuple = None
    tta_enabled: bool = False
    tta_threshold: float = 0.5
    sda_enabled: bool = False
    sda_on_labeled: bool = False
    selection_mode: str = "cumulative"
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    filters: dict = field(default_factory=dict)
    oracle_gt: str = None
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.manifest = str(self.manifest)
            self.out_root = str(self.out_root)
            self.seed = int(self.seed)
            self.iterations = int(self.iterations)
            if self.iterations < 0:
                raise ValueError(f"iterations must be >= 0, got {self.iterations}")
            if self.target_spacing is not None:
                self.target_spacing = tuple(float(s) for s in self.target_spacing)
                if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
                    raise ValueError(f"target_spacing must be 3 positive values, got {self.target_spacing}")
            self.tta_threshold = float(self.tta_threshold)
            if not 0 < self.tta_threshold < 1:
                raise ValueError(f"tta_threshold must be in (0,1), got {self.tta_threshold}")
            if self.selection_mode not in ("cumulative", "fresh"):
                raise ValueError(f"selection_mode must be cumulative or fresh, got {self.selection_mode!r}")
            if isinstance(self.policy, dict):
                self.policy = SelectionPolicy.from_dict(self.policy)
            if isinstance(self.augment, dict):
                self.augment = AugmentSpec.from_dict(self.augment)
            self.filters = {
                "max_components": int(self.filters.get("max_components", 2)),
                "min_dice": float(self.filters.get("min_dice", 0.85)),
                "reference_predictions": self.filters.get("reference_predictions"),
            }
            if not isinstance(self.segmenter, dict) or self.segmenter.get("kind") not in _SEGMENTER_KINDS:
                raise ValueError(
                    f"segmenter.kind must be one of {_SEGMENTER_KINDS}, got {self.segmenter!r}")
            if self.segmenter["kind"] == "mock_noisy_oracle":
                if self.oracle_gt is None:
                    raise ValueError("mock_noisy_oracle requires oracle_gt (ground-truth bundle dir)")
                if "schedule" not in self.segmenter:
                    raise ValueError("mock_noisy_oracle requires a corruption schedule")
            if self.segmenter["kind"] == "external" and not self.segmenter.get("exec_spec"):
                raise ValueError("external segmenter requires a nonempty exec_spec command list")
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    def validate_paths(self):
        if not os.path.isfile(self.manifest):
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.oracle_gt is not None and not os.path.isdir(self.oracle_gt):
            raise ConfigError(f"oracle_gt is not a directory: {self.oracle_gt}")
        ref = self.filters.get("reference_predictions")
        if ref is not None and not os.path.isdir(ref):
            raise ConfigError(f"reference_predictions is not a directory: {ref}")

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "out_root": self.out_root,
            "segmenter": dict(self.segmenter),
            "seed": self.seed,
            "iterations": self.iterations,
            "target_spacing": list(self.target_spacing) if self.target_spacing else None,
            "tta_enabled": bool(self.tta_enabled),
            "tta_threshold": self.tta_threshold,
            "sda_enabled": bool(self.sda_enabled),
            "sda_on_labeled": bool(self.sda_on_labeled),
            "selection_mode": self.selection_mode,
            "policy": self.policy.to_dict(),
            "augment": self.augment.to_dict(),
            "filters": dict(self.filters),
            "oracle_gt": self.oracle_gt,
            "train_config": dict(self.train_config),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config must be an object, got {type(d).__name__}")
        known = {
            "manifest", "out_root", "segmenter", "seed", "iterations",
            "target_spacing", "tta_enabled", "tta_threshold", "sda_enabled",
            "sda_on_labeled", "selection_mode", "policy", "augment",
            "filters", "oracle_gt", "train_config",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for req in ("manifest", "out_root", "segmenter"):
            if req not in d:
                raise ConfigError(f"config is missing required key {req!r}")
        return cls(**d)


def config_hash(config: PipelineConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PipelineState:
    config: dict
    config_hash: str
    stages_done: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    filter_reports: dict = field(default_factory=dict)
    stats: dict = None
    models: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    format_version: int = STATE_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "config": self.config,
            "config_hash": self.config_hash,
            "stages_done": list(self.stages_done),
            "splits": self.splits,
            "filter_reports": self.filter_reports,
            "stats": self.stats,
            "models": self.models,
            "rounds": self.rounds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineState":
        try:
            if d["format_version"] != STATE_VERSION:
                raise StateCorruption(f"unsupported state version {d['format_version']!r}")
            return cls(
                config=d["config"],
                config_hash=d["config_hash"],
                stages_done=list(d["stages_done"]),
                splits=d["splits"],
                filter_reports=d["filter_reports"],
                stats=d.get("stats"),
                models=d["models"],
                rounds=d["rounds"],
            )
        except (KeyError, TypeError) as e:
            raise StateCorruption(f"state file is missing fields: {e}") from e

    def model(self, index: int) -> dict:
        for m in self.models:
            if m["index"] == index:
                return m
        raise StateCorruption(f"state has no model {index}")

    def round(self, index: int) -> dict:
        for r in self.rounds:
            if r["index"] == index:
                return r
        raise StateCorruption(f"state has no round {index}")


def save_state(state: PipelineState, path) -> None:
    _atomic_write_text(_as_path(path), json.dumps(state.to_dict(), indent=1, sort_keys=True))


def load_state(path) -> PipelineState:
    if not os.path.isfile(path):
        raise StateCorruption(f"no state file at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StateCorruption(f"unreadable state file {path}: {e}") from e
    return PipelineState.from_dict(doc)


def _as_path(p):
    from pathlib import Path
    return Path(p)


class _Layout:
    """All on-disk locations, derived from the output root."""

    def __init__(self, root: str):
        self.root = str(root)

    def join(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def state_path(self) -> str:
        return self.join("state.json")

    @property
    def summary_path(self) -> str:
        return self.join("summary.json")

    def pre_case(self, case_id: str) -> str:
        return self.join("pre", "cases", case_id)

    def pre_label(self, case_id: str) -> str:
        return self.join("pre", "labels", case_id)

    def pre_gt_dir(self) -> str:
        return self.join("pre", "gt")

    def pre_gt(self, case_id: str) -> str:
        return self.join("pre", "gt", case_id)

    def pre_manifest(self) -> str:
        return self.join("pre", "manifest.json")

    def model_job(self, index: int) -> str:
        return self.join("models", f"m{index}")

    def ref_job(self) -> str:
        return self.join("models", "ref")

    def ref_predict_job(self) -> str:
        return self.join("models", "ref_predict")

    def round_dir(self, r: int) -> str:
        return self.join("rounds", f"r{r}")

    def predict_job(self, r: int, ck: int) -> str:
        return self.join("rounds", f"r{r}", f"predict_ck{ck}")

    def tta_job(self, r: int, t: int) -> str:
        return self.join("rounds", f"r{r}", "tta", f"t{t}")

    def final_mask(self, r: int, case_id: str) -> str:
        return self.join("rounds", f"r{r}", "final", case_id)

    def pseudo_rel(self, r: int, case_id: str) -> str:
        return os.path.join("rounds", f"r{r}", "pseudo", case_id)

    def sda_case(self, r: int, case_id: str) -> str:
        return self.join("rounds", f"r{r}", "sda", case_id)

    def eval_job(self, index: int) -> str:
        return self.join("eval", f"m{index}")


def stage_names(iterations: int) -> list:
    names = ["preprocess", "filter", "train_m0", "eval_m0"]
    for r in range(1, iterations + 1):
        names += [f"predict_r{r}", f"score_r{r}", f"select_r{r}",
                  f"train_m{r}", f"eval_m{r}"]
    names.append("summary")
    return names


def build_segmenter(config: PipelineConfig, layout: _Layout) -> bridge.SegmenterHandle:
    seg = config.segmenter
    kind = seg["kind"]
    if kind == "mock_threshold":
        return bridge.mock_threshold_segmenter(
            workdir=layout.root,
            connectivity=seg.get("connectivity", config.policy.connectivity),
            keep_k=seg.get("keep_k", 2))
    if kind == "mock_noisy_oracle":
        return bridge.mock_noisy_oracle(
            workdir=layout.root,
            gt_dir=layout.pre_gt_dir(),
            schedule=seg["schedule"],
            seed=seg.get("seed", config.seed),
            improvement_factor=seg.get("improvement_factor", 0.0),
            drop_scale=seg.get("drop_scale", 1.0),
            connectivity=seg.get("connectivity", config.policy.connectivity))
    handle = bridge.SegmenterHandle(workdir=layout.root, exec_spec=list(seg["exec_spec"]))
    handle.passthrough_config.update(config.train_config)
    return handle


# ---------------------------------------------------------------------------
# stages


def _load_pre_image(layout: _Layout, case_id: str):
    return load_volume_bundle(layout.pre_case(case_id))


def _stage_preprocess(state: PipelineState, config: PipelineConfig, layout: _Layout):
    manifest = load_manifest(config.manifest)
    labeled = manifest.by_split("labeled")
    unlabeled = manifest.by_split("unlabeled")
    heldout = manifest.by_split("heldout")

    raw_labels = {}
    for rec in labeled:
        raw_labels[rec.case_id] = load_mask_bundle(
            resolve_ref(config.manifest, rec.label), strict=False)

    dense_report = filter_dense_labels(
        [(rec, raw_labels[rec.case_id]) for rec in labeled],
        connectivity=config.policy.connectivity,
        max_components=config.filters["max_components"])
    kept_ids = set(dense_report.kept)

    ts = config.target_spacing

    def prepared(rec: CaseRecord):
        vol = load_volume_bundle(resolve_ref(config.manifest, rec.image))
        return resample_volume(vol, ts) if ts else vol

    def prepared_mask(mask):
        return resample_mask(mask, ts) if ts else mask

    stats = compute_foreground_stats(
        (prepared(rec), prepared_mask(raw_labels[rec.case_id]))
        for rec in labeled if rec.case_id in kept_ids)

    pre_records = []
    for rec in manifest.cases:
        vol = znormalize(prepared(rec), stats)
        save_volume_bundle(vol, layout.pre_case(rec.case_id))
        keep_label = rec.label is not None and (rec.split != "labeled" or rec.case_id in kept_ids)
        if keep_label:
            mask = raw_labels.get(rec.case_id)
            if mask is None:
                mask = load_mask_bundle(resolve_ref(config.manifest, rec.label), strict=False)
            save_mask_bundle(prepared_mask(mask), layout.pre_label(rec.case_id))
        if config.oracle_gt is not None:
            gt_prefix = os.path.join(config.oracle_gt, rec.case_id)
            header_path, _ = bundle_paths(gt_prefix)
            if not os.path.exists(header_path):
                raise MissingGroundTruth(f"oracle_gt has no bundle for case {rec.case_id!r}")
            gt = load_mask_bundle(gt_prefix, strict=False)
            save_mask_bundle(prepared_mask(gt), layout.pre_gt(rec.case_id))
        demoted_here = rec.split == "labeled" and rec.case_id not in kept_ids
        pre_records.append(CaseRecord(
            case_id=rec.case_id,
            image=f"cases/{rec.case_id}",
            label=f"labels/{rec.case_id}" if keep_label else None,
            annotation_kind="dense" if keep_label else "none",
            split="unlabeled" if demoted_here else rec.split,
        ))
    save_manifest(DatasetManifest(cases=pre_records), layout.pre_manifest())

    state.splits = {
        "labeled": [r.case_id for r in labeled if r.case_id in kept_ids],
        "unlabeled": [r.case_id for r in unlabeled] + dense_report.demoted_ids(),
        "heldout": [r.case_id for r in heldout],
    }
    state.filter_reports["dense"] = dense_report.to_dict()
    state.stats = stats.to_dict()


def _stage_filter(state: PipelineState, config: PipelineConfig, layout: _Layout):
    labeled_ids = list(state.splits["labeled"])
    if not labeled_ids:
        state.filter_reports["blurred"] = FilterReport(
            kept=[], demoted=[], thresholds={"min_dice": config.filters["min_dice"]}).to_dict()
        return

    ref_dir = config.filters.get("reference_predictions")
    if ref_dir is not None:
        preds = {cid: load_mask_bundle(os.path.join(ref_dir, cid), strict=False)
                 for cid in labeled_ids}
    else:
        handle = build_segmenter(config, layout)
        cases = [(cid, layout.pre_case(cid), layout.pre_label(cid)) for cid in labeled_ids]
        ckpts = bridge.train(handle, cases, [], config.policy.checkpoint_fractions,
                             layout.ref_job(), config=config.train_config)
        preds = bridge.predict(handle, ckpts.final,
                               [(cid, layout.pre_case(cid)) for cid in labeled_ids],
                               "masks", layout.ref_predict_job())

    triples = []
    for cid in labeled_ids:
        gt = load_mask_bundle(layout.pre_label(cid), strict=False)
        rec = CaseRecord(case_id=cid, image=f"cases/{cid}", label=f"labels/{cid}",
                         annotation_kind="dense", split="labeled")
        triples.append((rec, gt, preds[cid]))
    report = filter_blurred_boundaries(triples, threshold=config.filters["min_dice"])

    state.splits["labeled"] = [cid for cid in labeled_ids if cid in set(report.kept)]
    state.splits["unlabeled"] = list(state.splits["unlabeled"]) + report.demoted_ids()
    state.filter_reports["blurred"] = report.to_dict()


def _pseudo_cases_for_model(state: PipelineState, config: PipelineConfig,
                            layout: _Layout, index: int) -> list:
    """(case_id, image_prefix, label_prefix) triples for the student's pseudo set."""
    if index == 0:
        return []
    entry = state.round(index)
    cases = []
    for cid in entry["selected_ids"]:
        label_prefix = layout.join(entry["pseudo"][cid])
        if config.sda_enabled:
            image_prefix = layout.sda_case(index, cid)
            vol = _load_pre_image(layout, cid)
            jittered = strong_augment(vol, config.augment,
                                      derive_seed(config.seed, "sda", index, cid))
            save_volume_bundle(jittered, image_prefix)
        else:
            image_prefix = layout.pre_case(cid)
        cases.append((cid, image_prefix, label_prefix))
    return cases


def _stage_train(state: PipelineState, config: PipelineConfig, layout: _Layout, index: int):
    labeled_cases = []
    for cid in state.splits["labeled"]:
        image_prefix = layout.pre_case(cid)
        if config.sda_enabled and config.sda_on_labeled and index > 0:
            image_prefix = layout.sda_case(index, cid)
            vol = _load_pre_image(layout, cid)
            jittered = strong_augment(vol, config.augment,
                                      derive_seed(config.seed, "sda_lab", index, cid))
            save_volume_bundle(jittered, image_prefix)
        labeled_cases.append((cid, image_prefix, layout.pre_label(cid)))
    pseudo_cases = _pseudo_cases_for_model(state, config, layout, index)

    handle = build_segmenter(config, layout)
    init = None
    if index > 0 and config.train_config.get("init_from_teacher"):
        init = state.model(index - 1)["checkpoints"]["ids"][-1]
    ckpts = bridge.train(handle, labeled_cases, pseudo_cases,
                         config.policy.checkpoint_fractions, layout.model_job(index),
                         config=config.train_config, init_checkpoint=init)
    state.models.append({
        "index": index,
        "train_job": os.path.join("models", f"m{index}"),
        "checkpoints": ckpts.to_dict(),
        "pseudo_ids": [c[0] for c in pseudo_cases],
        "metrics": None,
    })


def _stage_eval(state: PipelineState, config: PipelineConfig, layout: _Layout, index: int):
    model = state.model(index)
    heldout = state.splits["heldout"]
    if not heldout:
        model["metrics"] = {"cases": {}, "summary": None}
        return
    handle = build_segmenter(config, layout)
    final = model["checkpoints"]["ids"][-1]
    preds = bridge.predict(handle, final, [(cid, layout.pre_case(cid)) for cid in heldout],
                           "masks", layout.eval_job(index))
    cases = {}
    reports = []
    for cid in heldout:
        gt = load_mask_bundle(layout.pre_label(cid), strict=False)
        report = evaluate_case(preds[cid], gt)
        cases[cid] = report.to_dict()
        reports.append(report)
    model["metrics"] = {"cases": cases, "summary": summarize(reports)}


def _stage_predict(state: PipelineState, config: PipelineConfig, layout: _Layout, r: int):
    unlabeled = state.splits["unlabeled"]
    if not unlabeled:
        return
    teacher = state.model(r - 1)
    ids = teacher["checkpoints"]["ids"]
    handle = build_segmenter(config, layout)
    cases = [(cid, layout.pre_case(cid)) for cid in unlabeled]

    for j, ckpt in enumerate(ids[:-1]):
        bridge.predict(handle, ckpt, cases, "masks", layout.predict_job(r, j))

    if config.tta_enabled:
        finals = _tta_ensemble_predict(handle, ids[-1], unlabeled, config, layout, r)
    else:
        finals = bridge.predict(handle, ids[-1], cases, "masks",
                                layout.predict_job(r, len(ids) - 1))
    for cid, mask in finals.items():
        save_mask_bundle(mask, layout.final_mask(r, cid))


def _tta_ensemble_predict(handle, checkpoint_id: str, case_ids: list,
                          config: PipelineConfig, layout: _Layout, r: int) -> dict:
    """Mean-probability ensemble over the full invertible transform group."""
    transforms = all_tta_transforms()
    sums = {}
    geometry = {}
    for ti, t in enumerate(transforms):
        job_dir = layout.tta_job(r, ti)
        in_dir = os.path.join(job_dir, "in")
        os.makedirs(in_dir, exist_ok=True)
        cases = []
        for cid in case_ids:
            vol = _load_pre_image(layout, cid)
            prefix = os.path.join(in_dir, cid)
            save_volume_bundle(tta_forward(vol, t), prefix)
            cases.append((cid, prefix))
        preds = bridge.predict(handle, checkpoint_id, cases, "probabilities", job_dir)
        for cid in case_ids:
            back = tta_inverse(preds[cid], t)
            if cid not in sums:
                sums[cid] = np.zeros(back.dims, dtype=np.float64)
                geometry[cid] = (back.dims, back.spacing)
            sums[cid] += back.data.astype(np.float64)
    out = {}
    for cid in case_ids:
        dims, spacing = geometry[cid]
        mean = sums[cid] / len(transforms)
        out[cid] = Mask3D(dims, spacing, (mean >= config.tta_threshold).astype(np.uint8))
    return out


def _stage_score(state: PipelineState, config: PipelineConfig, layout: _Layout, r: int):
    teacher = state.model(r - 1)
    n_ck = len(teacher["checkpoints"]["ids"])
    records = []
    for cid in state.splits["unlabeled"]:
        early = [load_mask_bundle(os.path.join(layout.predict_job(r, j), "out", cid))
                 for j in range(n_ck - 1)]
        final = load_mask_bundle(layout.final_mask(r, cid))
        records.append(score_case(cid, early, final, config.policy).to_dict())
    state.rounds.append({
        "index": r,
        "records": records,
        "new_ids": [],
        "selected_ids": [],
        "pseudo": {},
    })


def _stage_select(state: PipelineState, config: PipelineConfig, layout: _Layout, r: int):
    entry = state.round(r)
    records = {d["case_id"]: StabilityRecord.from_dict(d) for d in entry["records"]}
    carried = []
    if config.selection_mode == "cumulative" and r > 1:
        carried = list(state.round(r - 1)["selected_ids"])

    if config.selection_mode == "fresh":
        policy = SelectionPolicy.from_dict({**config.policy.to_dict(),
                                            "top_k": config.policy.top_k * r})
        pool = list(records.values())
    else:
        policy = config.policy
        pool = [rec for cid, rec in records.items() if cid not in carried]

    ranked = rank_and_select(pool, policy)
    new_ids = selected_ids(ranked)
    ranked_by_id = {rec.case_id: rec for rec in ranked}
    entry["records"] = [
        (ranked_by_id.get(d["case_id"]) or records[d["case_id"]]).to_dict()
        for d in entry["records"]
    ]

    def eligible(cid):
        rec = records[cid]
        return (rec.final_component_count == config.policy.required_components
                and rec.stability_score > config.policy.min_score)

    pseudo = {}
    for cid in carried:
        dst_rel = layout.pseudo_rel(r, cid)
        if eligible(cid):
            src = bundle_paths(layout.final_mask(r, cid))
        else:
            src = bundle_paths(layout.join(state.round(r - 1)["pseudo"][cid]))
        _copy_bundle(src, bundle_paths(layout.join(dst_rel)))
        pseudo[cid] = dst_rel
    for cid in new_ids:
        dst_rel = layout.pseudo_rel(r, cid)
        _copy_bundle(bundle_paths(layout.final_mask(r, cid)),
                     bundle_paths(layout.join(dst_rel)))
        pseudo[cid] = dst_rel

    selected = carried + new_ids
    stray = set(selected) - set(state.splits["unlabeled"])
    if stray:
        raise StateCorruption(f"selected ids outside the unlabeled pool: {sorted(stray)}")
    entry["new_ids"] = new_ids
    entry["selected_ids"] = selected
    entry["pseudo"] = pseudo


def _copy_bundle(src_paths, dst_paths):
    os.makedirs(os.path.dirname(str(dst_paths[0])), exist_ok=True)
    for src, dst in zip(src_paths, dst_paths):
        shutil.copyfile(str(src), str(dst))


def _stage_summary(state: PipelineState, config: PipelineConfig, layout: _Layout):
    summary, _ = report(state)
    _atomic_write_text(_as_path(layout.summary_path),
                       json.dumps(summary, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# report


def report(state: PipelineState):
    """Summary dict plus a rendered table over all evaluated models."""
    rows = []
    n_labeled = len(state.splits.get("labeled", []))
    for m in state.models:
        if m.get("metrics") is None:
            continue
        n_pseudo = len(m.get("pseudo_ids", []))
        rows.append({
            "iteration": m["index"],
            "labeled": n_labeled,
            "pseudo": n_pseudo,
            "data_size": f"{n_labeled} labeled" + (f" + {n_pseudo} pseudo" if n_pseudo else ""),
            "metrics": m["metrics"]["summary"],
        })
    if not rows:
        raise EmptyState("no evaluated models to report on")

    selection_rows = [
        {"round": r["index"], "new": len(r["new_ids"]), "total": len(r["selected_ids"])}
        for r in state.rounds if r.get("selected_ids") is not None
    ]
    summary = {
        "format_version": STATE_VERSION,
        "splits": {k: len(v) for k, v in state.splits.items()},
        "filters": {
            name: {"kept": len(rep["kept"]), "demoted": len(rep["demoted"]),
                   "reasons": sorted({e["reason"] for e in rep["demoted"]})}
            for name, rep in state.filter_reports.items()
        },
        "selection": selection_rows,
        "rows": rows,
    }

    lines = [f"{'iter':>4}  {'data size':<24}  {'DSC':<19}  {'HD95 mm':<19}"]
    for row in rows:
        met = row["metrics"]
        if met is None:
            lines.append(f"{row['iteration']:>4}  {row['data_size']:<24}  {'n/a':<19}  {'n/a':<19}")
            continue
        dsc = met["dsc"]
        hd = met["hd95_mm"]
        dsc_txt = f"{dsc['mean']:.4f} ± {dsc['std']:.4f}"
        if hd["mean"] is None:
            hd_txt = f"n/a (undefined: {hd['undefined']})"
        else:
            hd_txt = f"{hd['mean']:.4f} ± {hd['std']:.4f}"
            if hd["undefined"]:
                hd_txt += f" [{hd['undefined']} undefined]"
        lines.append(f"{row['iteration']:>4}  {row['data_size']:<24}  {dsc_txt:<19}  {hd_txt:<19}")
    return summary, "\n".join(lines)


# ---------------------------------------------------------------------------
# drivers


def _artifact_ok(name: str, state: PipelineState, layout: _Layout) -> bool:
    if name == "preprocess":
        return os.path.isfile(layout.pre_manifest()) and "dense" in state.filter_reports
    if name == "filter":
        return "blurred" in state.filter_reports
    if name == "summary":
        return os.path.isfile(layout.summary_path)
    kind, _, tail = name.partition("_")
    idx = int(tail[1:])
    if kind == "train":
        try:
            model = state.model(idx)
        except StateCorruption:
            return False
        return all(os.path.exists(c) for c in model["checkpoints"]["ids"])
    if kind == "eval":
        try:
            return state.model(idx).get("metrics") is not None
        except StateCorruption:
            return False
    if kind == "predict":
        return not state.splits["unlabeled"] or all(
            os.path.exists(bundle_paths(layout.final_mask(idx, cid))[0])
            for cid in state.splits["unlabeled"])
    if kind == "score":
        try:
            return state.round(idx)["records"] is not None
        except StateCorruption:
            return False
    if kind == "select":
        try:
            entry = state.round(idx)
        except StateCorruption:
            return False
        return all(os.path.exists(bundle_paths(layout.join(rel))[0])
                   for rel in entry["pseudo"].values())
    raise StateCorruption(f"unknown stage name {name!r}")


def _run_stage(name: str, state: PipelineState, config: PipelineConfig, layout: _Layout):
    if name == "preprocess":
        _stage_preprocess(state, config, layout)
    elif name == "filter":
        _stage_filter(state, config, layout)
    elif name == "summary":
        _stage_summary(state, config, layout)
    else:
        kind, _, tail = name.partition("_")
        idx = int(tail[1:])
        if kind == "train":
            _stage_train(state, config, layout, idx)
        elif kind == "eval":
            _stage_eval(state, config, layout, idx)
        elif kind == "predict":
            _stage_predict(state, config, layout, idx)
        elif kind == "score":
            _stage_score(state, config, layout, idx)
        elif kind == "select":
            _stage_select(state, config, layout, idx)
        else:
            raise StateCorruption(f"unknown stage name {name!r}")


def _execute(state: PipelineState, config: PipelineConfig, layout: _Layout,
             stop_after: str = None):
    names = stage_names(config.iterations)
    unknown_done = [n for n in state.stages_done if n not in names]
    if unknown_done:
        raise StateCorruption(f"state lists stages outside the plan: {unknown_done}")
    for name in names:
        if name in state.stages_done:
            if not _artifact_ok(name, state, layout):
                raise StateCorruption(f"stage {name!r} marked done but its artifacts are missing")
            continue
        _run_stage(name, state, config, layout)
        state.stages_done.append(name)
        save_state(state, layout.state_path)
        if stop_after is not None and name == stop_after:
            return state
    return state


def run_pipeline(config: PipelineConfig, stop_after: str = None) -> PipelineState:
    """Run (or continue) the pipeline under config; stop_after names the last stage to run."""
    config.validate_paths()
    layout = _Layout(config.out_root)
    os.makedirs(layout.root, exist_ok=True)
    want_hash = config_hash(config)
    if os.path.exists(layout.state_path):
        state = load_state(layout.state_path)
        if state.config_hash != want_hash:
            raise StateCorruption(
                "existing state was produced by a different config; "
                "point out_root somewhere fresh or restore the original config")
    else:
        state = PipelineState(config=config.to_dict(), config_hash=want_hash)
        save_state(state, layout.state_path)
    return _execute(state, config, layout, stop_after=stop_after)


def resume(state_path: str, stop_after: str = None) -> PipelineState:
    """Continue a pipeline from its persisted state file."""
    state = load_state(state_path)
    try:
        config = PipelineConfig.from_dict(state.config)
    except ConfigError as e:
        raise StateCorruption(f"state carries an invalid config: {e}") from e
    if config_hash(config) != state.config_hash:
        raise StateCorruption("state config hash does not match its embedded config")
    layout = _Layout(config.out_root)
    return _execute(state, config, layout, stop_after=stop_after)


def run_iteration(state: PipelineState, config: PipelineConfig) -> PipelineState:
    """Advance exactly one self-training round (predict through eval)."""
    layout = _Layout(config.out_root)
    for base in ("preprocess", "filter", "train_m0", "eval_m0"):
        if base not in state.stages_done:
            raise StateCorruption(f"cannot run a round before stage {base!r} is complete")
    r = None
    for cand in range(1, config.iterations + 1):
        if f"eval_m{cand}" not in state.stages_done:
            r = cand
            break
    if r is None:
        return state
    return _execute(state, config, layout, stop_after=f"eval_m{r}")
