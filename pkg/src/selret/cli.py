"""Command-line surface.

Every command logs progress to stderr and prints one JSON document to
stdout.  Exit codes: 0 success, 2 bad configuration or input, 3 segmenter
failure, 4 corrupted pipeline state.
"""

import argparse
import json
import logging
import sys

from . import bridge
from .augment import all_tta_transforms, ensemble, tta_forward, tta_inverse
from .components import label_components
from .components import component_count
from .core_io import (load_manifest, load_mask_bundle, load_volume_bundle,
                      resolve_ref, save_mask_bundle, save_volume_bundle)
from .errors import (ConfigError, EmptyTrainingSet, LaunchFailure,
                     MissingGroundTruth, ProtocolViolation, SelretError,
                     StateCorruption, TrainerFailure, UnknownCheckpoint)
from .metrics import dice, evaluate_case, summarize
from .phantom import PhantomSpec, gen_dataset
from .pipeline import PipelineConfig, load_state, report, resume, run_pipeline
from .preprocess import (IntensityStats, compute_foreground_stats,
                         resample_mask, resample_volume, znormalize)
from .selection import (SelectionPolicy, StabilityRecord,
                        filter_blurred_boundaries, filter_dense_labels,
                        rank_and_select, stability_score)

log = logging.getLogger("selret")

_SEGMENTER_ERRORS = (LaunchFailure, TrainerFailure, ProtocolViolation,
                     UnknownCheckpoint, MissingGroundTruth, EmptyTrainingSet)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read JSON from {path}: {e}") from e


def _handle_from_spec(seg: dict, workdir: str) -> bridge.SegmenterHandle:
    if not isinstance(seg, dict):
        raise ConfigError("segmenter spec must be a JSON object")
    kind = seg.get("kind")
    try:
        if kind == "mock_threshold":
            return bridge.mock_threshold_segmenter(
                workdir, connectivity=seg.get("connectivity", 26), keep_k=seg.get("keep_k", 2))
        if kind == "mock_noisy_oracle":
            return bridge.mock_noisy_oracle(
                workdir, gt_dir=seg["gt_dir"], schedule=seg["schedule"],
                seed=seg.get("seed", 0),
                improvement_factor=seg.get("improvement_factor", 0.0),
                drop_scale=seg.get("drop_scale", 1.0),
                connectivity=seg.get("connectivity", 26))
        if kind == "external":
            return bridge.SegmenterHandle(workdir=workdir, exec_spec=list(seg["exec_spec"]))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad segmenter spec: {e}") from e
    raise ConfigError(f"unknown segmenter kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_resample(args) -> None:
    spacing = tuple(args.spacing)
    if args.mask:
        out = resample_mask(load_mask_bundle(args.input), spacing)
        save_mask_bundle(out, args.output)
    else:
        out = resample_volume(load_volume_bundle(args.input), spacing)
        save_volume_bundle(out, args.output)
    _emit({"dims": list(out.dims), "spacing_mm": list(out.spacing), "out": args.output})


def _cmd_normalize(args) -> None:
    if args.stats:
        stats = IntensityStats.from_dict(_read_json(args.stats))
    elif args.mean is not None and args.std is not None:
        stats = IntensityStats(mean=args.mean, std=args.std, voxel_count=1)
    else:
        raise ConfigError("normalize needs --stats FILE or both --mean and --std")
    out = znormalize(load_volume_bundle(args.input), stats)
    save_volume_bundle(out, args.output)
    _emit({"out": args.output, "mean": stats.mean, "std": stats.std})


def _cmd_fg_stats(args) -> None:
    manifest = load_manifest(args.manifest)
    labeled = manifest.by_split("labeled")
    if not labeled:
        raise ConfigError("manifest has no labeled cases")

    def pairs():
        for rec in labeled:
            log.info("accumulating %s", rec.case_id)
            yield (load_volume_bundle(resolve_ref(args.manifest, rec.image)),
                   load_mask_bundle(resolve_ref(args.manifest, rec.label), strict=False))

    stats = compute_foreground_stats(pairs())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(stats.to_dict(), f, indent=2, sort_keys=True)
    _emit(stats.to_dict())


def _cmd_components(args) -> None:
    labeling = label_components(load_mask_bundle(args.input), args.connectivity)
    _emit({"count": labeling.count, "sizes": list(labeling.sizes),
           "connectivity": args.connectivity})


def _cmd_evaluate(args) -> None:
    if args.manifest:
        if not args.pred_dir:
            raise ConfigError("--manifest evaluation needs --pred-dir")
        manifest = load_manifest(args.manifest)
        cases = [c for c in manifest.cases if c.split == args.split and c.label]
        if not cases:
            raise ConfigError(f"no labeled cases in split {args.split!r}")
        reports = {}
        rows = []
        for rec in cases:
            gt = load_mask_bundle(resolve_ref(args.manifest, rec.label), strict=False)
            pred = load_mask_bundle(f"{args.pred_dir}/{rec.case_id}", strict=False)
            rep = evaluate_case(pred, gt)
            reports[rec.case_id] = rep.to_dict()
            rows.append(rep)
        _emit({"cases": reports, "summary": summarize(rows)})
        return
    if not (args.pred and args.gt):
        raise ConfigError("evaluate needs --pred and --gt, or --manifest with --pred-dir")
    rep = evaluate_case(load_mask_bundle(args.pred, strict=False),
                        load_mask_bundle(args.gt, strict=False))
    _emit(rep.to_dict())


def _cmd_tta_predict(args) -> None:
    import os

    import numpy as np

    from .core_io import Mask3D

    handle = _handle_from_spec(_read_json(args.segmenter), args.workdir)
    vol = load_volume_bundle(args.image)
    case_id = args.case_id
    transforms = all_tta_transforms()
    maps = []
    for ti, t in enumerate(transforms):
        job_dir = os.path.join(args.workdir, "tta", f"t{ti}")
        prefix = os.path.join(job_dir, "in", case_id)
        os.makedirs(os.path.dirname(prefix), exist_ok=True)
        save_volume_bundle(tta_forward(vol, t), prefix)
        preds = bridge.predict(handle, args.checkpoint, [(case_id, prefix)],
                               "probabilities", job_dir)
        maps.append(tta_inverse(preds[case_id], t))
        log.info("transform %d/%d done", ti + 1, len(transforms))
    mask = ensemble(maps, args.threshold)
    save_mask_bundle(mask, args.output)
    _emit({"out": args.output, "transforms": len(transforms),
           "threshold": args.threshold,
           "foreground_voxels": int(np.count_nonzero(mask.data))})


def _cmd_score_stability(args) -> None:
    final = load_mask_bundle(args.final)
    early = [load_mask_bundle(p) for p in args.early]
    record = StabilityRecord(
        case_id=args.case_id,
        dice_to_final=[dice(m, final) for m in early],
        stability_score=stability_score(early, final),
        final_component_count=component_count(final, args.connectivity),
    )
    _emit(record.to_dict())


def _cmd_select(args) -> None:
    doc = _read_json(args.records)
    if not isinstance(doc, list):
        raise ConfigError("records file must be a JSON list of stability records")
    try:
        records = [StabilityRecord.from_dict(d) for d in doc]
        policy = SelectionPolicy(
            top_k=args.top_k, min_score=args.min_score,
            required_components=args.required_components,
            connectivity=args.connectivity)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad records or policy: {e}") from e
    ranked = rank_and_select(records, policy)
    _emit({
        "records": [r.to_dict() for r in ranked],
        "selected": [r.case_id for r in sorted(
            (r for r in ranked if r.selected), key=lambda r: r.rank)],
        "policy": policy.to_dict(),
    })


def _cmd_filter_dataset(args) -> None:
    manifest = load_manifest(args.manifest)
    labeled = manifest.by_split("labeled")
    pairs = [(rec, load_mask_bundle(resolve_ref(args.manifest, rec.label), strict=False))
             for rec in labeled]
    dense = filter_dense_labels(pairs, connectivity=args.connectivity,
                                max_components=args.max_components)
    result = {"dense": dense.to_dict()}
    kept = set(dense.kept)
    if args.predictions:
        triples = []
        for rec, gt in pairs:
            if rec.case_id not in kept:
                continue
            pred = load_mask_bundle(f"{args.predictions}/{rec.case_id}", strict=False)
            triples.append((rec, gt, pred))
        blurred = filter_blurred_boundaries(triples, threshold=args.min_dice)
        kept = set(blurred.kept)
        result["blurred"] = blurred.to_dict()
    n_unlabeled = len(manifest.by_split("unlabeled")) + (len(labeled) - len(kept))
    result["counts"] = {"labeled": len(kept), "unlabeled": n_unlabeled}
    _emit(result)


def _cmd_gen_synth(args) -> None:
    spec_doc = _read_json(args.spec) if args.spec else {}
    try:
        template = PhantomSpec.from_dict(spec_doc.get("template", {}))
        if args.dims:
            template = PhantomSpec.from_dict({**template.to_dict(), "dims": args.dims})

        def pick(flag, key, default):
            return flag if flag is not None else spec_doc.get(key, default)

        manifest, manifest_path = gen_dataset(
            args.out, template,
            labeled=pick(args.labeled, "labeled", 0),
            unlabeled=pick(args.unlabeled, "unlabeled", 0),
            heldout=pick(args.heldout, "heldout", 0),
            n_disconnected=pick(args.disconnected, "disconnected", 0),
            n_blurred=pick(args.blurred, "blurred", 0),
            seed=pick(args.seed, "seed", 0),
            blur_length_frac=spec_doc.get("blur_length_frac", 0.35),
            blur_strength=spec_doc.get("blur_strength", 0.9))
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"bad phantom spec: {e}") from e
    _emit({
        "manifest": str(manifest_path),
        "cases": len(manifest.cases),
        "splits": {s: len(manifest.by_split(s)) for s in ("labeled", "unlabeled", "heldout")},
    })


def _cmd_run(args) -> None:
    config = PipelineConfig.from_dict(_read_json(args.config))
    state = run_pipeline(config, stop_after=args.stop_after)
    _finish_run(state)


def _cmd_resume(args) -> None:
    state = resume(args.state, stop_after=args.stop_after)
    _finish_run(state)


def _finish_run(state) -> None:
    if "summary" in state.stages_done:
        summary, table = report(state)
        log.info("results:\n%s", table)
        _emit(summary)
    else:
        _emit({"stages_done": list(state.stages_done)})


def _cmd_report(args) -> None:
    summary, table = report(load_state(args.state))
    log.info("results:\n%s", table)
    _emit(summary)


def _cmd_conformance(args) -> None:
    handle = _handle_from_spec(_read_json(args.segmenter), args.workdir)
    result = bridge.run_conformance(handle, args.manifest, args.workdir)
    _emit(result)


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selret",
        description="Connectivity-constrained selective self-training for 3D segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("resample", help="resample a bundle to a target spacing")
    p.add_argument("--in", dest="input", required=True, help="input bundle prefix")
    p.add_argument("--out", dest="output", required=True, help="output bundle prefix")
    p.add_argument("--spacing", nargs=3, type=float, required=True, metavar=("SX", "SY", "SZ"))
    p.add_argument("--mask", action="store_true", help="treat the bundle as a binary mask")
    p.set_defaults(func=_cmd_resample)

    p = sub.add_parser("normalize", help="z-score normalize a volume")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--stats", help="JSON file from fg-stats")
    p.add_argument("--mean", type=float)
    p.add_argument("--std", type=float)
    p.set_defaults(func=_cmd_normalize)

    p = sub.add_parser("fg-stats", help="pooled foreground intensity statistics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="also write the stats JSON here")
    p.set_defaults(func=_cmd_fg_stats)

    p = sub.add_parser("components", help="connected components of a mask bundle")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=_cmd_components)

    p = sub.add_parser("evaluate", help="Dice / HD95 for predictions")
    p.add_argument("--pred", help="prediction bundle prefix")
    p.add_argument("--gt", help="reference bundle prefix")
    p.add_argument("--manifest", help="evaluate a whole split instead")
    p.add_argument("--pred-dir", help="directory of <case_id> bundles")
    p.add_argument("--split", default="heldout")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("tta-predict", help="ensemble predictions over all invertible transforms")
    p.add_argument("--image", required=True, help="input volume bundle prefix")
    p.add_argument("--out", dest="output", required=True, help="output mask bundle prefix")
    p.add_argument("--segmenter", required=True, help="segmenter spec JSON file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--case-id", default="case")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_tta_predict)

    p = sub.add_parser("score-stability", help="stability score of early vs final masks")
    p.add_argument("--final", required=True)
    p.add_argument("--early", nargs="+", required=True)
    p.add_argument("--case-id", default="case")
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=_cmd_score_stability)

    p = sub.add_parser("select", help="rank stability records and mark selections")
    p.add_argument("--records", required=True, help="JSON list of stability records")
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--min-score", type=float, default=0.9)
    p.add_argument("--required-components", type=int, default=2)
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("filter-dataset", help="demote disconnected / low-Dice labeled cases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    p.add_argument("--max-components", type=int, default=2)
    p.add_argument("--predictions", help="reference prediction bundles, one per case id")
    p.add_argument("--min-dice", type=float, default=0.85)
    p.set_defaults(func=_cmd_filter_dataset)

    p = sub.add_parser("gen-synth", help="generate a synthetic two-tube dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file: {template:{...}, labeled:N, ...}")
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    p.add_argument("--heldout", type=int)
    p.add_argument("--disconnected", type=int)
    p.add_argument("--blurred", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", nargs=3, type=int, metavar=("NX", "NY", "NZ"))
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("run", help="run the full self-training pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON file")
    p.add_argument("--stop-after", help="stage name to stop after (for staged runs)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("resume", help="continue a pipeline from its state file")
    p.add_argument("--state", required=True)
    p.add_argument("--stop-after")
    p.set_defaults(func=_cmd_resume)

    p = sub.add_parser("report", help="summary table from a pipeline state file")
    p.add_argument("--state", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("conformance", help="run the segmenter protocol conformance suite")
    p.add_argument("--manifest", required=True)
    p.add_argument("--segmenter", required=True, help="segmenter spec JSON file")
    p.add_argument("--workdir", required=True)
    p.set_defaults(func=_cmd_conformance)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except StateCorruption as e:
        log.error("state corruption: %s", e)
        return 4
    except _SEGMENTER_ERRORS as e:
        log.error("segmenter failure: %s", e)
        return 3
    except (ConfigError, SelretError, ValueError) as e:
        log.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
