"""Connectivity-constrained selective self-training for 3D tubular segmentation."""

__version__ = "0.1.0"

from .augment import (IDENTITY_TRANSFORM, AugmentSpec, ProbabilityMap,
                      StrongSpec, TtaTransform, WeakSpec, all_tta_transforms,
                      ensemble, strong_augment, tta_forward, tta_inverse,
                      weak_augment)
from .bridge import (CheckpointSet, SegmenterHandle, handshake,
                     mock_noisy_oracle, mock_threshold_segmenter, predict,
                     run_conformance, train)
from .components import (ComponentLabeling, component_count, keep_largest_k,
                         label_components)
from .core_io import (CaseRecord, DatasetManifest, Mask3D, Volume3D,
                      bundle_paths, load_bundle_header, load_manifest,
                      load_mask_bundle, load_volume_bundle, resolve_ref,
                      save_manifest, save_mask_bundle, save_volume_bundle)
from .errors import SelretError
from .metrics import (MetricsReport, boundary_voxels, dice, evaluate_case,
                      hd95, summarize, surface_distances)
from .phantom import PhantomSpec, gen_dataset, gen_phantom
from .pipeline import (PipelineConfig, PipelineState, load_state, report,
                       resume, run_iteration, run_pipeline, save_state)
from .preprocess import (IntensityStats, compute_foreground_stats,
                         resample_mask, resample_volume, target_dims,
                         znormalize)
from .rand import derive_rng, derive_seed
from .selection import (FilterReport, SelectionPolicy, StabilityRecord,
                        filter_blurred_boundaries, filter_dense_labels,
                        rank_and_select, score_case, selected_ids,
                        stability_score)

__all__ = [
    "AugmentSpec", "CaseRecord", "CheckpointSet", "ComponentLabeling",
    "DatasetManifest", "FilterReport", "IDENTITY_TRANSFORM", "IntensityStats",
    "Mask3D", "MetricsReport", "PhantomSpec", "PipelineConfig",
    "PipelineState", "ProbabilityMap", "SegmenterHandle", "SelectionPolicy",
    "SelretError", "StabilityRecord", "StrongSpec", "TtaTransform",
    "Volume3D", "WeakSpec", "all_tta_transforms", "boundary_voxels",
    "bundle_paths", "component_count", "compute_foreground_stats",
    "derive_rng", "derive_seed", "dice", "ensemble", "evaluate_case",
    "filter_blurred_boundaries", "filter_dense_labels", "gen_dataset",
    "gen_phantom", "handshake", "hd95", "keep_largest_k", "label_components",
    "load_bundle_header", "load_manifest", "load_mask_bundle", "load_state",
    "load_volume_bundle", "mock_noisy_oracle", "mock_threshold_segmenter",
    "predict", "rank_and_select", "report", "resample_mask",
    "resample_volume", "resolve_ref", "resume", "run_conformance",
    "run_iteration", "run_pipeline", "save_manifest", "save_mask_bundle",
    "save_state", "save_volume_bundle", "score_case", "selected_ids",
    "stability_score", "strong_augment", "summarize", "surface_distances",
    "target_dims", "train", "tta_forward", "tta_inverse", "weak_augment",
    "znormalize",
]
