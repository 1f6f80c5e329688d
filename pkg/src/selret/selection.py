"""Dataset filtering and stability-ranked pseudo-label selection.

Two filters clean the densely labeled pool before any training: labels that
split into more than two connected components are demoted (the target
structure is exactly one canal per side), and labels whose self-prediction
Dice falls below a threshold are demoted as unreliably delineated.  Demoted
cases drop their labels and rejoin the unlabeled pool.

Pseudo-label selection ranks unlabeled cases by a stability score: the mean
Dice between each early-checkpoint prediction and the final-checkpoint
prediction for the same case.  A case is eligible only when its score
strictly exceeds min_score and its final mask has exactly the required
number of connected components; the top_k eligible cases by score win, ties
broken by case_id so reruns agree.
"""

from dataclasses import dataclass, field

from .components import component_count
from .core_io import Mask3D
from .errors import GeometryMismatch, NoEarlyMasks
from .metrics import dice


@dataclass
class StabilityRecord:
    """Per-case scoring outcome carried between the scoring and selection stages."""

    case_id: str
    dice_to_final: list
    stability_score: float
    final_component_count: int
    selected: bool = False
    rank: int = None

    def __post_init__(self):
        self.dice_to_final = [float(d) for d in self.dice_to_final]
        self.stability_score = float(self.stability_score)
        if not 0.0 <= self.stability_score <= 1.0:
            raise ValueError(f"stability score {self.stability_score} outside [0,1]")
        self.final_component_count = int(self.final_component_count)
        if self.selected and self.rank is None:
            raise ValueError(f"case {self.case_id!r} selected without a rank")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "dice_to_final": list(self.dice_to_final),
            "stability_score": self.stability_score,
            "final_component_count": self.final_component_count,
            "selected": self.selected,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityRecord":
        return cls(
            case_id=d["case_id"],
            dice_to_final=d["dice_to_final"],
            stability_score=d["stability_score"],
            final_component_count=d["final_component_count"],
            selected=bool(d.get("selected", False)),
            rank=d.get("rank"),
        )


@dataclass
class SelectionPolicy:
    top_k: int = 100
    min_score: float = 0.9
    required_components: int = 2
    connectivity: int = 26
    checkpoint_fractions: list = field(default_factory=lambda: [1 / 3, 2 / 3, 1.0])

    def __post_init__(self):
        self.top_k = int(self.top_k)
        if self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        self.min_score = float(self.min_score)
        if not 0.0 <= self.min_score <= 1.0:
            raise ValueError(f"min_score must be in [0,1], got {self.min_score}")
        self.required_components = int(self.required_components)
        if self.required_components < 1:
            raise ValueError(f"required_components must be >= 1, got {self.required_components}")
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18, or 26, got {self.connectivity}")
        self.checkpoint_fractions = [float(f) for f in self.checkpoint_fractions]
        fr = self.checkpoint_fractions
        if not fr or any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] != 1.0:
            raise ValueError(f"checkpoint fractions must increase strictly and end at 1, got {fr}")
        if any(f <= 0 for f in fr):
            raise ValueError(f"checkpoint fractions must be positive, got {fr}")

    def to_dict(self) -> dict:
        return {
            "top_k": self.top_k,
            "min_score": self.min_score,
            "required_components": self.required_components,
            "connectivity": self.connectivity,
            "checkpoint_fractions": list(self.checkpoint_fractions),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionPolicy":
        return cls(**{k: d[k] for k in (
            "top_k", "min_score", "required_components", "connectivity", "checkpoint_fractions",
        ) if k in d})


@dataclass
class FilterReport:
    """Partition of a labeled set into kept and demoted cases."""

    kept: list
    demoted: list  # (case_id, reason) pairs
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        kept = set(self.kept)
        dem = {cid for cid, _ in self.demoted}
        overlap = kept & dem
        if overlap:
            raise ValueError(f"cases both kept and demoted: {sorted(overlap)}")

    def demoted_ids(self) -> list:
        return [cid for cid, _ in self.demoted]

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "demoted": [{"case_id": cid, "reason": r} for cid, r in self.demoted],
            "thresholds": dict(self.thresholds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterReport":
        return cls(
            kept=list(d["kept"]),
            demoted=[(e["case_id"], e["reason"]) for e in d["demoted"]],
            thresholds=dict(d.get("thresholds", {})),
        )


def stability_score(early_masks: list, final_mask: Mask3D) -> float:
    """Mean Dice of each early mask against the final mask (final not included)."""
    if not early_masks:
        raise NoEarlyMasks("stability score needs at least one early mask")
    for m in early_masks:
        if m.dims != final_mask.dims:
            raise GeometryMismatch(f"early mask dims {m.dims} != final dims {final_mask.dims}")
    return sum(dice(m, final_mask) for m in early_masks) / len(early_masks)


def score_case(case_id: str, early_masks: list, final_mask: Mask3D,
               policy: SelectionPolicy) -> StabilityRecord:
    """Build the full record for one case: per-checkpoint Dice plus component count."""
    if not early_masks:
        raise NoEarlyMasks(f"case {case_id!r} has no early masks")
    dices = [dice(m, final_mask) for m in early_masks]
    return StabilityRecord(
        case_id=case_id,
        dice_to_final=dices,
        stability_score=sum(dices) / len(dices),
        final_component_count=component_count(final_mask, policy.connectivity),
    )


def rank_and_select(records: list, policy: SelectionPolicy) -> list:
    """Mark the top_k eligible records selected; returns new records, input order."""
    eligible = [
        r for r in records
        if r.final_component_count == policy.required_components
        and r.stability_score > policy.min_score
    ]
    eligible.sort(key=lambda r: (-r.stability_score, r.case_id))
    winners = {r.case_id: i + 1 for i, r in enumerate(eligible[: policy.top_k])}
    out = []
    for r in records:
        rank = winners.get(r.case_id)
        out.append(StabilityRecord(
            case_id=r.case_id,
            dice_to_final=list(r.dice_to_final),
            stability_score=r.stability_score,
            final_component_count=r.final_component_count,
            selected=rank is not None,
            rank=rank,
        ))
    return out


def selected_ids(records: list) -> list:
    """Case ids of selected records, in rank order."""
    return [r.case_id for r in sorted(
        (r for r in records if r.selected), key=lambda r: r.rank)]


def filter_dense_labels(cases: list, connectivity: int = 26,
                        max_components: int = 2) -> FilterReport:
    """Demote labels whose component count exceeds max_components."""
    kept = []
    demoted = []
    for record, label in cases:
        if component_count(label, connectivity) > max_components:
            demoted.append((record.case_id, "disconnected_label"))
        else:
            kept.append(record.case_id)
    return FilterReport(kept=kept, demoted=demoted, thresholds={
        "max_components": max_components, "connectivity": connectivity,
    })


def filter_blurred_boundaries(cases: list, threshold: float = 0.85) -> FilterReport:
    """Demote cases whose prediction-vs-label Dice falls below the threshold."""
    threshold = float(threshold)
    kept = []
    demoted = []
    for record, gt, pred in cases:
        if gt.dims != pred.dims:
            raise GeometryMismatch(
                f"case {record.case_id!r}: prediction dims {pred.dims} != label dims {gt.dims}")
        if dice(pred, gt) < threshold:
            demoted.append((record.case_id, "blurred_boundary"))
        else:
            kept.append(record.case_id)
    return FilterReport(kept=kept, demoted=demoted, thresholds={"min_dice": threshold})
