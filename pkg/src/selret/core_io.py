"""Geometric data model and the on-disk volume bundle / manifest formats.

A volume bundle is a pair of files sharing a path prefix: ``<name>.json``
(header) and ``<name>.raw`` (payload).  The payload is contiguous
little-endian with x varying fastest, i.e. flat index = x + nx*(y + ny*z).
In memory that corresponds to a Fortran-ordered array of shape
(nx, ny, nz), so ``data[x, y, z]`` indexes naturally.

Header fields (all required)::

    {"format": "volb1", "dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz],
     "dtype": "f32" | "u8", "order": "x-fastest"}

There is deliberately no default spacing and no orientation matrix: spacing
is the only geometry the toolkit consumes, and a missing header should fail
loudly rather than silently default to 1 mm.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateCaseId,
    InconsistentAnnotation,
    IoFailure,
    MalformedHeader,
    MissingHeader,
    NonBinaryLabel,
    NonFiniteData,
    SizeMismatch,
)

FORMAT_NAME = "volb1"
MANIFEST_VERSION = 1

ANNOTATION_KINDS = ("dense", "none")
SPLITS = ("labeled", "unlabeled", "heldout")


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise MalformedHeader(f"dims must be 3 positive integers, got {dims!r}")
    if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise MalformedHeader(f"spacing must be 3 positive finite floats, got {spacing!r}")


@dataclass
class Volume3D:
    """Scalar 3D image grid with per-axis physical spacing in mm.

    ``data`` is float32 with shape ``dims`` = (nx, ny, nz); index order is
    data[x, y, z].
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.dims, self.spacing)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.dims:
            raise SizeMismatch(f"data shape {self.data.shape} != dims {self.dims}")
        if not np.isfinite(self.data).all():
            raise NonFiniteData("volume contains non-finite values")

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass
class Mask3D:
    """Binary 3D label grid sharing Volume3D geometry; values are 0/1 uint8."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_geometry(self.dims, self.spacing)
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.shape != self.dims:
            raise SizeMismatch(f"data shape {self.data.shape} != dims {self.dims}")
        if self.data.max(initial=0) > 1:
            raise NonBinaryLabel("mask values must be 0 or 1")

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def foreground_count(self) -> int:
        return int(self.data.sum())

    def same_geometry(self, other) -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass
class CaseRecord:
    """One dataset entry. ``image`` and ``label`` are bundle path prefixes."""

    case_id: str
    image: str
    label: str | None = None
    annotation_kind: str = "none"
    split: str = "unlabeled"

    def __post_init__(self):
        if not self.case_id:
            raise MalformedHeader("case_id must be a nonempty string")
        if self.annotation_kind not in ANNOTATION_KINDS:
            raise MalformedHeader(f"bad annotation_kind {self.annotation_kind!r}")
        if self.split not in SPLITS:
            raise MalformedHeader(f"bad split {self.split!r}")
        has_label = self.label is not None
        if (self.annotation_kind == "dense") != has_label:
            raise InconsistentAnnotation(
                f"case {self.case_id}: annotation_kind={self.annotation_kind} "
                f"but label {'present' if has_label else 'absent'}"
            )
        if self.split == "labeled" and self.annotation_kind != "dense":
            raise InconsistentAnnotation(
                f"case {self.case_id}: labeled split requires a dense annotation"
            )


@dataclass
class DatasetManifest:
    cases: list[CaseRecord] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for c in self.cases:
            if c.case_id in seen:
                raise DuplicateCaseId(f"duplicate case_id {c.case_id!r}")
            seen.add(c.case_id)

    def by_split(self, split: str) -> list[CaseRecord]:
        return [c for c in self.cases if c.split == split]

    def case(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


# ---------------------------------------------------------------------------
# bundle I/O


def bundle_paths(prefix) -> tuple[Path, Path]:
    """Header and raw paths for a bundle prefix (no extension)."""
    prefix = Path(prefix)
    return prefix.with_suffix(prefix.suffix + ".json"), prefix.with_suffix(prefix.suffix + ".raw")


def _read_header(header_path, expect_dtype: str):
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingHeader(f"no header file at {header_path}")
    try:
        with open(header_path) as f:
            hdr = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"{header_path}: {e}") from e
    if not isinstance(hdr, dict):
        raise MalformedHeader(f"{header_path}: header is not a JSON object")
    for key in ("format", "dims", "spacing_mm", "dtype", "order"):
        if key not in hdr:
            raise MalformedHeader(f"{header_path}: missing field {key!r}")
    if hdr["format"] != FORMAT_NAME:
        raise MalformedHeader(f"{header_path}: format {hdr['format']!r} != {FORMAT_NAME!r}")
    if hdr["order"] != "x-fastest":
        raise MalformedHeader(f"{header_path}: unsupported order {hdr['order']!r}")
    if hdr["dtype"] != expect_dtype:
        raise MalformedHeader(f"{header_path}: dtype {hdr['dtype']!r}, expected {expect_dtype!r}")
    dims = hdr["dims"]
    spacing = hdr["spacing_mm"]
    try:
        dims = tuple(int(d) for d in dims)
        spacing = tuple(float(s) for s in spacing)
    except (TypeError, ValueError) as e:
        raise MalformedHeader(f"{header_path}: bad dims/spacing") from e
    _check_geometry(dims, spacing)
    return dims, spacing


def _read_raw(raw_path, dims, itemsize: int) -> bytes:
    raw_path = Path(raw_path)
    nx, ny, nz = dims
    expected = nx * ny * nz * itemsize
    try:
        payload = raw_path.read_bytes()
    except OSError as e:
        raise SizeMismatch(f"cannot read raw payload {raw_path}: {e}") from e
    if len(payload) != expected:
        raise SizeMismatch(
            f"{raw_path}: raw length {len(payload)} != expected {expected} for dims {dims}"
        )
    return payload


def load_volume(header_path, raw_path) -> Volume3D:
    """Load a float32 bundle. Bytes are decoded exactly; no scaling."""
    dims, spacing = _read_header(header_path, "f32")
    payload = _read_raw(raw_path, dims, 4)
    flat = np.frombuffer(payload, dtype="<f4")
    data = flat.reshape(dims, order="F")
    if not np.isfinite(data).all():
        raise NonFiniteData(f"{raw_path}: payload contains non-finite values")
    return Volume3D(dims, spacing, data)


def save_volume(vol: Volume3D, header_path, raw_path) -> None:
    header = {
        "format": FORMAT_NAME,
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "dtype": "f32",
        "order": "x-fastest",
    }
    try:
        _atomic_write_bytes(Path(raw_path), vol.data.astype("<f4", copy=False).tobytes(order="F"))
        _atomic_write_text(Path(header_path), json.dumps(header))
    except OSError as e:
        raise IoFailure(f"cannot write bundle {header_path}: {e}") from e


def load_mask(header_path, raw_path, strict: bool = True) -> tuple[Mask3D, int]:
    """Load a u8 bundle as a binary mask.

    Strict mode requires every value to already be 0 or 1.  Lenient mode
    coerces any nonzero value to 1; the second return value is the number of
    coerced voxels (always 0 in strict mode).
    """
    dims, spacing = _read_header(header_path, "u8")
    payload = _read_raw(raw_path, dims, 1)
    flat = np.frombuffer(payload, dtype=np.uint8)
    data = flat.reshape(dims, order="F")
    coerced = 0
    if data.max(initial=0) > 1:
        if strict:
            raise NonBinaryLabel(f"{raw_path}: values outside {{0,1}} in strict mode")
        coerced = int((data > 1).sum())
        data = (data != 0).astype(np.uint8)
    return Mask3D(dims, spacing, data), coerced


def save_mask(mask: Mask3D, header_path, raw_path) -> None:
    header = {
        "format": FORMAT_NAME,
        "dims": list(mask.dims),
        "spacing_mm": list(mask.spacing),
        "dtype": "u8",
        "order": "x-fastest",
    }
    try:
        _atomic_write_bytes(Path(raw_path), mask.data.tobytes(order="F"))
        _atomic_write_text(Path(header_path), json.dumps(header))
    except OSError as e:
        raise IoFailure(f"cannot write bundle {header_path}: {e}") from e


def load_bundle_header(prefix) -> dict:
    """Return the parsed header of a bundle without touching the payload."""
    header_path, _ = bundle_paths(prefix)
    if not Path(header_path).is_file():
        raise MissingHeader(f"no header file at {header_path}")
    try:
        with open(header_path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"{header_path}: {e}") from e


def load_volume_bundle(prefix) -> Volume3D:
    return load_volume(*bundle_paths(prefix))


def save_volume_bundle(vol: Volume3D, prefix) -> None:
    save_volume(vol, *bundle_paths(prefix))


def load_mask_bundle(prefix, strict: bool = True) -> Mask3D:
    mask, _ = load_mask(*bundle_paths(prefix), strict=strict)
    return mask


def save_mask_bundle(mask: Mask3D, prefix) -> None:
    save_mask(mask, *bundle_paths(prefix))


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingHeader(f"no manifest at {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"{path}: {e}") from e
    if not isinstance(doc, dict) or "cases" not in doc:
        raise MalformedHeader(f"{path}: manifest must be an object with 'cases'")
    if doc.get("format_version") != MANIFEST_VERSION:
        raise MalformedHeader(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    cases = []
    for entry in doc["cases"]:
        try:
            cases.append(
                CaseRecord(
                    case_id=entry["case_id"],
                    image=entry["image"],
                    label=entry.get("label"),
                    annotation_kind=entry["annotation_kind"],
                    split=entry["split"],
                )
            )
        except KeyError as e:
            raise MalformedHeader(f"{path}: case entry missing {e}") from e
    return DatasetManifest(cases=cases, format_version=doc["format_version"])


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "format_version": manifest.format_version,
        "cases": [
            {
                "case_id": c.case_id,
                "image": c.image,
                **({"label": c.label} if c.label is not None else {}),
                "annotation_kind": c.annotation_kind,
                "split": c.split,
            }
            for c in manifest.cases
        ],
    }
    try:
        _atomic_write_text(Path(path), json.dumps(doc, indent=2))
    except OSError as e:
        raise IoFailure(f"cannot write manifest {path}: {e}") from e


def resolve_ref(manifest_path, ref: str) -> Path:
    """Resolve a bundle prefix from a manifest relative to the manifest's directory."""
    ref_path = Path(ref)
    if ref_path.is_absolute():
        return ref_path
    return Path(manifest_path).parent / ref_path


# ---------------------------------------------------------------------------
# atomic writes (shared by pipeline state as well)


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())
