"""Samples, manifests, masks and prediction maps, plus their file IO.

Manifests are JSON-lines files, one sample per line::

    {"image_path": "img/0001.png", "mask_path": "mask/0001.png",
     "label": "fake", "generator": "ldm", "split": "train"}

Paths are relative to the directory containing the manifest. Masks are
8-bit grayscale PNGs holding 0 (authentic) and 255 (manipulated).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

PathLike = Union[str, os.PathLike]

LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = {"image_path", "mask_path", "label", "generator", "split"}
REQUIRED_FIELDS = MANIFEST_FIELDS - {"mask_path"}


class ValidationError(ValueError):
    """Base class for all input validation failures."""


class ManifestNotFoundError(ValidationError):
    pass


class MalformedRecordError(ValidationError):
    pass


class MissingMaskError(ValidationError):
    pass


class MissingFileError(ValidationError):
    pass


class NonBinaryMaskError(ValidationError):
    pass


class NonZeroRealMaskError(ValidationError):
    pass


class UnreadableImageError(ValidationError):
    pass


class EmptyImageError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: Path
    label: str
    generator: str
    split: str
    mask_path: Optional[Path] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise MalformedRecordError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise MalformedRecordError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not isinstance(self.generator, str) or not self.generator:
            raise MalformedRecordError("generator tag must be a non-empty string")
        if self.label == "fake" and self.mask_path is None:
            raise MissingMaskError(f"missing mask for fake sample {self.image_path}")

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    name: str
    root: Path

    def __post_init__(self):
        ordered = tuple(sorted(self.samples, key=lambda s: str(s.image_path)))
        object.__setattr__(self, "samples", ordered)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def fakes(self) -> list[Sample]:
        return [s for s in self.samples if s.is_fake]

    def filter(self, split: Optional[str] = None, generator: Optional[str] = None) -> "DatasetManifest":
        keep = [
            s for s in self.samples
            if (split is None or s.split == split) and (generator is None or s.generator == generator)
        ]
        return DatasetManifest(tuple(keep), self.name, self.root)

    @property
    def generators(self) -> list[str]:
        return sorted({s.generator for s in self.samples})


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MaskGrid:
    """Binary mask, 1 marks a manipulated pixel."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.size == 0:
            raise EmptyImageError(f"mask must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise NonBinaryMaskError("mask values must be 0 or 1")
        object.__setattr__(self, "values", _freeze(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, MaskGrid) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class PredictionMap:
    """Per-pixel manipulation probability."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.size == 0:
            raise EmptyImageError(f"prediction must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError("prediction values must be finite probabilities in [0, 1]")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def binarize(self, threshold: float = 0.5) -> MaskGrid:
        return MaskGrid((self.values > threshold).astype(np.uint8))


# --- images -----------------------------------------------------------------

def _open(path: PathLike) -> Image.Image:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"file not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImageError(f"cannot read image {path}: {exc}") from exc
    if img.width == 0 or img.height == 0:
        raise EmptyImageError(f"zero-area image: {path}")
    return img


def load_rgb(path: PathLike) -> np.ndarray:
    """Load an image as an H x W x 3 uint8 array."""
    return np.asarray(_open(path).convert("RGB"))


def save_rgb(image: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)
    return path


# --- masks ------------------------------------------------------------------

def nearest_resize(values: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize picking source index floor(i * src / dst)."""
    h, w = values.shape[:2]
    th, tw = target_size
    if th <= 0 or tw <= 0:
        raise EmptyImageError(f"target size must be positive, got {target_size}")
    if (th, tw) == (h, w):
        return values
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return values[rows[:, None], cols[None, :]]


def _mask_values(raw: np.ndarray, binarize: bool, path) -> np.ndarray:
    if binarize:
        return (raw >= 128).astype(np.uint8)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        found = sorted(set(np.unique(raw[bad]).tolist()))[:5]
        raise NonBinaryMaskError(f"non-binary mask {path}: unexpected values {found}")
    return (raw == 255).astype(np.uint8)


def load_mask(
    path: PathLike,
    target_size: Optional[tuple[int, int]] = None,
    resize_rule: str = "nearest",
    binarize: bool = False,
) -> MaskGrid:
    """Read a 0/255 grayscale mask, optionally resized to ``target_size`` (H, W).

    Only nearest-neighbour resizing is allowed so the grid stays binary.
    With ``binarize`` set, values >= 128 count as manipulated instead of
    rejecting anything outside {0, 255}.
    """
    if resize_rule != "nearest":
        raise ValidationError(f"masks may only be resized with 'nearest', got {resize_rule!r}")
    img = _open(path)
    raw = np.asarray(img.convert("L"))
    values = _mask_values(raw, binarize, path)
    if target_size is not None:
        values = nearest_resize(values, tuple(target_size))
    return MaskGrid(values)


def save_mask(mask: MaskGrid, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(path)
    return path


def save_prediction(pred: PredictionMap, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(pred.values.astype(np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(path)
    return path


def load_prediction(path: PathLike) -> PredictionMap:
    raw = np.asarray(_open(path).convert("L"), dtype=np.float32)
    return PredictionMap(raw / 255.0)


def zero_mask(shape: tuple[int, int]) -> MaskGrid:
    return MaskGrid(np.zeros(shape, dtype=np.uint8))


def sample_mask(sample: Sample, target_size: Optional[tuple[int, int]] = None, binarize: bool = False) -> MaskGrid:
    """Ground truth for a sample; real samples without a mask get an all-zero grid."""
    if sample.mask_path is not None:
        return load_mask(sample.mask_path, target_size, binarize=binarize)
    if target_size is None:
        img = _open(sample.image_path)
        target_size = (img.height, img.width)
    return zero_mask(tuple(target_size))


# --- manifests --------------------------------------------------------------

def _parse_record(line: str, lineno: int, root: Path) -> Sample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise MalformedRecordError(f"line {lineno}: record must be a JSON object")
    keys = set(rec)
    if not REQUIRED_FIELDS <= keys or not keys <= MANIFEST_FIELDS:
        raise MalformedRecordError(
            f"line {lineno}: fields must be {sorted(MANIFEST_FIELDS)} (mask_path optional), got {sorted(keys)}"
        )
    for key in REQUIRED_FIELDS:
        if not isinstance(rec[key], str):
            raise MalformedRecordError(f"line {lineno}: field {key!r} must be a string")
    mask = rec.get("mask_path")
    if mask is not None and not isinstance(mask, str):
        raise MalformedRecordError(f"line {lineno}: field 'mask_path' must be a string or null")
    try:
        return Sample(
            image_path=Path(os.path.normpath(root / rec["image_path"])),
            mask_path=Path(os.path.normpath(root / mask)) if mask else None,
            label=rec["label"],
            generator=rec["generator"],
            split=rec["split"],
        )
    except MissingMaskError as exc:
        raise MissingMaskError(f"line {lineno}: missing mask for fake sample {rec['image_path']}") from exc
    except ValidationError as exc:
        raise MalformedRecordError(f"line {lineno}: {exc}") from exc


def validate_sample(sample: Sample, binarize: bool = False, check_masks: bool = True) -> None:
    if not sample.image_path.is_file():
        raise MissingFileError(f"image not found: {sample.image_path}")
    if sample.mask_path is None:
        return
    if not sample.mask_path.is_file():
        raise MissingFileError(f"mask not found: {sample.mask_path}")
    if check_masks:
        mask = load_mask(sample.mask_path, binarize=binarize)
        if not sample.is_fake and mask.values.any():
            raise NonZeroRealMaskError(f"real sample has a non-zero mask: {sample.mask_path}")


def load_manifest(
    path: PathLike,
    binarize: bool = False,
    check_masks: bool = True,
    name: Optional[str] = None,
) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Every referenced file must exist; with ``check_masks`` each mask is also
    read to verify it is binary (and all-zero for real samples).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    root = path.resolve().parent
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            sample = _parse_record(line, lineno, root)
            validate_sample(sample, binarize=binarize, check_masks=check_masks)
            samples.append(sample)
    return DatasetManifest(tuple(samples), name or path.stem, root)


def sample_record(sample: Sample, root: Path) -> dict:
    rec = {
        "image_path": Path(os.path.relpath(sample.image_path, root)).as_posix(),
        "label": sample.label,
        "generator": sample.generator,
        "split": sample.split,
    }
    if sample.mask_path is not None:
        rec["mask_path"] = Path(os.path.relpath(sample.mask_path, root)).as_posix()
    return rec


def write_manifest(samples: Iterable[Sample], path: PathLike) -> Path:
    """Write samples as JSON-lines with paths relative to the manifest's directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.resolve().parent
    ordered = sorted(samples, key=lambda s: str(s.image_path))
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for s in ordered:
            fh.write(json.dumps(sample_record(s, root), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def make_manifest(samples: Sequence[Sample], name: str, root: PathLike) -> DatasetManifest:
    return DatasetManifest(tuple(samples), name, Path(root))
