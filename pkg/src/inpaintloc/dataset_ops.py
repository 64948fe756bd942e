"""Dataset constructions: mask compositing, low-level augmentations and
building an inpainted general-domain set through an external inpainter.

Compositing is exact 8-bit replacement (no feathering): ``inside`` pixels
where the mask is 1, ``outside`` pixels elsewhere. With ``inside`` an LDM
output and ``outside`` the real photo this removes the generator's
background fingerprint ("LDM/clean"); with ``inside`` the real photo
re-encoded by LDM under an empty mask it confines the fingerprint to the
masked region ("LDM/real").
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import subprocess
import tempfile
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageEnhance
from scipy import ndimage

from .data import (
    DatasetManifest,
    DimensionMismatchError,
    MaskGrid,
    PathLike,
    Sample,
    ValidationError,
    load_manifest,
    load_mask,
    load_rgb,
    save_mask,
    save_rgb,
    write_manifest,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


class UnmatchedTripleError(ValidationError):
    pass


class InpainterError(RuntimeError):
    pass


# --- compositing ------------------------------------------------------------

def composite_arrays(inside: np.ndarray, outside: np.ndarray, mask) -> np.ndarray:
    m = mask.values if isinstance(mask, MaskGrid) else np.asarray(mask)
    inside, outside = np.asarray(inside), np.asarray(outside)
    if inside.shape != outside.shape or inside.shape[:2] != m.shape:
        raise DimensionMismatchError(
            f"inside {inside.shape}, outside {outside.shape} and mask {m.shape} must share dimensions"
        )
    return np.where(m.astype(bool)[..., None], inside, outside).astype(np.uint8)


@dataclass(frozen=True)
class CompositeJob:
    inside_source: Path
    outside_source: Path
    mask: Union[MaskGrid, Path]
    output_path: Path


def composite(job: CompositeJob, binarize: bool = False) -> Path:
    mask = job.mask if isinstance(job.mask, MaskGrid) else load_mask(job.mask, binarize=binarize)
    out = composite_arrays(load_rgb(job.inside_source), load_rgb(job.outside_source), mask)
    return save_rgb(out, job.output_path)


def background_exact(output: PathLike, outside: PathLike, mask) -> bool:
    """True when every mask=0 pixel of ``output`` equals ``outside`` byte for byte."""
    m = mask if isinstance(mask, MaskGrid) else load_mask(mask)
    bg = ~m.values.astype(bool)
    return bool(np.array_equal(load_rgb(output)[bg], load_rgb(outside)[bg]))


def _index_dir(d: PathLike) -> dict[str, Path]:
    d = Path(d)
    if not d.is_dir():
        raise ValidationError(f"not a directory: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def match_triples(*dirs: PathLike) -> list[tuple[str, list[Path]]]:
    """Group files sharing a stem across directories; every stem must appear in all."""
    indexes = [_index_dir(d) for d in dirs]
    stems = set().union(*indexes)
    for d, idx in zip(dirs, indexes):
        missing = sorted(stems - set(idx))
        if missing:
            raise UnmatchedTripleError(f"{d} has no file for: {', '.join(missing[:5])}")
    return [(s, [idx[s] for idx in indexes]) for s in sorted(stems)]


def _build_composited(real_dir, inside_dir, mask_dir, out_dir, generator, split, binarize):
    out = Path(out_dir)
    samples = []
    for stem, (real, inside, mask) in match_triples(real_dir, inside_dir, mask_dir):
        dest = composite(CompositeJob(inside, real, mask, out / "images" / f"{stem}.png"), binarize)
        samples.append(Sample(dest.resolve(), "fake", generator, split, Path(mask).resolve()))
    path = write_manifest(samples, out / "manifest.jsonl")
    return load_manifest(path, binarize=binarize)


def build_ldm_clean(real_dir, ldm_dir, mask_dir, out_dir, generator="ldm-clean", split="train",
                    binarize=False) -> DatasetManifest:
    """LDM inpaintings with the background restored from the real image."""
    return _build_composited(real_dir, ldm_dir, mask_dir, out_dir, generator, split, binarize)


def build_ldm_real(real_dir, fingerprinted_dir, mask_dir, out_dir, generator="ldm-real", split="train",
                   binarize=False) -> DatasetManifest:
    """Real content everywhere; the masked region comes from the real image
    passed through LDM with an empty mask, so it carries only the fingerprint."""
    return _build_composited(real_dir, fingerprinted_dir, mask_dir, out_dir, generator, split, binarize)


# --- augmentation -----------------------------------------------------------

AUGMENT_KINDS = ("gaussian_blur", "color_jitter", "jpeg")
DEFAULT_PARAMS = {
    "gaussian_blur": {"sigma": (0.5, 3.0)},
    "color_jitter": {"brightness": (0.8, 1.2), "contrast": (0.8, 1.2), "saturation": (0.8, 1.2)},
    "jpeg": {"quality": (30, 95)},
}
PARAM_BOUNDS = {
    "sigma": (0.0, 10.0),
    "brightness": (0.0, 2.0),
    "contrast": (0.0, 2.0),
    "saturation": (0.0, 2.0),
    "quality": (1, 100),
}


def _as_range(v) -> tuple[float, float]:
    if isinstance(v, (int, float)):
        return (v, v)
    lo, hi = v
    return (lo, hi)


@dataclass(frozen=True)
class AugmentSpec:
    """One augmentation; each parameter is a fixed value or a (low, high) range."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValidationError(f"unknown augmentation {self.kind!r}; expected one of {AUGMENT_KINDS}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        unknown = set(merged) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValidationError(f"{self.kind} does not take parameter(s) {sorted(unknown)}")
        ranges = {}
        for name, v in merged.items():
            lo, hi = _as_range(v)
            blo, bhi = PARAM_BOUNDS[name]
            if not blo <= lo <= hi <= bhi:
                raise ValidationError(f"{self.kind}.{name} range ({lo}, {hi}) outside [{blo}, {bhi}]")
            ranges[name] = (lo, hi)
        object.__setattr__(self, "params", ranges)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: list(v) for k, v in self.params.items()}, "seed": self.seed}


def derived_seed(key: str, seed: int) -> int:
    digest = hashlib.sha256(f"{key}\x00{seed}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_params(spec: AugmentSpec, rng: np.random.Generator) -> dict:
    out = {}
    for name, (lo, hi) in spec.params.items():
        if name == "quality":
            out[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            out[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return out


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return image.copy()
    out = ndimage.gaussian_filter(image.astype(np.float64), sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def color_jitter(image: np.ndarray, brightness=1.0, contrast=1.0, saturation=1.0) -> np.ndarray:
    img = Image.fromarray(image)
    for enhancer, factor in ((ImageEnhance.Brightness, brightness),
                             (ImageEnhance.Contrast, contrast),
                             (ImageEnhance.Color, saturation)):
        if factor != 1.0:
            img = enhancer(img).enhance(factor)
    return np.asarray(img).copy()


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB")).copy()


def augment(image: np.ndarray, spec: AugmentSpec, key: str = "") -> np.ndarray:
    """Apply ``spec`` to an RGB uint8 image.

    Random parameters are drawn from a generator seeded by (``key``,
    ``spec.seed``), so the same image key always gets the same draw.
    """
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("augment expects an H x W x 3 uint8 image")
    p = sample_params(spec, np.random.default_rng(derived_seed(key, spec.seed)))
    if spec.kind == "gaussian_blur":
        return gaussian_blur(image, p["sigma"])
    if spec.kind == "color_jitter":
        return color_jitter(image, p["brightness"], p["contrast"], p["saturation"])
    return jpeg_roundtrip(image, p["quality"])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else 10 * np.log10(255.0 ** 2 / mse)


def build_augmented(manifest: DatasetManifest, specs: Sequence[AugmentSpec], out_dir: PathLike,
                    generator: Optional[str] = None, workers: int = 1) -> DatasetManifest:
    """Write an offline-augmented copy of every image (masks are reused)."""
    if not specs:
        raise ValidationError("no augmentations given")
    out = Path(out_dir)

    def work(s: Sample) -> Sample:
        key = s.image_path.name
        img = load_rgb(s.image_path)
        for spec in specs:
            img = augment(img, spec, key)
        dest = save_rgb(img, out / "images" / f"{s.image_path.stem}.png")
        return Sample(dest.resolve(), s.label, generator or s.generator, s.split, s.mask_path)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(work, manifest.samples))
    return load_manifest(write_manifest(samples, out / "manifest.jsonl"), check_masks=False)


# --- object masks -----------------------------------------------------------

def select_object_index(areas: Sequence[float], min_area_frac: float = 0.05, seed: int = 0) -> Optional[int]:
    """Uniformly pick one object whose area fraction exceeds ``min_area_frac``."""
    if len(areas) == 0:
        raise ValidationError("no object annotations")
    ok = [i for i, a in enumerate(areas) if a > min_area_frac]
    if not ok:
        return None
    return ok[int(np.random.default_rng(seed).integers(len(ok)))]


def select_object_mask(annotations: Sequence[np.ndarray], min_area_frac: float = 0.05,
                       seed: int = 0) -> Optional[np.ndarray]:
    """Random object mask covering more than ``min_area_frac`` of the image, or None."""
    if len(annotations) == 0:
        raise ValidationError("no object annotations")
    areas = [np.count_nonzero(m) / np.asarray(m).size for m in annotations]
    i = select_object_index(areas, min_area_frac, seed)
    return None if i is None else np.asarray(annotations[i])


# --- external inpainter -----------------------------------------------------

@dataclass(frozen=True)
class InpaintJob:
    image_path: Path
    mask_path: Path
    prompt: str
    output_path: Path

    def to_json(self) -> dict:
        return {"image_path": str(self.image_path), "mask_path": str(self.mask_path),
                "prompt": self.prompt, "output_path": str(self.output_path)}


class SubprocessInpainter:
    """Runs ``command`` once per job; a ``{job}`` argument is replaced by the
    path of a JSON job file, otherwise the job JSON arrives on stdin.
    Exit status 0 means success."""

    def __init__(self, command: Sequence[str], timeout: Optional[float] = None):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, job: InpaintJob) -> None:
        payload = json.dumps(job.to_json())
        with tempfile.TemporaryDirectory() as tmp:
            job_file = Path(tmp) / "job.json"
            job_file.write_text(payload)
            cmd = [a.replace("{job}", str(job_file)) for a in self.command]
            stdin = None if any("{job}" in a for a in self.command) else payload
            proc = subprocess.run(cmd, input=stdin, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise InpainterError(f"inpainter exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")


class HttpInpainter:
    """POSTs the job JSON to ``url``; any 2xx status means success."""

    def __init__(self, url: str, timeout: float = 300.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, job: InpaintJob) -> None:
        req = urllib.request.Request(self.url, data=json.dumps(job.to_json()).encode(),
                                     headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                status = resp.status
        except urllib.error.URLError as exc:
            raise InpainterError(f"inpainter request failed: {exc}") from exc
        if not 200 <= status < 300:
            raise InpainterError(f"inpainter returned HTTP {status}")


class CallableInpainter:
    """In-process inpainter: ``fn(image, mask, prompt) -> image`` on uint8 arrays."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray, str], np.ndarray]):
        self.fn = fn

    def __call__(self, job: InpaintJob) -> None:
        mask = load_mask(job.mask_path).values
        save_rgb(self.fn(load_rgb(job.image_path), mask, job.prompt), job.output_path)


def run_inpaint_job(inpainter, job: InpaintJob, retries: int = 2) -> None:
    """Call ``inpainter`` up to ``1 + retries`` times until it writes a same-sized image."""
    with Image.open(job.image_path) as im:
        size = im.size
    Path(job.output_path).parent.mkdir(parents=True, exist_ok=True)
    last = None
    for attempt in range(retries + 1):
        try:
            inpainter(job)
            if not job.output_path.is_file():
                raise InpainterError(f"inpainter wrote no output at {job.output_path}")
            with Image.open(job.output_path) as im:
                if im.size != size:
                    raise InpainterError(f"inpainter output is {im.size}, input is {size}")
            return
        except (InpainterError, OSError, subprocess.SubprocessError) as exc:
            last = exc
            log.warning("inpaint attempt %d/%d for %s failed: %s", attempt + 1, retries + 1, job.image_path, exc)
    raise InpainterError(f"{job.image_path}: {last}")


# --- general-domain (COCO) inpainted sets -----------------------------------

@dataclass
class SourceImage:
    image_path: Path
    caption: str
    split: str
    objects: list = field(default_factory=list)  # HxW arrays or mask file paths


@dataclass
class BuildReport:
    written: int = 0
    skipped: list = field(default_factory=list)  # (image_path, reason)

    def summary(self) -> dict:
        return {"written": self.written, "skipped": len(self.skipped),
                "reasons": [{"image": str(p), "reason": r} for p, r in self.skipped]}


def load_sources(path: PathLike) -> list[SourceImage]:
    """JSON-lines: {image_path, caption, split, object_masks: [paths]}, paths relative to the file."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"source list not found: {path}")
    root = path.resolve().parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(SourceImage(root / rec["image_path"], rec["caption"], rec.get("split", "train"),
                                   [root / m for m in rec["object_masks"]]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed source record ({exc})") from exc
    return out


def _rasterize(segmentation, height: int, width: int) -> Optional[np.ndarray]:
    if isinstance(segmentation, list):
        canvas = Image.new("L", (width, height), 0)
        draw = ImageDraw.Draw(canvas)
        for poly in segmentation:
            if len(poly) >= 6:
                draw.polygon(list(map(float, poly)), fill=1)
        return np.asarray(canvas, dtype=np.uint8)
    counts = segmentation.get("counts")
    if isinstance(counts, list):
        # uncompressed RLE, column-major
        flat = np.zeros(height * width, dtype=np.uint8)
        pos, val = 0, 0
        for c in counts:
            flat[pos:pos + c] = val
            pos += c
            val ^= 1
        return flat.reshape(width, height).T
    return None


def coco_sources(instances_json: PathLike, captions_json: PathLike, image_root: PathLike,
                 split: str) -> list[SourceImage]:
    """Object masks and first caption per image from COCO annotation files.

    Polygon and uncompressed-RLE segmentations are rasterised; compressed
    RLE (crowd regions) is skipped.
    """
    inst = json.loads(Path(instances_json).read_text())
    caps = json.loads(Path(captions_json).read_text())
    caption = {}
    for a in sorted(caps["annotations"], key=lambda a: a["id"]):
        caption.setdefault(a["image_id"], a["caption"].strip())
    images = {im["id"]: im for im in inst["images"]}
    objects: dict[int, list] = {}
    for a in inst["annotations"]:
        im = images[a["image_id"]]
        m = _rasterize(a["segmentation"], im["height"], im["width"])
        if m is not None:
            objects.setdefault(a["image_id"], []).append(m)
    out = []
    for img_id in sorted(images):
        if img_id in objects and img_id in caption:
            out.append(SourceImage(Path(image_root) / images[img_id]["file_name"], caption[img_id],
                                   split, objects[img_id]))
    return out


def _object_arrays(src: SourceImage) -> list[np.ndarray]:
    return [load_mask(o, binarize=True).values if isinstance(o, (str, Path)) else np.asarray(o)
            for o in src.objects]


def build_cocosd_manifest(
    sources: Sequence[SourceImage],
    inpainter,
    out_dir: PathLike,
    seed: int = 0,
    min_area_frac: float = 0.05,
    retries: int = 2,
    concurrency: int = 1,
    generator: str = "coco-sd",
) -> tuple[DatasetManifest, BuildReport]:
    """Inpaint one random large object per image, prompted with the caption.

    Images without a qualifying object, and jobs that still fail after
    ``retries`` retries, are skipped and listed in the report.
    """
    out = Path(out_dir)
    report = BuildReport()
    jobs = []
    for src in sources:
        objs = _object_arrays(src) if src.objects else []
        if not objs:
            report.skipped.append((src.image_path, "no object annotations"))
            continue
        mask = select_object_mask(objs, min_area_frac, derived_seed(str(Path(src.image_path).name), seed))
        if mask is None:
            report.skipped.append((src.image_path, f"no object larger than {min_area_frac:.0%}"))
            continue
        stem = Path(src.image_path).stem
        mask_path = save_mask(MaskGrid((mask > 0).astype(np.uint8)), out / "masks" / f"{stem}.png")
        jobs.append((src, InpaintJob(Path(src.image_path), mask_path, src.caption, out / "images" / f"{stem}.png")))

    def work(item):
        src, job = item
        try:
            run_inpaint_job(inpainter, job, retries)
            return src, job, None
        except InpainterError as exc:
            return src, job, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(work, jobs))
    samples = []
    for src, job, err in results:
        if err is not None:
            report.skipped.append((src.image_path, err))
            continue
        samples.append(Sample(job.output_path.resolve(), "fake", generator, src.split, job.mask_path.resolve()))
    report.written = len(samples)
    path = write_manifest(samples, out / "manifest.jsonl")
    log.info("wrote %d inpainted images, skipped %d", report.written, len(report.skipped))
    return load_manifest(path, check_masks=False), report
