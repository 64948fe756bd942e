"""``inpaintloc`` command line.

Exit status: 0 on success, 1 for invalid input or arguments, 2 when a run
fails at runtime. Settings resolve as command-line flag, then ``--config``
file (JSON), then built-in default. Outputs go to ``<out>/<command>-<hash>``
where the hash covers the resolved settings.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset_ops, reporting
from .backbone import BackboneSpec, FeatureCache, FeatureSource, image_features, save_feature_grid
from .data import (
    DatasetManifest,
    ValidationError,
    load_manifest,
    load_rgb,
    save_prediction,
    save_rgb,
)
from .decoder import DecoderSpec, NAMED_DECODERS, config_hash, load_archive
from .metrics import (
    aggregate_id_ood,
    average_precision,
    build_cross_matrix,
    per_image_iou,
    read_matrix_csv,
    write_matrix_csv,
    write_summary_json,
)
from .training import TrainConfig, train

log = logging.getLogger("inpaintloc")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

BACKBONES = ("vit-l14", "rn50", "concat")
FAMILY = {"vit-l14": "vit_l14", "rn50": "resnet50"}
DEFAULT_LAYER = {"vit-l14": 21, "rn50": 3, "concat": 21}

DEFAULTS = {
    "train": {
        "backbone": "vit-l14", "layer": None, "layer2": 3, "decoder": "conv-20",
        "train": None, "val": None, "seed": 0, "out": "runs",
        "backbone_checkpoint": None, "backbone2_checkpoint": None,
        "epochs": 300, "batch_size": 32, "lr": 1e-3, "loss": "pixel_bce",
        "cache_dir": None, "binarize_masks": False,
    },
    "eval": {
        "checkpoint": None, "test": None, "model": [], "test_set": [], "threshold": 0.5,
        "seed": 0, "out": "runs", "cache_dir": None, "binarize_masks": False, "workers": 1,
    },
    "predict": {
        "checkpoint": None, "test": None, "images": [], "threshold": 0.5, "seed": 0, "out": "runs",
    },
}


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Fully resolved settings of one command invocation."""

    command: str
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"command": self.command, "settings": self.settings}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        return cls(d["command"], d["settings"])

    def digest(self) -> str:
        payload = {k: v for k, v in self.settings.items() if k != "out"}
        return config_hash({"command": self.command, "settings": payload})

    def run_dir(self) -> Path:
        return Path(self.settings.get("out") or "runs") / f"{self.command}-{self.digest()}"


def resolve(command: str, args: argparse.Namespace) -> RunConfig:
    settings = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        file_cfg = file_cfg.get("settings", file_cfg)
        unknown = set(file_cfg) - set(settings) if settings else set()
        if unknown:
            raise UsageError(f"unknown config key(s): {sorted(unknown)}")
        settings.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "config", "func", "verbose") or v is None or v == []:
            continue
        settings[k] = v
    for k, v in list(settings.items()):
        if isinstance(v, Path):
            settings[k] = str(v)
    return RunConfig(command, settings)


def _prepare_run(cfg: RunConfig) -> Path:
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(cfg.to_json() + "\n")
    return run


def _abs(p: Optional[str]) -> Optional[str]:
    return str(Path(p).resolve()) if p else None


def feature_source(backbone: str, layer: Optional[int], layer2: Optional[int],
                   ckpt: Optional[str] = None, ckpt2: Optional[str] = None) -> FeatureSource:
    if backbone not in BACKBONES:
        raise UsageError(f"--backbone must be one of {BACKBONES}")
    layer = DEFAULT_LAYER[backbone] if layer is None else int(layer)
    if backbone == "concat":
        return FeatureSource([
            BackboneSpec("vit_l14", layer, _abs(ckpt)),
            BackboneSpec("resnet50", 3 if layer2 is None else int(layer2), _abs(ckpt2)),
        ])
    return FeatureSource([BackboneSpec(FAMILY[backbone], layer, _abs(ckpt))])


def _manifest(path: Optional[str], what: str, binarize: bool = False) -> DatasetManifest:
    if not path:
        raise UsageError(f"--{what} manifest is required")
    m = load_manifest(path, binarize=binarize)
    if len(m) == 0:
        raise UsageError(f"{what} manifest {path} is empty")
    return m


# --- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve("train", args)
    s = cfg.settings
    source = feature_source(s["backbone"], s["layer"], s["layer2"], s["backbone_checkpoint"], s["backbone2_checkpoint"])
    train_m = _manifest(s["train"], "train", s["binarize_masks"])
    val_m = _manifest(s["val"], "val", s["binarize_masks"]) if s["val"] else None
    tcfg = TrainConfig(initial_lr=float(s["lr"]), batch_size=int(s["batch_size"]),
                       max_epochs=int(s["epochs"]), seed=int(s["seed"]), loss=s["loss"])
    spec = None
    if tcfg.loss == "pixel_bce":
        h, w, d = source.grid_shape()
        if s["decoder"] not in NAMED_DECODERS:
            raise UsageError(f"--decoder must be one of {sorted(NAMED_DECODERS)}")
        spec = DecoderSpec.named(s["decoder"], d, (h, w))
    run = _prepare_run(cfg)
    cache = FeatureCache(s["cache_dir"]) if s["cache_dir"] else None
    result = train(source, spec, train_m, val_m, tcfg, out_dir=run, cache=cache,
                   run_config_hash=cfg.digest(), binarize=s["binarize_masks"])
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final train loss {last['train_loss']:.5f}, "
          f"val loss {last['val_loss']:.5f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"history: {run / 'history.csv'}")
    return EXIT_OK


def _kv_pairs(items, flag) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"{flag} expects GENERATOR=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_eval(args) -> int:
    cfg = resolve("eval", args)
    s = cfg.settings
    from .inference import Localizer, ProbeScorer

    cache = FeatureCache(s["cache_dir"]) if s["cache_dir"] else None
    if s["model"]:
        models = _kv_pairs(s["model"], "--model")
        tests = {g: _manifest(p, "test-set", s["binarize_masks"]) for g, p in _kv_pairs(s["test_set"], "--test-set").items()}
        run = _prepare_run(cfg)
        matrix = build_cross_matrix(models, tests, s["threshold"], workers=int(s["workers"]),
                                    loader=lambda p: Localizer.from_checkpoint(p, cache))
        write_matrix_csv(matrix, run / "matrix.csv")
        print(reporting.matrix_table(matrix), end="")
        if len(matrix.generators) >= 2:
            write_summary_json(aggregate_id_ood(matrix), run / "summary.json")
        print(f"matrix: {run / 'matrix.csv'}")
        return EXIT_OK

    if not s["checkpoint"]:
        raise UsageError("--checkpoint is required (or use --model/--test-set for a matrix)")
    test = _manifest(s["test"], "test", s["binarize_masks"])
    _, meta = load_archive(s["checkpoint"])
    run = _prepare_run(cfg)
    summary = {"checkpoint": str(s["checkpoint"]), "test": str(s["test"]), "n_images": len(test)}
    labels = [smp.label for smp in test.samples]
    both = len(set(labels)) == 2
    paths = [smp.image_path for smp in test.samples]
    if meta.get("kind") == "probe":
        scores = ProbeScorer.from_checkpoint(s["checkpoint"]).scores(paths)
    else:
        loc = Localizer.from_checkpoint(s["checkpoint"], cache)
        preds = dict(zip(paths, loc.predict_paths(paths)))
        if test.fakes():
            ious = per_image_iou(preds, test, s["threshold"], s["binarize_masks"])
            with (run / "per_image_iou.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image_path", "iou"])
                for p, v in ious.items():
                    w.writerow([str(p), repr(v)])
            summary["iou"] = 100.0 * float(np.mean(list(ious.values())))
            summary["n_fake"] = len(ious)
        scores = [float(preds[p].values.max()) for p in paths]
    if both:
        summary["average_precision"] = 100.0 * average_precision(scores, labels)
    (run / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve("predict", args)
    s = cfg.settings
    from .inference import Localizer

    if not s["checkpoint"]:
        raise UsageError("--checkpoint is required")
    paths = [Path(p) for p in s["images"]]
    if s["test"]:
        paths += [smp.image_path for smp in load_manifest(s["test"], check_masks=False).samples]
    if not paths:
        raise UsageError("give --images or --test")
    loc = Localizer.from_checkpoint(s["checkpoint"])
    run = _prepare_run(cfg)
    from PIL import Image

    for path, pred in zip(paths, loc.predict_paths(paths)):
        prob = save_prediction(pred, run / f"{path.stem}_prob.png")
        img = np.asarray(Image.fromarray(load_rgb(path)).resize((pred.width, pred.height), Image.BICUBIC))
        ov = save_rgb(reporting.overlay(img, pred, float(s["threshold"])), run / f"{path.stem}_overlay.png")
        print(f"{path}: {prob.name}, {ov.name}")
    return EXIT_OK


def cmd_compose(args) -> int:
    build = dataset_ops.build_ldm_clean if args.mode == "clean" else dataset_ops.build_ldm_real
    manifest = build(args.real_dir, args.inside_dir, args.mask_dir, args.out,
                     generator=args.generator or f"ldm-{args.mode}", split=args.split,
                     binarize=args.binarize_masks)
    real_index = {p.stem: p for p in Path(args.real_dir).iterdir()}
    checked = exact = 0
    for smp in manifest.samples[: args.check]:
        checked += 1
        exact += dataset_ops.background_exact(smp.image_path, real_index[smp.image_path.stem], smp.mask_path)
    print(f"composited {len(manifest)} images into {Path(args.out) / 'manifest.jsonl'}")
    print(f"background exactness: {exact}/{checked} sampled composites match the real image outside the mask")
    return EXIT_OK if exact == checked else EXIT_RUNTIME


def _augment_specs(args) -> list:
    specs = []
    names = {"blur": "gaussian_blur", "jitter": "color_jitter", "jpeg": "jpeg"}
    for kind in args.kind:
        params = {}
        if kind == "blur" and args.sigma:
            params["sigma"] = tuple(args.sigma)
        if kind == "jitter" and args.jitter:
            params = {k: tuple(args.jitter) for k in ("brightness", "contrast", "saturation")}
        if kind == "jpeg" and args.quality:
            params["quality"] = tuple(args.quality)
        specs.append(dataset_ops.AugmentSpec(names[kind], params, args.seed))
    return specs


def cmd_augment(args) -> int:
    src = load_manifest(args.manifest, check_masks=False)
    specs = _augment_specs(args)
    out = dataset_ops.build_augmented(src, specs, args.out, workers=args.workers)
    (Path(args.out) / "augment.json").write_text(json.dumps([sp.to_dict() for sp in specs], indent=2) + "\n")
    print(f"augmented {len(out)} images ({', '.join(sp.kind for sp in specs)}) into {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_build_cocosd(args) -> int:
    if args.sources:
        sources = dataset_ops.load_sources(args.sources)
    elif args.instances and args.captions and args.image_root:
        sources = dataset_ops.coco_sources(args.instances, args.captions, args.image_root, args.split)
    else:
        raise UsageError("give --sources, or --instances with --captions and --image-root")
    if args.inpainter_url:
        inpainter = dataset_ops.HttpInpainter(args.inpainter_url)
    elif args.inpainter_cmd:
        import shlex

        inpainter = dataset_ops.SubprocessInpainter(shlex.split(args.inpainter_cmd))
    else:
        raise UsageError("give --inpainter-cmd or --inpainter-url")
    manifest, report = dataset_ops.build_cocosd_manifest(
        sources, inpainter, args.out, seed=args.seed, min_area_frac=args.min_area,
        retries=args.retries, concurrency=args.concurrency)
    (Path(args.out) / "build_report.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    counts = {sp: sum(1 for smp in manifest.samples if smp.split == sp) for sp in ("train", "val", "test")}
    print(f"inpainted {report.written} images, skipped {len(report.skipped)}; splits {counts}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (args.matrix or args.sweep or args.decoders):
        raise UsageError("give --matrix, --sweep or --decoders")
    for path in args.matrix or []:
        matrix = read_matrix_csv(path)
        stem = Path(path).stem
        labels = reporting.plot_cross_matrix(matrix, out / f"{stem}_heatmap.png", args.title)
        (out / f"{stem}_annotations.json").write_text(json.dumps(labels) + "\n")
        (out / f"{stem}_table.md").write_text(reporting.matrix_table(matrix))
        if len(matrix.generators) >= 2:
            summary = aggregate_id_ood(matrix)
            write_summary_json(summary, out / f"{stem}_summary.json")
            reporting.plot_id_ood({stem: summary}, out / f"{stem}_id_ood.png")
            print(f"{stem}: ID {summary.id_iou:.1f} / OOD {summary.ood_iou:.1f}")
        print(f"{stem}: {out / f'{stem}_heatmap.png'}")
    if args.sweep:
        rows = reporting.read_sweep_csv(args.sweep)
        reporting.plot_sweep(rows, out / "sweep.png")
        table = reporting.markdown_table(["name", "ID", "OOD"],
                                         [[r["name"], f"{r['id_iou']:.1f}", f"{r['ood_iou']:.1f}"] for r in rows])
        (out / "sweep.md").write_text(table)
        print(table, end="")
    if args.decoders:
        table = reporting.decoder_table(reporting.read_sweep_csv(args.decoders))
        (out / "decoders.md").write_text(table)
        print(table, end="")
    return EXIT_OK


def cmd_fixture(args) -> int:
    from .fixtures import make_toy_dataset

    path = make_toy_dataset(args.out, n_fake=args.n_fake, n_real=args.n_real, seed=args.seed,
                            generator=args.generator, split=args.split)
    print(path)
    return EXIT_OK


def cmd_extract(args) -> int:
    source = feature_source(args.backbone, args.layer, args.layer2, args.backbone_checkpoint, args.backbone2_checkpoint)
    out = Path(args.out)
    grids = image_features(args.images, source)
    for path, grid in zip(args.images, grids):
        dest = save_feature_grid(grid, out / f"{Path(path).stem}.fgrd", {"source": source.key(), "image": str(path)})
        print(f"{path}: {dest} {tuple(grid.shape)}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _backbone_flags(p, defaults=True):
    p.add_argument("--backbone", choices=BACKBONES, default=None if defaults else "vit-l14")
    p.add_argument("--layer", type=int)
    p.add_argument("--layer2", type=int, help="ResNet-50 stage for --backbone concat")
    p.add_argument("--backbone-checkpoint", help="CLIP checkpoint (ViT-L-14.pt / RN50.pt)")
    p.add_argument("--backbone2-checkpoint", help="RN50 checkpoint for --backbone concat")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="inpaintloc", description="Localize inpainted image regions with frozen CLIP features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("train", help="train a decoder (or image-level probe)")
    p.add_argument("--config")
    _backbone_flags(p)
    p.add_argument("--decoder", choices=sorted(NAMED_DECODERS))
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("pixel_bce", "image_bce"))
    p.add_argument("--cache-dir")
    p.add_argument("--binarize-masks", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="IoU / AP of a checkpoint, or a cross-generator matrix")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--model", action="append", default=[], metavar="GEN=CKPT")
    p.add_argument("--test-set", action="append", default=[], metavar="GEN=MANIFEST")
    p.add_argument("--threshold", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--cache-dir")
    p.add_argument("--binarize-masks", action="store_true", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="probability maps and overlays")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--images", nargs="*", default=[])
    p.add_argument("--test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compose", help="build LDM/clean or LDM/real composites")
    p.add_argument("--mode", choices=("clean", "real"), required=True)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--inside-dir", required=True, help="LDM outputs (clean) or empty-mask LDM passes (real)")
    p.add_argument("--mask-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--generator")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--check", type=int, default=5, help="composites to verify for background exactness")
    p.add_argument("--binarize-masks", action="store_true")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("augment", help="offline blur / colour jitter / JPEG copies of a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", action="append", choices=("blur", "jitter", "jpeg"), required=True)
    p.add_argument("--sigma", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--jitter", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--quality", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("build-cocosd", help="inpaint one object per image with an external inpainter")
    p.add_argument("--sources", help="JSON-lines {image_path, caption, split, object_masks}")
    p.add_argument("--instances")
    p.add_argument("--captions")
    p.add_argument("--image-root")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--inpainter-cmd", help="command run per job; '{job}' becomes the job JSON path")
    p.add_argument("--inpainter-url")
    p.add_argument("--min-area", type=float, default=0.05)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_cocosd)

    p = sub.add_parser("report", help="heatmaps, ID/OOD bars and tables from result CSVs")
    p.add_argument("--matrix", action="append", help="cross-generator matrix CSV")
    p.add_argument("--sweep", help="CSV name,id_iou,ood_iou[,backbone] (layer sweep)")
    p.add_argument("--decoders", help="CSV name,id_iou,ood_iou with decoder names")
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("fixture", help="write a small synthetic inpainting dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-fake", type=int, default=8)
    p.add_argument("--n-real", type=int, default=0)
    p.add_argument("--generator", default="toy")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("extract", help="export backbone feature grids")
    _backbone_flags(p, defaults=False)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
