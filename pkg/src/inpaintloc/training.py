"""Decoder and linear-probe training on frozen backbone features.

Optimisation follows the usual detection recipe: Adam from lr 1e-3, lr
divided by 10 after more than five epochs without validation improvement,
and training stops once the lr would fall below 1e-6.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneSpec, FeatureCache, FeatureSource, image_embeddings, image_features
from .data import DatasetManifest, DimensionMismatchError, PathLike, ValidationError, sample_mask
from .decoder import (
    DecoderSpec,
    build_decoder,
    config_hash,
    save_archive,
    save_decoder_checkpoint,
)

log = logging.getLogger(__name__)

LOSSES = ("pixel_bce", "image_bce")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    stop_lr: float = 1e-6
    improvement_tol: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 300
    seed: int = 0
    loss: str = "pixel_bce"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augmentations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "augmentations", tuple(self.augmentations))
        if not self.stop_lr < self.initial_lr:
            raise ValidationError("stop_lr must be below initial_lr")
        if self.plateau_patience < 1:
            raise ValidationError("plateau_patience must be at least 1")
        if not 0 < self.plateau_factor < 1:
            raise ValidationError("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be positive")
        if self.loss not in LOSSES:
            raise ValidationError(f"loss must be one of {LOSSES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["augmentations"] = list(self.augmentations)
        return d

    def digest(self) -> str:
        return config_hash(self.to_dict())


@dataclass(frozen=True)
class TrainState:
    epoch: int = 0
    current_lr: float = 1e-3
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    reductions: int = 0
    stop: bool = False
    rng_state: Optional[object] = field(default=None, repr=False, compare=False)

    @classmethod
    def initial(cls, config: TrainConfig) -> "TrainState":
        return cls(current_lr=config.initial_lr)


def lr_schedule_step(state: TrainState, val_loss: float, config: TrainConfig) -> TrainState:
    """Advance the reduce-on-plateau schedule by one epoch.

    An epoch improves when ``val_loss`` beats the best so far by more than
    ``improvement_tol``. Once more than ``plateau_patience`` epochs pass
    without improvement the lr is multiplied by ``plateau_factor``; when it
    drops below ``stop_lr`` the returned state has ``stop`` set.
    """
    if not math.isfinite(val_loss):
        raise ValidationError(f"validation loss must be finite, got {val_loss}")
    if state.stop:
        return state
    best, bad, k = state.best_val_loss, state.epochs_since_improvement, state.reductions
    if val_loss < best - config.improvement_tol:
        best, bad = val_loss, 0
    else:
        bad += 1
    if bad > config.plateau_patience:
        k += 1
        bad = 0
    # lr stays an exact power of the factor times the initial lr
    lr = config.initial_lr * config.plateau_factor ** k
    stop = lr < config.stop_lr * (1 - 1e-9)
    return replace(state, epoch=state.epoch + 1, current_lr=lr, best_val_loss=best,
                   epochs_since_improvement=bad, reductions=k, stop=stop)


def pixel_bce_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against {0, 1} targets.

    Value is max(z, 0) - z*y + log(1 + exp(-|z|)), overflow-free. Written
    out by hand, autograd would take the subgradients of max and |.| at
    z = 0 and return 1 - y instead of 0.5 - y, which bites whenever logits
    are exactly zero (zero-initialised heads, dead ReLU regions); the fused
    torch op differentiates it correctly.
    """
    if logits.shape != masks.shape:
        if logits.ndim == masks.ndim + 1 and logits.shape[1] == 1:
            logits = logits[:, 0]
        if logits.shape != masks.shape:
            raise DimensionMismatchError(f"logits {tuple(logits.shape)} vs masks {tuple(masks.shape)}")
    return F.binary_cross_entropy_with_logits(logits, masks.to(logits.dtype))


# --- data -------------------------------------------------------------------

class FeatureStore:
    """Frozen features and target masks for one manifest.

    Features are extracted once. With a cache, grids stay on disk and are
    read per batch; otherwise the whole set is held in memory.
    """

    def __init__(self, manifest: DatasetManifest, source: FeatureSource, out_size: tuple[int, int],
                 cache: Optional[FeatureCache] = None, binarize: bool = False):
        if len(manifest) == 0:
            raise ValidationError(f"manifest {manifest.name!r} is empty")
        self.samples = list(manifest.samples)
        self.paths = [s.image_path for s in self.samples]
        self.source = source
        self.cache = cache
        self.out_size = tuple(out_size)
        self.binarize = binarize
        feats = image_features(self.paths, source, cache)
        self._features = None if cache is not None else feats
        self._key = source.key() if cache is not None else None
        self._masks = None if cache is not None else torch.stack([self._mask(i) for i in range(len(self))])

    def __len__(self):
        return len(self.samples)

    def _mask(self, i) -> torch.Tensor:
        m = sample_mask(self.samples[i], self.out_size, binarize=self.binarize)
        return torch.from_numpy(m.values.astype(np.float32))

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        idx = list(map(int, idx))
        if self._features is not None:
            return self._features[idx], self._masks[idx]
        feats = torch.stack([self.cache.get(self.paths[i], self._key) for i in idx])
        return feats, torch.stack([self._mask(i) for i in idx])

    def batches(self, batch_size: int, order=None):
        order = range(len(self)) if order is None else order
        order = list(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


# --- loops ------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    history: list[dict]
    model: nn.Module
    state: TrainState


def write_history(history: Sequence[dict], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])
    tmp.replace(path)
    return path


def read_history(path: PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "lr": float(r["lr"])}
            for r in csv.DictReader(fh)
        ]


def _evaluate(model, store: FeatureStore, batch_size: int) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for feats, masks in store.batches(batch_size):
            total += pixel_bce_loss(model(feats), masks).item() * len(feats)
            n += len(feats)
    return total / n


def _fit(model, params, train_step, evaluate, n_train, config, callback=None):
    """Shared epoch loop: Adam steps, plateau schedule, history."""
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=config.initial_lr, betas=config.adam_betas, eps=config.adam_eps)
    state = TrainState.initial(config)
    history = []
    for epoch in range(config.max_epochs):
        model.train()
        order = torch.randperm(n_train, generator=g).tolist()
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = train_step(idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch} (lr={state.current_lr:g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / n_train
        val_loss = evaluate()
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": state.current_lr})
        log.info("epoch %d train %.5f val %.5f lr %.1e", epoch, train_loss, val_loss, state.current_lr)
        state = lr_schedule_step(state, val_loss, config)
        state = replace(state, rng_state=g.get_state())
        for group in opt.param_groups:
            group["lr"] = state.current_lr
        if state.stop:
            log.info("lr fell below %g; stopping after epoch %d", config.stop_lr, epoch)
            break
        if callback is not None and callback(epoch, model, state):
            break
    model.eval()
    return history, state


def train(
    source: FeatureSource,
    decoder_spec: Optional[DecoderSpec],
    train_manifest: DatasetManifest,
    val_manifest: Optional[DatasetManifest],
    config: TrainConfig,
    out_dir: Optional[PathLike] = None,
    cache: Optional[FeatureCache] = None,
    callback: Optional[Callable] = None,
    run_config_hash: Optional[str] = None,
    binarize: bool = False,
) -> TrainResult:
    """Train a localization decoder on frozen features.

    Ground-truth masks are resized (nearest) to the decoder's output size.
    Without ``val_manifest`` the plateau schedule watches the training loss.
    ``callback(epoch, model, state)`` returning True ends training early.
    Writes ``checkpoint.zip`` and ``history.csv`` to ``out_dir`` when given.
    """
    if config.loss == "image_bce":
        if len(source.specs) != 1:
            raise ValidationError("image-level probes use a single backbone")
        return train_cls_probe(source.specs[0], train_manifest, config, val_manifest, out_dir,
                               run_config_hash=run_config_hash)
    if len(train_manifest) == 0:
        raise ValidationError("training manifest is empty")
    h, w, d = source.grid_shape()
    if decoder_spec is None:
        raise ValidationError("a decoder spec is required for pixel-level training")
    spec = replace(decoder_spec, init_seed=config.seed)
    if spec.input_dim != d or spec.input_grid != (h, w):
        raise DimensionMismatchError(
            f"decoder built for {spec.input_grid}x{spec.input_dim}, features are {(h, w)}x{d}"
        )
    before = source.checksums()
    torch.manual_seed(config.seed)
    train_store = FeatureStore(train_manifest, source, spec.output_size, cache, binarize)
    val_store = FeatureStore(val_manifest, source, spec.output_size, cache, binarize) if val_manifest else train_store

    model = build_decoder(spec)

    def step(idx):
        feats, masks = train_store.batch(idx)
        return pixel_bce_loss(model(feats), masks)

    history, state = _fit(model, model.parameters(), step,
                          lambda: _evaluate(model, val_store, config.batch_size),
                          len(train_store), config, callback)

    after = source.checksums()
    if after != before:
        raise TrainingError("backbone weights changed during training")
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        write_history(history, out / "history.csv")
        ckpt = save_decoder_checkpoint(
            out / "checkpoint.zip", model,
            backbone=source.to_dict(),
            backbone_digests=source.digests(),
            backbone_checksums=after,
            train_config=config.to_dict(),
            train_config_hash=config.digest(),
            run_config_hash=run_config_hash,
            optimizer={"name": "adam", "betas": list(config.adam_betas), "eps": config.adam_eps},
            epochs=len(history),
            final_lr=state.current_lr,
        )
    return TrainResult(ckpt, history, model, state)


# --- image-level probe ------------------------------------------------------

def _probe_labels(manifest: DatasetManifest) -> torch.Tensor:
    y = torch.tensor([1.0 if s.is_fake else 0.0 for s in manifest.samples])
    if len(y) == 0:
        raise ValidationError("manifest is empty")
    if y.min() == y.max():
        raise ValidationError("degenerate labels: the probe needs both real and fake images")
    return y


def fit_linear_probe(features: torch.Tensor, labels: torch.Tensor, config: TrainConfig,
                     val: Optional[tuple[torch.Tensor, torch.Tensor]] = None):
    """Logistic regression on fixed embeddings with the shared schedule."""
    labels = labels.float()
    if labels.min() == labels.max():
        raise ValidationError("degenerate labels: the probe needs both real and fake images")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = nn.Linear(features.shape[1], 1)
    vx, vy = val if val is not None else (features, labels)

    def step(idx):
        return pixel_bce_loss(head(features[idx])[:, 0], labels[idx])

    def evaluate():
        with torch.no_grad():
            return pixel_bce_loss(head(vx)[:, 0], vy.float()).item()

    history, state = _fit(head, head.parameters(), step, evaluate, len(features), config)
    return head, history, state


def train_cls_probe(
    spec: BackboneSpec,
    manifest: DatasetManifest,
    config: TrainConfig,
    val_manifest: Optional[DatasetManifest] = None,
    out_dir: Optional[PathLike] = None,
    run_config_hash: Optional[str] = None,
) -> TrainResult:
    """Linear real/fake classifier on the backbone's global embedding."""
    y = _probe_labels(manifest)
    from .backbone import load_backbone

    backbone = load_backbone(spec)
    before = backbone.checksum()
    x = image_embeddings([s.image_path for s in manifest.samples], spec)
    val = None
    if val_manifest is not None:
        val = (image_embeddings([s.image_path for s in val_manifest.samples], spec), _probe_labels(val_manifest))
    head, history, state = fit_linear_probe(x, y, config, val)
    if backbone.checksum() != before:
        raise TrainingError("backbone weights changed during probe training")
    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        write_history(history, out / "history.csv")
        ckpt = save_archive(out / "checkpoint.zip", head.state_dict(), {
            "kind": "probe",
            "input_dim": x.shape[1],
            "backbone": [spec.to_dict()],
            "backbone_digests": [backbone.digest],
            "train_config": config.to_dict(),
            "train_config_hash": config.digest(),
            "run_config_hash": run_config_hash,
            "epochs": len(history),
        })
    return TrainResult(ckpt, history, head, state)
