"""Running trained checkpoints: pixel maps from decoders, scores from probes."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import (
    BackboneSpec,
    ChecksumMismatchError,
    FeatureCache,
    FeatureSource,
    image_embeddings,
    image_features,
)
from .data import DatasetManifest, PathLike, PredictionMap, ValidationError
from .decoder import load_archive, load_decoder_checkpoint


def _source_from_meta(meta: dict) -> FeatureSource:
    source = FeatureSource([BackboneSpec.from_dict(d) for d in meta["backbone"]])
    recorded = meta.get("backbone_digests")
    if recorded is not None and source.digests() != recorded:
        raise ChecksumMismatchError(
            f"backbone weights differ from those used in training: {source.digests()} != {recorded}"
        )
    return source


class Localizer:
    """Frozen backbone + trained decoder, producing probability maps."""

    def __init__(self, model, source: FeatureSource, cache: Optional[FeatureCache] = None,
                 batch_size: int = 8, meta: Optional[dict] = None):
        self.model = model.eval()
        self.source = source
        self.cache = cache
        self.batch_size = batch_size
        self.meta = meta or {}

    @classmethod
    def from_checkpoint(cls, path: PathLike, cache: Optional[FeatureCache] = None, batch_size: int = 8):
        model, meta = load_decoder_checkpoint(path)
        return cls(model, _source_from_meta(meta), cache, batch_size, meta)

    @torch.no_grad()
    def predict_features(self, feats: torch.Tensor) -> np.ndarray:
        return torch.sigmoid(self.model(feats))[:, 0].numpy()

    def predict_paths(self, paths: Sequence[PathLike]) -> list[PredictionMap]:
        out = []
        for start in range(0, len(paths), self.batch_size):
            chunk = list(paths[start:start + self.batch_size])
            feats = image_features(chunk, self.source, self.cache, self.batch_size)
            out.extend(PredictionMap(p) for p in self.predict_features(feats))
        return out

    def __call__(self, manifest: DatasetManifest) -> dict:
        samples = manifest.fakes() or list(manifest.samples)
        paths = [s.image_path for s in samples]
        return dict(zip(paths, self.predict_paths(paths)))


class ProbeScorer:
    """Image-level fake probability from a linear probe checkpoint."""

    def __init__(self, head: torch.nn.Linear, spec: BackboneSpec):
        self.head = head.eval()
        self.spec = spec

    @classmethod
    def from_checkpoint(cls, path: PathLike) -> "ProbeScorer":
        state, meta = load_archive(path)
        if meta.get("kind") != "probe":
            raise ValidationError(f"{path} does not hold an image-level probe")
        source = _source_from_meta(meta)
        head = torch.nn.Linear(meta["input_dim"], 1)
        head.load_state_dict(state)
        return cls(head, source.specs[0])

    @torch.no_grad()
    def scores(self, paths: Sequence[PathLike]) -> np.ndarray:
        emb = image_embeddings(list(paths), self.spec)
        return torch.sigmoid(self.head(emb)[:, 0]).numpy()
