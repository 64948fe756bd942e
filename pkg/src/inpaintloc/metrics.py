"""Localization IoU, cross-generator matrices and image-level average precision."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .data import (
    DatasetManifest,
    DimensionMismatchError,
    MaskGrid,
    PathLike,
    PredictionMap,
    ValidationError,
    sample_mask,
)

THRESHOLD = 0.5


def _pred_array(pred) -> np.ndarray:
    if isinstance(pred, (PredictionMap, MaskGrid)):
        return pred.values
    return np.asarray(pred)


def iou(pred, gt, threshold: float = THRESHOLD) -> float:
    """IoU between ``pred > threshold`` and a binary ground truth.

    Two empty masks score 1.0.
    """
    p = _pred_array(pred) > threshold
    g = _pred_array(gt).astype(bool)
    if p.shape != g.shape:
        raise DimensionMismatchError(f"prediction {p.shape} and mask {g.shape} differ in size")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def dataset_iou(predictions: Mapping, manifest: DatasetManifest, threshold: float = THRESHOLD,
                binarize: bool = False) -> float:
    """Mean per-image IoU over the manifest's fake samples, in percent.

    ``predictions`` maps image paths to prediction maps; ground truth is
    resized (nearest) to each prediction's resolution.
    """
    scores = per_image_iou(predictions, manifest, threshold, binarize)
    return 100.0 * float(np.mean(list(scores.values())))


def per_image_iou(predictions: Mapping, manifest: DatasetManifest, threshold: float = THRESHOLD,
                  binarize: bool = False) -> dict:
    fakes = manifest.fakes()
    if not fakes:
        raise ValidationError(f"manifest {manifest.name!r} has no fake samples to evaluate")
    preds = {Path(k): v for k, v in predictions.items()}
    out = {}
    for s in fakes:
        if s.image_path not in preds:
            raise ValidationError(f"missing prediction for {s.image_path}")
        pred = preds[s.image_path]
        gt = sample_mask(s, _pred_array(pred).shape, binarize=binarize)
        out[s.image_path] = iou(pred, gt, threshold)
    return out


@dataclass(frozen=True)
class CrossGenMatrix:
    """IoU (percent) of a model trained on generator i and tested on generator j."""

    generators: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        g = tuple(self.generators)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"cross-generator matrix must be square, got {v.shape}")
        if v.shape[0] != len(g):
            raise ValidationError("matrix size does not match the generator list")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 100:
            raise ValidationError("matrix entries must be IoU percentages in [0, 100]")
        object.__setattr__(self, "generators", g)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class IdOodSummary:
    id_iou: float
    ood_iou: float

    def to_dict(self) -> dict:
        return {"id_iou": self.id_iou, "ood_iou": self.ood_iou}


def aggregate_id_ood(matrix) -> IdOodSummary:
    """Diagonal (in-domain) and off-diagonal (out-of-domain) means."""
    v = matrix.values if isinstance(matrix, CrossGenMatrix) else np.asarray(matrix, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {v.shape}")
    g = v.shape[0]
    if g < 2:
        raise ValidationError("ID/OOD aggregation needs at least two generators")
    off = ~np.eye(g, dtype=bool)
    return IdOodSummary(float(np.mean(np.diag(v))), float(np.mean(v[off])))


def _binary_labels(labels) -> np.ndarray:
    out = []
    for y in labels:
        if isinstance(y, str):
            if y not in ("real", "fake"):
                raise ValidationError(f"label must be 'real' or 'fake', got {y!r}")
            out.append(y == "fake")
        else:
            out.append(bool(y))
    return np.asarray(out, dtype=bool)


def average_precision(scores: Sequence[float], labels: Sequence) -> float:
    """Area under the precision-recall curve, fakes as positives.

    Step-wise sum over distinct score thresholds, highest first:
    AP = sum_k (R_k - R_{k-1}) * P_k. Tied scores enter together.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D sequences")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValidationError("degenerate labels: need at least one real and one fake")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[cut]
    precision = tp / (cut + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


Predictor = Callable[[DatasetManifest], Mapping]


def build_cross_matrix(
    models: Mapping[str, Union[Predictor, PathLike]],
    manifests: Mapping[str, DatasetManifest],
    threshold: float = THRESHOLD,
    workers: int = 1,
    loader: Optional[Callable[[PathLike], Predictor]] = None,
) -> CrossGenMatrix:
    """Evaluate every (train generator, test generator) pair.

    ``models`` maps a training generator to a predictor (a callable taking
    a manifest and returning {image_path: PredictionMap}) or to a checkpoint
    path, which ``loader`` turns into a predictor. Rows follow the order of
    ``models``; columns follow the same generator order.
    """
    gens = list(models)
    missing = [g for g in gens if g not in manifests]
    if missing:
        raise ValidationError(f"no test manifest for generator(s) {missing}")
    if not gens:
        raise ValidationError("no models given")
    if loader is None:
        from .inference import Localizer

        loader = Localizer.from_checkpoint
    predictors = {}
    for g, m in models.items():
        if callable(m):
            predictors[g] = m
        else:
            if not Path(m).is_file():
                raise ValidationError(f"checkpoint for {g!r} not found: {m}")
            predictors[g] = loader(m)

    cells = [(i, j) for i in range(len(gens)) for j in range(len(gens))]

    def run(cell):
        i, j = cell
        preds = predictors[gens[i]](manifests[gens[j]])
        return dataset_iou(preds, manifests[gens[j]], threshold)

    values = np.zeros((len(gens), len(gens)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    for (i, j), v in zip(cells, results):
        values[i, j] = v
    return CrossGenMatrix(tuple(gens), values)


# --- files ------------------------------------------------------------------

def write_matrix_csv(matrix: CrossGenMatrix, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train\\test", *matrix.generators])
        for g, row in zip(matrix.generators, matrix.values):
            w.writerow([g, *(f"{v:.4f}" for v in row)])
    return path


def read_matrix_csv(path: PathLike) -> CrossGenMatrix:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"matrix file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ValidationError(f"{path}: matrix CSV needs a header row and at least one data row")
    cols = rows[0][1:]
    names, values = [], []
    for r in rows[1:]:
        if len(r) != len(cols) + 1:
            raise ValidationError(f"{path}: ragged row {r}")
        names.append(r[0])
        try:
            values.append([float(x) for x in r[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: non-numeric entry ({exc})") from exc
    if names != cols:
        raise ValidationError(f"{path}: row generators {names} do not match columns {cols}")
    return CrossGenMatrix(tuple(names), np.array(values))


def write_summary_json(summary: IdOodSummary, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return path
