"""Figures and tables: cross-generator heatmaps, ID/OOD bars, layer sweeps,
decoder tables and qualitative mask overlays."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402

from .data import PathLike, PredictionMap, ValidationError  # noqa: E402
from .decoder import DecoderSpec, count_parameters  # noqa: E402
from .metrics import CrossGenMatrix, aggregate_id_ood  # noqa: E402

OVERLAY_COLOR = np.array([255, 0, 0], dtype=np.float64)
OVERLAY_ALPHA = 0.45


def plot_cross_matrix(matrix: CrossGenMatrix, path: PathLike, title: Optional[str] = None) -> list[str]:
    """Heatmap of train (rows) x test (columns) IoU with the value in every cell.

    Returns the cell annotations in row-major order.
    """
    g = len(matrix.generators)
    fig, ax = plt.subplots(figsize=(1.2 * g + 2.0, 1.1 * g + 1.6))
    ax.imshow(matrix.values, cmap="viridis", vmin=0, vmax=100)
    labels = []
    for i in range(g):
        for j in range(g):
            text = f"{matrix.values[i, j]:.1f}"
            labels.append(text)
            color = "white" if matrix.values[i, j] < 50 else "black"
            ax.text(j, i, text, ha="center", va="center", color=color, fontsize=11)
    ax.set_xticks(range(g), matrix.generators)
    ax.set_yticks(range(g), matrix.generators)
    ax.set_xlabel("test")
    ax.set_ylabel("train")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return labels


def plot_id_ood(summaries: dict, path: PathLike) -> None:
    """Grouped ID/OOD bars, one group per method or run."""
    names = list(summaries)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(3.0, 1.4 * len(names) + 1.5), 3.2))
    ids = [summaries[n].id_iou for n in names]
    oods = [summaries[n].ood_iou for n in names]
    ax.bar(x - 0.2, ids, 0.4, label="ID", color="tab:orange")
    ax.bar(x + 0.2, oods, 0.4, label="OOD", color="tab:blue")
    for xi, (a, b) in enumerate(zip(ids, oods)):
        ax.text(xi - 0.2, a + 1, f"{a:.1f}", ha="center", fontsize=8)
        ax.text(xi + 0.2, b + 1, f"{b:.1f}", ha="center", fontsize=8)
    ax.set_xticks(x, names)
    ax.set_ylim(0, 100)
    ax.set_ylabel("IoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_sweep_csv(path: PathLike) -> list[dict]:
    """Rows of ``name,id_iou,ood_iou`` (optionally ``backbone``)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"sweep file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"name", "id_iou", "ood_iou"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: sweep CSV needs columns name,id_iou,ood_iou")
        try:
            return [{**r, "id_iou": float(r["id_iou"]), "ood_iou": float(r["ood_iou"])} for r in reader]
        except ValueError as exc:
            raise ValidationError(f"{path}: non-numeric IoU ({exc})") from exc


def plot_sweep(rows: Sequence[dict], path: PathLike, xlabel: str = "layer") -> None:
    """ID (dashed) and OOD (solid) IoU along a sweep, e.g. over backbone layers."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r.get("backbone") or "", []).append(r)
    fig, axes = plt.subplots(1, len(groups), figsize=(4.0 * len(groups), 3.2), squeeze=False)
    for ax, (name, rs) in zip(axes[0], groups.items()):
        xs = [r["name"] for r in rs]
        ax.plot(xs, [r["id_iou"] for r in rs], "--o", color="tab:orange", label="ID")
        ax.plot(xs, [r["ood_iou"] for r in rs], "-o", color="tab:blue", label="OOD")
        ax.set_title(name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("IoU (%)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def markdown_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join(str(c) for c in r) + " |")
    return "\n".join(lines) + "\n"


def decoder_table(rows: Sequence[dict], input_dim: int = 1024) -> str:
    """Decoder ablation table; parameter counts are computed, not read."""
    out = []
    for r in rows:
        n = count_parameters(DecoderSpec.named(r["name"], input_dim))
        out.append([r["name"], f"{n / 1e6:.1f}M" if n >= 1e5 else f"{n:,}", f"{r['id_iou']:.1f}", f"{r['ood_iou']:.1f}"])
    return markdown_table(["decoder", "params", "ID", "OOD"], out)


def matrix_table(matrix: CrossGenMatrix) -> str:
    rows = [[g, *(f"{v:.1f}" for v in row)] for g, row in zip(matrix.generators, matrix.values)]
    text = markdown_table(["train \\ test", *matrix.generators], rows)
    if len(matrix.generators) >= 2:
        s = aggregate_id_ood(matrix)
        text += f"\nID IoU {s.id_iou:.1f} / OOD IoU {s.ood_iou:.1f}\n"
    return text


# --- qualitative overlays ---------------------------------------------------

def overlay(image: np.ndarray, pred: PredictionMap, threshold: float = 0.5) -> np.ndarray:
    """Tint predicted-positive pixels and draw their inner contour in solid red.

    Only pixels with ``pred > threshold`` change, and every one of them does
    unless the input pixel is already pure red.
    """
    base = np.asarray(image, dtype=np.uint8)
    if base.shape[:2] != pred.shape:
        raise ValidationError(f"image {base.shape[:2]} and prediction {pred.shape} sizes differ")
    positive = pred.values > threshold
    interior = ndimage.binary_erosion(positive, structure=np.ones((3, 3)), border_value=0)
    contour = positive & ~interior
    out = base.astype(np.float64)
    out[interior] = (1 - OVERLAY_ALPHA) * out[interior] + OVERLAY_ALPHA * OVERLAY_COLOR
    out[contour] = OVERLAY_COLOR
    out = np.round(out).astype(np.uint8)
    # a tint that rounds back to the original colour would hide the pixel
    same = interior & np.all(out == base, axis=-1)
    out[same] = OVERLAY_COLOR.astype(np.uint8)
    return out
