"""Small synthetic inpainting datasets for smoke tests and demos.

Each fake image is a smooth random background whose masked region is
replaced by differently-textured content, a crude stand-in for a
generator's local fingerprint.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import MaskGrid, PathLike, Sample, save_mask, save_rgb, write_manifest


def smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        a, b, p, q = rng.uniform(0.5, 3.0, 4)
        img[..., c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * xx + p)) * np.cos(2 * np.pi * (b * yy + q))
    return np.clip(img * 255, 0, 255).astype(np.uint8)


def random_blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """Axis-aligned ellipse covering roughly 5-25% of the image."""
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    ry, rx = rng.uniform(0.15, 0.3, 2) * size
    yy, xx = np.mgrid[0:size, 0:size]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.uint8)


def textured_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(60, 200, 3)
    noise = rng.normal(0, 40, (size, size, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def make_toy_dataset(out_dir: PathLike, n_fake: int = 8, n_real: int = 0, size: int = 256,
                     seed: int = 0, generator: str = "toy", split: str = "train") -> Path:
    """Write images, masks and ``manifest.jsonl`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_fake):
        bg = smooth_background(rng, size)
        mask = random_blob_mask(rng, size)
        img = np.where(mask[..., None] == 1, textured_patch(rng, size), bg)
        ip = save_rgb(img, out / "images" / f"fake_{i:03d}.png")
        mp = save_mask(MaskGrid(mask), out / "masks" / f"fake_{i:03d}.png")
        samples.append(Sample(ip.resolve(), "fake", generator, split, mp.resolve()))
    for i in range(n_real):
        ip = save_rgb(smooth_background(rng, size), out / "images" / f"real_{i:03d}.png")
        samples.append(Sample(ip.resolve(), "real", generator, split))
    return write_manifest(samples, out / "manifest.jsonl")
