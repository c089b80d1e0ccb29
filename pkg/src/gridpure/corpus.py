"""Synthetic desk-scale corpus for the oracle denoiser.

The oracle's data distribution is a set of smooth *centre* images, each with a
few *siblings* that differ only in fine texture. Sibling texture is resolvable
by the posterior at small timesteps but washed out around t = 100, which is
what separates small-step iterative purification from one large DiffPure step.
Clean corpus images are the centres plus light sensor-like noise, so they sit
slightly off the data manifold and carry a small nonzero loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imagecore import RngState, save_image


@dataclass
class Corpus:
    centres: list[np.ndarray]
    dataset: list[np.ndarray]
    clean: list[np.ndarray]
    owner: list[int] = field(default_factory=list)  # dataset index -> centre index


def smooth_image(gen: np.random.Generator, size: int, channels: int = 3, scale: float | None = None) -> np.ndarray:
    """Low-frequency random field rescaled into ``[0.15, 0.85]``."""
    scale = size / 6 if scale is None else scale
    base = gaussian_filter(gen.standard_normal((size, size)), scale, mode="wrap")
    tint = gaussian_filter(gen.standard_normal((size, size, channels)), (scale, scale, 0), mode="wrap")
    img = base[:, :, None] + 0.5 * tint
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.15 + 0.7 * img


def make_corpus(
    n_images: int = 16,
    size: int = 32,
    channels: int = 3,
    siblings: int = 4,
    sibling_std: float = 0.008,
    clean_noise: float = 0.005,
    seed: int = 0,
) -> Corpus:
    rng = RngState(seed)
    centres, dataset, clean, owner = [], [], [], []
    for i in range(n_images):
        gen = rng.child("corpus", i).generator()
        c = smooth_image(gen, size, channels)
        centres.append(c)
        dataset.append(c)
        owner.append(i)
        for _ in range(siblings):
            dataset.append(np.clip(c + sibling_std * gen.standard_normal(c.shape), 0.0, 1.0))
            owner.append(i)
        clean.append(np.clip(c + clean_noise * gen.standard_normal(c.shape), 0.0, 1.0))
    return Corpus(centres, dataset, clean, owner)


def write_corpus(corpus: Corpus, out_dir) -> tuple[Path, Path]:
    """Write ``<out>/dataset/*.png`` (oracle manifold) and ``<out>/clean/*.png``."""
    out = Path(out_dir)
    ds, cl = out / "dataset", out / "clean"
    ds.mkdir(parents=True, exist_ok=True)
    cl.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(corpus.dataset):
        save_image(img, ds / f"d{k:04d}.png")
    for k, img in enumerate(corpus.clean):
        save_image(img, cl / f"img{k:03d}.png")
    return ds, cl
