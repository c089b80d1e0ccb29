"""DiffPure, grid diffusion-based purification (GDP) and GrIDPure.

GrIDPure repeats GDP ``iterations`` times and blends each result with its
input: ``x_{m+1} = (1 - gamma) * gdp(x_m) + gamma * x_m``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import DenoiserBackend, NoiseSchedule, ddim_reverse, forward_diffuse
from .gridgeom import GridPlan, crop_all, merge_tiles, plan_grids
from .imagecore import RngState, as_image, sample_gaussian


@dataclass(frozen=True)
class PurifyConfig:
    t_pure: int = 10
    substeps: int = 10
    iterations: int = 10
    gamma: float = 0.1
    grid_size: int = 256
    with_corner: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 1 <= self.substeps <= self.t_pure:
            raise ValueError(f"need 1 <= substeps <= t_pure, got {self.substeps} / {self.t_pure}")
        if self.grid_size <= 0 or self.grid_size % 2:
            raise ValueError(f"grid_size must be positive and even, got {self.grid_size}")


def diffpure(
    x: np.ndarray,
    t_pure: int,
    substeps: int,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState,
) -> np.ndarray:
    """Noise ``x`` to ``t_pure`` with fresh Gaussian noise, then DDIM back to 0."""
    x = as_image(x)
    sched.check_t(t_pure)
    x_t = forward_diffuse(x, t_pure, sample_gaussian(rng, x.shape), sched)
    return ddim_reverse(x_t, t_pure, substeps, backend, sched)


TileFn = Callable[[int, np.ndarray], np.ndarray]


def gdp_with(
    x: np.ndarray,
    plan: GridPlan,
    purify_tile: TileFn,
    order: Sequence[int] | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Crop, purify each tile with ``purify_tile(index, tile)``, merge, clamp.

    Tiles may be processed in any ``order`` or concurrently; the merge always
    sums in plan order.
    """
    tiles = crop_all(x, plan)
    order = list(range(len(tiles))) if order is None else list(order)
    if sorted(order) != list(range(len(tiles))):
        raise ValueError("order must be a permutation of tile indices")
    out: list[np.ndarray | None] = [None] * len(tiles)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {k: pool.submit(purify_tile, k, tiles[k]) for k in order}
            for k, fut in futures.items():
                out[k] = fut.result()
    else:
        for k in order:
            out[k] = purify_tile(k, tiles[k])
    return np.clip(merge_tiles(plan, out), 0.0, 1.0)


def gdp(
    x: np.ndarray,
    cfg: PurifyConfig,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState,
    order: Sequence[int] | None = None,
    workers: int = 1,
) -> np.ndarray:
    """One GDP pass; tile ``k`` draws its noise from ``rng.child("tile", k)``."""
    x = as_image(x)
    plan = plan_grids(x.shape[0], x.shape[1], cfg.grid_size, cfg.with_corner)

    def purify_tile(k: int, tile: np.ndarray) -> np.ndarray:
        return diffpure(tile, cfg.t_pure, cfg.substeps, backend, sched, rng.child("tile", k))

    return gdp_with(x, plan, purify_tile, order=order, workers=workers)


def blend(purified: np.ndarray, previous: np.ndarray, gamma: float) -> np.ndarray:
    return (1.0 - gamma) * purified + gamma * previous


def gridpure(
    x_a: np.ndarray,
    cfg: PurifyConfig,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState | None = None,
    workers: int = 1,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Iterated GDP with blending. ``rng`` defaults to ``RngState(cfg.seed)``.

    ``callback(m, x_{m+1})`` is called after every iteration.
    """
    rng = RngState(cfg.seed) if rng is None else rng
    x = as_image(x_a)
    for m in range(cfg.iterations):
        purified = gdp(x, cfg, backend, sched, rng.child("iter", m), workers=workers)
        x = blend(purified, x, cfg.gamma)
        if callback is not None:
            callback(m, x)
    return x
