"""Protective perturbations: sign-gradient PGD on the noise-prediction loss and its
EoT, adaptive (through purification) and bi-level (surrogate retraining) variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    AffineDenoiser,
    DenoiserBackend,
    NoiseSchedule,
    PurifyChain,
    _check_t_range,
    _require_gradients,
    draw_noise,
    loss_and_grad,
    train_affine,
)
from .imagecore import RngState, as_image, sample_gaussian
from .transforms import DEFAULT_EOT, parse_transform

ParamGroups = dict[str, list[np.ndarray]]


@dataclass(frozen=True)
class AttackConfig:
    budget: float = 8 / 255
    step: float = 2 / 255
    n_steps: int = 100
    n_mc: int = 4
    eot_transforms: tuple[str, ...] = DEFAULT_EOT
    adaptive_p: float = 0.2
    purify_chain: tuple[int, int] | None = None  # (t_pure, substeps)
    seed: int = 0
    t_range: tuple[int, int] | None = None
    random_start: bool = False

    def __post_init__(self):
        if not 0.0 < self.step <= self.budget < 1.0:
            raise ValueError(f"need 0 < step <= budget < 1, got step={self.step}, budget={self.budget}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if not 0.0 <= self.adaptive_p <= 1.0:
            raise ValueError(f"adaptive_p must lie in [0, 1], got {self.adaptive_p}")


@dataclass
class AttackTrace:
    """Per-run bookkeeping filled in by the attack loops."""

    steps: int = 0
    chained_steps: int = 0
    losses: list[float] = field(default_factory=list)


GradFn = Callable[[int, np.ndarray], tuple[float, np.ndarray]]


def _pgd_loop(
    x: np.ndarray,
    cfg: AttackConfig,
    rng: RngState,
    grad_fn: GradFn,
    trace: AttackTrace | None,
    delta: np.ndarray | None = None,
) -> np.ndarray:
    if delta is None:
        if cfg.random_start:
            delta = rng.child("start").generator().uniform(-cfg.budget, cfg.budget, x.shape)
            delta = np.clip(x + delta, 0.0, 1.0) - x
        else:
            delta = np.zeros_like(x)
    for i in range(cfg.n_steps):
        loss, grad = grad_fn(i, x + delta)
        delta = np.clip(delta + cfg.step * np.sign(grad), -cfg.budget, cfg.budget)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        if trace is not None:
            trace.steps += 1
            trace.losses.append(loss)
    return np.clip(x + delta, 0.0, 1.0)


def _draws(cfg: AttackConfig, sched: NoiseSchedule, rng: RngState, i: int, shape):
    return draw_noise(rng.child("step", i), cfg.n_mc, shape, _check_t_range(sched, cfg.t_range))


def pgd_attack(
    x: np.ndarray,
    cfg: AttackConfig,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState | None = None,
    trace: AttackTrace | None = None,
    init: np.ndarray | None = None,
) -> np.ndarray:
    """Maximize the noise-prediction loss within an l-inf ball of radius ``budget``.

    ``init`` resumes from an existing perturbation (used by the bi-level attack).
    """
    _require_gradients(backend)
    x = as_image(x)
    rng = RngState(cfg.seed) if rng is None else rng

    def grad_fn(i, adv):
        ts, eps = _draws(cfg, sched, rng, i, x.shape)
        return loss_and_grad(backend, adv, ts, eps, sched)

    delta = None if init is None else np.asarray(init, dtype=np.float64) - x
    return _pgd_loop(x, cfg, rng, grad_fn, trace, delta)


def eot_attack(
    x: np.ndarray,
    cfg: AttackConfig,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState | None = None,
    trace: AttackTrace | None = None,
) -> np.ndarray:
    """PGD where every Monte Carlo draw passes ``x + delta`` through a random transform."""
    _require_gradients(backend)
    transforms = [parse_transform(s) for s in cfg.eot_transforms]
    if not transforms:
        raise ValueError("eot_transforms must not be empty")
    x = as_image(x)
    rng = RngState(cfg.seed) if rng is None else rng

    def grad_fn(i, adv):
        ts, eps = _draws(cfg, sched, rng, i, x.shape)
        gen = rng.child("eot", i).generator()
        picks = gen.integers(len(transforms), size=cfg.n_mc)
        fns = [transforms[k].sample(gen, x.shape) for k in picks]
        return loss_and_grad(backend, adv, ts, eps, sched, transforms=fns)

    return _pgd_loop(x, cfg, rng, grad_fn, trace)


def adaptive_attack(
    x: np.ndarray,
    cfg: AttackConfig,
    backend: DenoiserBackend,
    sched: NoiseSchedule,
    rng: RngState | None = None,
    trace: AttackTrace | None = None,
) -> np.ndarray:
    """PGD that, with probability ``adaptive_p`` per step, differentiates through
    forward diffusion and DDIM (``purify_chain``); otherwise it takes the plain gradient.
    """
    if cfg.purify_chain is None:
        raise ValueError("adaptive_attack needs cfg.purify_chain = (t_pure, substeps)")
    _require_gradients(backend)
    t_pure, substeps = cfg.purify_chain
    sched.check_t(t_pure)
    x = as_image(x)
    rng = RngState(cfg.seed) if rng is None else rng

    def grad_fn(i, adv):
        ts, eps = _draws(cfg, sched, rng, i, x.shape)
        chain = None
        if rng.child("adaptive", i).generator().random() < cfg.adaptive_p:
            chain = PurifyChain(t_pure, substeps, sample_gaussian(rng.child("purify", i), x.shape))
            if trace is not None:
                trace.chained_steps += 1
        return loss_and_grad(backend, adv, ts, eps, sched, chain)

    return _pgd_loop(x, cfg, rng, grad_fn, trace)


def antidb_attack(
    images: Sequence[np.ndarray],
    cfg: AttackConfig,
    inner_steps: int,
    alternations: int,
    sched: NoiseSchedule,
    rng: RngState | None = None,
    backend: AffineDenoiser | None = None,
    lr: float = 0.2,
) -> tuple[list[np.ndarray], AffineDenoiser]:
    """Alternate surrogate training on the perturbed set with one PGD epoch per image.

    The surrogate is an affine denoiser over the attack's timestep range,
    starting from zeros unless ``backend`` is given.
    """
    if alternations < 1:
        raise ValueError("alternations must be >= 1")
    images = [as_image(im) for im in images]
    if not images:
        raise ValueError("need at least one image")
    rng = RngState(cfg.seed) if rng is None else rng
    if backend is None:
        lo, hi = _check_t_range(sched, cfg.t_range)
        backend = AffineDenoiser.zeros(images[0].shape, range(lo, hi + 1))
    perturbed = list(images)
    for k in range(alternations):
        backend = train_affine(backend, perturbed, inner_steps, lr, rng.child("train", k), sched)
        perturbed = [
            pgd_attack(x, cfg, backend, sched, rng.child("image", j, "alt", k), init=p)
            for j, (x, p) in enumerate(zip(images, perturbed))
        ]
    return perturbed, backend


def param_rel_diff(clean: ParamGroups, adv: ParamGroups) -> list[tuple[str, float]]:
    """Per group, the mean over tensors of ``||adv - clean|| / ||clean||``."""
    if set(clean) != set(adv):
        raise ValueError("parameter groups differ between models")
    out = []
    for name, tensors in clean.items():
        others = adv[name]
        if len(tensors) != len(others):
            raise ValueError(f"group {name!r}: tensor count differs")
        ratios = []
        for c, a in zip(tensors, others):
            c, a = np.asarray(c, dtype=np.float64), np.asarray(a, dtype=np.float64)
            if c.shape != a.shape:
                raise ValueError(f"group {name!r}: shape mismatch {c.shape} vs {a.shape}")
            norm = np.linalg.norm(c.ravel())
            if norm == 0.0:
                raise ValueError(f"undefined relative difference: group {name!r} has zero norm")
            ratios.append(np.linalg.norm((a - c).ravel()) / norm)
        out.append((name, float(np.mean(ratios))))
    return out
