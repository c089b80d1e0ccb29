"""Noise schedule, forward diffusion, DDIM sampling and the epsilon-prediction loss.

Three denoiser backends implement one contract, ``eps(x_t, t, sched)`` on a
batch of float64 tensors shaped ``(B, H, W, C)``:

* :class:`OracleDenoiser` - exact posterior-mean noise predictor for a finite
  set of images. Differentiable, no weights needed.
* :class:`AffineDenoiser` - per-timestep, per-pixel ``a * x_t + b``; trainable.
* :class:`ExternalDenoiser` - a child process speaking tensor frames over
  stdin/stdout. No gradients.

Public helpers accept and return numpy images ``(H, W, C)``.
"""

from __future__ import annotations

import math
import os
import selectors
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .imagecore import FrameError, RngState, as_image, parse_header, write_tensor

DTYPE = torch.float64
DEFAULT_T_FRACTION = 0.1


class BackendError(RuntimeError):
    """A denoiser backend failed to produce a prediction."""


class GradientUnavailableError(TypeError):
    """Raised when a gradient is requested through a black-box backend."""


# --------------------------------------------------------------------------- #
# schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T_total: int
    beta: np.ndarray  # beta[t - 1] for t in 1..T_total
    alpha_bar: np.ndarray  # alpha_bar[t] for t in 0..T_total, alpha_bar[0] == 1

    def check_t(self, t: int, *, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T_total:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T_total}]")
        return t

    def coeffs(self, t) -> tuple[float, float]:
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` for a scalar ``t``."""
        ab = float(self.alpha_bar[int(t)])
        return math.sqrt(ab), math.sqrt(1.0 - ab)


def build_schedule(T_total: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule."""
    if T_total < 1:
        raise ValueError(f"T_total must be >= 1, got {T_total}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid beta range: need 0 < {beta_start} <= {beta_end} < 1")
    if T_total == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T_total, dtype=np.float64) / (T_total - 1)
        beta = beta_start + steps * (beta_end - beta_start)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T_total, beta, alpha_bar)


def default_t_range(sched: NoiseSchedule) -> tuple[int, int]:
    return 1, max(1, int(sched.T_total * DEFAULT_T_FRACTION))


def _coef_tensor(sched: NoiseSchedule, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ab = torch.as_tensor(sched.alpha_bar, dtype=DTYPE)[t]
    shape = (-1, 1, 1, 1)
    return ab.sqrt().reshape(shape), (1.0 - ab).sqrt().reshape(shape)


def _t_batch(t, batch: int) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.ndim == 0:
        tt = tt.expand(batch)
    if tt.shape != (batch,):
        raise ValueError(f"timestep batch shape {tuple(tt.shape)} does not match batch {batch}")
    return tt


# --------------------------------------------------------------------------- #
# backends


class DenoiserBackend:
    """Noise predictor contract. Subclasses implement :meth:`eps`."""

    differentiable = False
    kind = "abstract"

    def eps(self, x_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
        raise NotImplementedError

    def close(self) -> None:
        pass


class OracleDenoiser(DenoiserBackend):
    """Posterior-mean noise predictor for the uniform distribution over ``dataset``.

    With ``x_t = s x_0 + sigma eps`` the posterior over dataset members is a
    softmax of ``-||x_t - s x_i||^2 / (2 sigma^2)`` and the prediction is
    ``(x_t - s E[x_0 | x_t]) / sigma``.
    """

    differentiable = True
    kind = "oracle"

    def __init__(self, dataset: Sequence[np.ndarray] | np.ndarray):
        images = [as_image(im) for im in dataset]
        if not images:
            raise ValueError("oracle dataset must not be empty")
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ValueError("oracle dataset images must share one shape")
        self.images = np.stack(images)
        self.data = torch.as_tensor(self.images, dtype=DTYPE)
        self.shape = shape

    @classmethod
    def from_dir(cls, path) -> "OracleDenoiser":
        from .imagecore import load_image

        files = sorted(Path(path).glob("*.png"))
        if not files:
            raise ValueError(f"no PNG images in oracle directory {path}")
        return cls([load_image(f) for f in files])

    def weights(self, x_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
        if tuple(x_t.shape[1:]) != self.shape:
            raise BackendError(f"oracle expects images of shape {self.shape}, got {tuple(x_t.shape[1:])}")
        tt = _t_batch(t, x_t.shape[0])
        s, sigma = _coef_tensor(sched, tt)
        # chunk over the dataset to bound the (B, N, H, W, C) intermediate
        chunk = max(1, (1 << 22) // max(1, x_t.shape[0] * x_t[0].numel()))
        d2 = []
        for lo in range(0, self.data.shape[0], chunk):
            diff = x_t[:, None] - s[:, None] * self.data[None, lo : lo + chunk]
            d2.append(diff.pow(2).sum(dim=(2, 3, 4)))
        d2 = torch.cat(d2, dim=1)
        logits = -d2 / (2.0 * sigma.reshape(-1, 1) ** 2)
        return torch.softmax(logits, dim=1)

    def eps(self, x_t, t, sched):
        tt = _t_batch(t, x_t.shape[0])
        s, sigma = _coef_tensor(sched, tt)
        w = self.weights(x_t, tt, sched)
        mean = torch.einsum("bn,nhwc->bhwc", w, self.data)
        return (x_t - s * mean) / sigma


class AffineDenoiser(DenoiserBackend):
    """``eps_hat = a[t] * x_t + b[t]`` with per-pixel ``a``, ``b`` for each supported ``t``."""

    differentiable = True
    kind = "affine"

    def __init__(self, a: np.ndarray, b: np.ndarray, timesteps: Sequence[int]):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        timesteps = tuple(int(t) for t in timesteps)
        if a.shape != b.shape or a.ndim != 4 or a.shape[0] != len(timesteps):
            raise ValueError(
                f"affine parameters must be (len(timesteps), H, W, C); got a{a.shape}, b{b.shape}"
            )
        if len(set(timesteps)) != len(timesteps):
            raise ValueError("affine timesteps must be unique")
        self.a, self.b = a, b
        self.timesteps = timesteps
        self.shape = a.shape[1:]
        self._index = {t: k for k, t in enumerate(timesteps)}

    @classmethod
    def zeros(cls, shape, timesteps: Sequence[int]) -> "AffineDenoiser":
        shape = tuple(shape)
        a = np.zeros((len(timesteps), *shape))
        return cls(a, a.copy(), timesteps)

    @classmethod
    def load(cls, path) -> "AffineDenoiser":
        with np.load(path) as f:
            return cls(f["a"], f["b"], f["timesteps"].tolist())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, a=self.a, b=self.b, timesteps=np.asarray(self.timesteps, dtype=np.int64))

    def index(self, t: torch.Tensor) -> torch.Tensor:
        try:
            return torch.tensor([self._index[int(v)] for v in t], dtype=torch.long)
        except KeyError as exc:
            raise BackendError(f"timestep {exc.args[0]} outside the affine model's support") from None

    def eps(self, x_t, t, sched, params: tuple[torch.Tensor, torch.Tensor] | None = None):
        if tuple(x_t.shape[1:]) != self.shape:
            raise BackendError(f"affine model expects shape {self.shape}, got {tuple(x_t.shape[1:])}")
        k = self.index(_t_batch(t, x_t.shape[0]))
        a, b = params if params is not None else (
            torch.as_tensor(self.a, dtype=DTYPE),
            torch.as_tensor(self.b, dtype=DTYPE),
        )
        return a[k] * x_t + b[k]

    def param_groups(self, block: int = 10) -> dict[str, list[np.ndarray]]:
        """Group ``a`` and ``b`` by consecutive blocks of ``block`` supported timesteps."""
        groups = {}
        for lo in range(0, len(self.timesteps), block):
            ts = self.timesteps[lo : lo + block]
            groups[f"t{ts[0]:04d}-{ts[-1]:04d}"] = [self.a[lo : lo + block], self.b[lo : lo + block]]
        return groups


class ExternalDenoiser(DenoiserBackend):
    """Spawns ``command`` once and exchanges one tensor frame per prediction.

    Requests are serialized; spawn several instances for parallel tiles.
    """

    kind = "external"

    def __init__(self, command: str, timeout: float = 60.0):
        self.command = command
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()
        self._buf = b""

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self.command),
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                )
            except OSError as exc:
                raise BackendError(f"cannot start external denoiser {self.command!r}: {exc}") from exc
            self._buf = b""
        return self._proc

    def _read(self, n: int | None, deadline: float) -> bytes:
        """Read ``n`` bytes, or through the next newline when ``n`` is None."""
        fd = self._proc.stdout.fileno()
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while True:
                if n is None:
                    cut = self._buf.find(b"\n")
                    if cut >= 0:
                        out, self._buf = self._buf[: cut + 1], self._buf[cut + 1 :]
                        return out
                elif len(self._buf) >= n:
                    out, self._buf = self._buf[:n], self._buf[n:]
                    return out
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    self._kill()
                    raise BackendError(f"external denoiser timed out after {self.timeout:g}s")
                chunk = os.read(fd, 1 << 20)
                if not chunk:
                    code = self._proc.poll()
                    raise BackendError(f"external denoiser exited (code {code}) mid-frame")
                self._buf += chunk

    def _kill(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def predict_one(self, x: np.ndarray, t: int) -> np.ndarray:
        with self._lock:
            proc = self._ensure()
            try:
                write_tensor(x, t, proc.stdin)
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._kill()
                raise BackendError(f"external denoiser closed its input: {exc}") from exc
            deadline = time.monotonic() + self.timeout
            try:
                h, w, c, _ = parse_header(self._read(None, deadline))
            except FrameError as exc:
                self._kill()
                raise BackendError(f"malformed response frame: {exc}") from exc
            if (h, w, c) != x.shape:
                self._kill()
                raise BackendError(f"malformed response frame: shape {(h, w, c)} != request {x.shape}")
            payload = self._read(4 * h * w * c, deadline)
        return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w, c)

    def eps(self, x_t, t, sched):
        tt = _t_batch(t, x_t.shape[0])
        arr = x_t.detach().cpu().numpy()
        out = [self.predict_one(arr[i], int(tt[i])) for i in range(arr.shape[0])]
        return torch.as_tensor(np.stack(out), dtype=DTYPE)

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None

    def __del__(self):
        try:
            self._kill()
        except Exception:
            pass


# --------------------------------------------------------------------------- #
# forward / reverse


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; works on arrays and tensors, no clamping."""
    t = sched.check_t(t)
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}")
    s, sigma = sched.coeffs(t)
    return s * x0 + sigma * eps


def _batched(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))[None]


def predict_eps(backend: DenoiserBackend, x_t, t: int, sched: NoiseSchedule):
    t = sched.check_t(t)
    if isinstance(x_t, torch.Tensor):
        return backend.eps(x_t[None], t, sched)[0]
    return backend.eps(_batched(x_t), t, sched)[0].detach().numpy()


def ddim_timesteps(t_from: int, substeps: int) -> list[int]:
    """Descending, uniformly respaced timesteps ``t_from -> 0`` (``substeps + 1`` entries)."""
    if not 1 <= substeps <= t_from:
        raise ValueError(f"need 1 <= substeps <= t_from, got substeps={substeps}, t_from={t_from}")
    grid = np.linspace(float(t_from), 0.0, substeps + 1)
    return [int(math.floor(v + 0.5)) for v in grid]


def _ddim(x: torch.Tensor, t_from: int, substeps: int, backend, sched, clamp: bool = True) -> torch.Tensor:
    seq = ddim_timesteps(t_from, substeps)
    for t, t_next in zip(seq[:-1], seq[1:]):
        s, sigma = sched.coeffs(t)
        s_next, sigma_next = sched.coeffs(t_next)
        eps = backend.eps(x, t, sched)
        x0_hat = (x - sigma * eps) / s
        x = s_next * x0_hat + sigma_next * eps
    return x.clamp(0.0, 1.0) if clamp else x


def ddim_reverse(x_t, t_from: int, substeps: int, backend: DenoiserBackend, sched: NoiseSchedule, clamp: bool = True):
    """Deterministic DDIM (eta = 0) from ``t_from`` down to 0."""
    sched.check_t(t_from)
    if isinstance(x_t, torch.Tensor):
        return _ddim(x_t[None], t_from, substeps, backend, sched, clamp)[0]
    with torch.no_grad():
        out = _ddim(_batched(x_t), t_from, substeps, backend, sched, clamp)
    return out[0].numpy()


# --------------------------------------------------------------------------- #
# loss


@dataclass
class LossEstimate:
    value: float
    num_samples: int
    per_sample: list[tuple[int, float]] = field(default_factory=list)

    @property
    def std_error(self) -> float:
        vals = np.array([v for _, v in self.per_sample])
        if len(vals) < 2:
            return float("nan")
        return float(vals.std(ddof=1) / math.sqrt(len(vals)))


@dataclass(frozen=True)
class PurifyChain:
    """Forward diffusion to ``t_pure`` with noise ``eps``, then DDIM with ``substeps``."""

    t_pure: int
    substeps: int
    eps: np.ndarray | None = None


def draw_noise(rng: RngState, n: int, shape, t_range: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """``n`` timesteps uniform on ``t_range`` (inclusive) and ``n`` standard normal fields."""
    lo, hi = t_range
    gen = rng.generator()
    ts = gen.integers(lo, hi + 1, size=n)
    eps = gen.standard_normal((n, *shape))
    return ts, eps


def _check_t_range(sched: NoiseSchedule, t_range) -> tuple[int, int]:
    lo, hi = (int(v) for v in (t_range or default_t_range(sched)))
    if not 1 <= lo <= hi <= sched.T_total:
        raise ValueError(f"t_range {(lo, hi)} outside schedule [1, {sched.T_total}]")
    return lo, hi


def _per_sample_loss(backend, x: torch.Tensor, ts: torch.Tensor, eps: torch.Tensor, sched) -> torch.Tensor:
    """Mean squared noise error per draw; ``x`` is ``(B, H, W, C)`` or ``(H, W, C)``."""
    s, sigma = _coef_tensor(sched, ts)
    x_t = s * x + sigma * eps
    err = eps - backend.eps(x_t, ts, sched)
    return err.pow(2).flatten(1).mean(dim=1)


def diffusion_loss(
    backend: DenoiserBackend,
    x,
    n_samples: int,
    rng: RngState,
    sched: NoiseSchedule,
    t_range: tuple[int, int] | None = None,
    batch: int = 64,
) -> LossEstimate:
    """Monte Carlo estimate of ``E_{t, eps} ||eps - eps_hat(x_t, t)||^2`` (per component)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = as_image(x)
    lo, hi = _check_t_range(sched, t_range)
    ts, eps = draw_noise(rng, n_samples, x.shape, (lo, hi))
    xt = torch.as_tensor(x, dtype=DTYPE)
    values = []
    with torch.no_grad():
        for i in range(0, n_samples, batch):
            tb = torch.as_tensor(ts[i : i + batch], dtype=torch.long)
            eb = torch.as_tensor(eps[i : i + batch], dtype=DTYPE)
            values.append(_per_sample_loss(backend, xt, tb, eb, sched).numpy())
    values = np.concatenate(values)
    per_sample = [(int(t), float(v)) for t, v in zip(ts, values)]
    return LossEstimate(float(values.mean()), n_samples, per_sample)


def _require_gradients(backend: DenoiserBackend) -> None:
    if not backend.differentiable:
        raise GradientUnavailableError(f"gradient unavailable for {backend.kind} backend")


def loss_tensor(
    backend: DenoiserBackend,
    x: torch.Tensor,
    ts,
    eps,
    sched: NoiseSchedule,
    chain: PurifyChain | None = None,
    transforms: Sequence[Callable[[torch.Tensor], torch.Tensor]] | None = None,
) -> torch.Tensor:
    """Differentiable mean loss of ``x`` over fixed draws.

    ``chain`` routes ``x`` through forward diffusion and DDIM first;
    ``transforms`` applies one transform per draw before the loss.
    """
    ts = torch.as_tensor(np.asarray(ts), dtype=torch.long)
    eps = torch.as_tensor(np.asarray(eps), dtype=DTYPE)
    if chain is not None:
        if chain.eps is None:
            raise ValueError("purify chain needs fixed forward noise")
        ch_eps = torch.as_tensor(np.asarray(chain.eps), dtype=DTYPE)
        x = forward_diffuse(x, chain.t_pure, ch_eps, sched)
        x = _ddim(x[None], chain.t_pure, chain.substeps, backend, sched)[0]
    if transforms is not None:
        if len(transforms) != len(ts):
            raise ValueError("need one transform per draw")
        xs = torch.stack([tf(x) for tf in transforms])
    else:
        xs = x
    return _per_sample_loss(backend, xs, ts, eps, sched).mean()


def loss_and_grad(backend, x, ts, eps, sched, chain=None, transforms=None) -> tuple[float, np.ndarray]:
    _require_gradients(backend)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone().requires_grad_(True)
    loss = loss_tensor(backend, xt, ts, eps, sched, chain, transforms)
    (grad,) = torch.autograd.grad(loss, xt)
    return float(loss.detach()), grad.numpy()


def loss_grad_input(
    backend: DenoiserBackend,
    x,
    fixed_draws: Sequence[tuple[int, np.ndarray]],
    sched: NoiseSchedule,
    through_purify: PurifyChain | None = None,
) -> np.ndarray:
    """Gradient of the mean loss over ``fixed_draws`` with respect to the image ``x``."""
    _require_gradients(backend)
    x = as_image(x)
    if not fixed_draws:
        raise ValueError("fixed_draws must not be empty")
    ts = np.array([sched.check_t(t) for t, _ in fixed_draws])
    eps = np.stack([np.asarray(e, dtype=np.float64).reshape(x.shape) for _, e in fixed_draws])
    return loss_and_grad(backend, x, ts, eps, sched, through_purify)[1]


# --------------------------------------------------------------------------- #
# training the affine surrogate


def train_affine(
    backend: AffineDenoiser,
    images: Sequence[np.ndarray],
    steps: int,
    lr: float,
    rng: RngState,
    sched: NoiseSchedule,
    draws: Sequence[tuple[int, np.ndarray]] | None = None,
) -> AffineDenoiser:
    """Full-batch gradient descent on the noise-prediction loss over ``(a, b)``.

    Each step draws fresh noise for every (supported timestep, image) pair, unless
    ``draws`` pins them as ``(t, eps)`` with ``eps`` shaped ``(N, H, W, C)``. The
    objective is the per-parameter mean over images, summed over pixels and
    timesteps, so ``lr`` acts per parameter and is stable below ~0.4.
    """
    if not isinstance(backend, AffineDenoiser):
        raise TypeError("train_affine needs an AffineDenoiser")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    x0 = torch.as_tensor(np.stack([as_image(im) for im in images]), dtype=DTYPE)
    if tuple(x0.shape[1:]) != backend.shape:
        raise ValueError(f"images {tuple(x0.shape[1:])} do not match model shape {backend.shape}")
    n = x0.shape[0]
    a = torch.as_tensor(backend.a.copy(), dtype=DTYPE)
    b = torch.as_tensor(backend.b.copy(), dtype=DTYPE)

    if draws is not None:
        fixed_t = [sched.check_t(t) for t, _ in draws]
        fixed_eps = torch.as_tensor(np.stack([np.asarray(e, dtype=np.float64) for _, e in draws]), dtype=DTYPE)
        k_idx = backend.index(torch.tensor(fixed_t))
    else:
        k_idx = torch.arange(len(backend.timesteps))
        fixed_t = list(backend.timesteps)
    s, sigma = _coef_tensor(sched, torch.tensor(fixed_t, dtype=torch.long))
    s, sigma = s[:, None], sigma[:, None]  # (K, 1, 1, 1, 1) against (K, N, H, W, C)

    for step in range(steps):
        if draws is None:
            eps = torch.as_tensor(
                rng.child("train", step).generator().standard_normal((len(fixed_t), n, *backend.shape)),
                dtype=DTYPE,
            )
        else:
            eps = fixed_eps
        x_t = s * x0[None] + sigma * eps
        # closed-form gradient of the quadratic objective
        resid = a[k_idx][:, None] * x_t + b[k_idx][:, None] - eps
        ga = torch.zeros_like(a).index_add_(0, k_idx, (resid * x_t).mean(dim=1), alpha=2.0)
        gb = torch.zeros_like(b).index_add_(0, k_idx, resid.mean(dim=1), alpha=2.0)
        a -= lr * ga
        b -= lr * gb
    return AffineDenoiser(a.detach().numpy(), b.detach().numpy(), backend.timesteps)
