"""Full-reference image quality metrics: MSE, PSNR and SSIM (dynamic range 1)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import as_image
from .transforms import gaussian_kernel1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """``10 log10(1 / mse)``; identical images give ``PSNR_CAP``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _filter_valid(plane: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    rows = sliding_window_view(plane, n, axis=0) @ k
    return sliding_window_view(rows, n, axis=1) @ k


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, then over channels.

    No border padding, as in the original formulation; library versions that pad
    will differ near the edges.
    """
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if np.array_equal(a, b):
        return 1.0
    k = gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        vx = _filter_valid(x * x, k) - mx * mx
        vy = _filter_valid(y * y, k) - my * my
        cov = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + C1) * (2 * cov + C2)
        den = (mx * mx + my * my + C1) * (vx + vy + C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def compare(a, b) -> MetricReport:
    return MetricReport(mse(a, b), psnr(a, b), ssim(a, b))
