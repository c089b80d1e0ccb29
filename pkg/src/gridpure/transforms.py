"""Natural image transformations: Gaussian blur, an in-memory JPEG roundtrip, and
the differentiable transform set sampled during expectation-over-transformation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dctn, idctn

from .imagecore import as_image

# ITU-T T.81 Annex K, tables K.1 (luminance) and K.2 (chrominance).
BASE_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
BASE_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)

# BT.601 full-range RGB -> YCbCr (the JFIF convention); chroma offset 128 added separately.
RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)


# --------------------------------------------------------------------------- #
# blur


def gaussian_kernel1d(kernel: int, sigma: float) -> np.ndarray:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel // 2
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return k / k.sum()


def blur_tensor(x: torch.Tensor, kernel: int = 7, sigma: float = 1.5) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding on ``(H, W, C)`` or ``(B, H, W, C)``."""
    k = torch.as_tensor(gaussian_kernel1d(kernel, sigma), dtype=x.dtype)
    if kernel == 1:
        return x
    r = kernel // 2
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if r >= x.shape[1] or r >= x.shape[2]:
        raise ValueError(f"image {tuple(x.shape[1:3])} too small for reflect padding with kernel {kernel}")
    c = x.shape[3]
    y = x.permute(0, 3, 1, 2)
    y = F.pad(y, (r, r, r, r), mode="reflect")
    y = F.conv2d(y, k.reshape(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    y = F.conv2d(y, k.reshape(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    y = y.permute(0, 2, 3, 1)
    return y[0] if squeeze else y


def gaussian_blur(x: np.ndarray, kernel: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = as_image(x)
    return blur_tensor(torch.as_tensor(x), kernel, sigma).numpy()


# --------------------------------------------------------------------------- #
# JPEG


@dataclass(frozen=True)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray
    quality: int


def quality_scale(quality: int) -> int:
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in 1..100, got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quant_tables(quality: int) -> QuantTables:
    """Base tables scaled the libjpeg way and clamped to ``[1, 255]``."""
    scale = quality_scale(quality)
    luma = np.clip((BASE_LUMA * scale + 50) // 100, 1, 255)
    chroma = np.clip((BASE_CHROMA * scale + 50) // 100, 1, 255)
    return QuantTables(luma, chroma, quality)


def _pad8(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    return np.pad(arr, ((0, -h % 8), (0, -w % 8), (0, 0)), mode="edge")


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def jpeg_roundtrip(x: np.ndarray, quality: int = 40) -> np.ndarray:
    """Lossy JPEG stages in memory: colour transform, 8x8 DCT, quantize, and back.

    No chroma subsampling and no entropy coding (which is lossless).
    """
    x = as_image(x)
    if x.shape[2] != 3:
        raise ValueError(f"jpeg_roundtrip needs 3 channels, got {x.shape[2]}")
    tables = quant_tables(quality)
    h, w = x.shape[:2]
    rgb = _pad8(x) * 255.0
    ycc = rgb @ RGB_TO_YCC.T
    ycc[..., 1:] += 128.0

    out = np.empty_like(ycc)
    for ch, table in enumerate((tables.luma, tables.chroma, tables.chroma)):
        coef = dctn(_blocks(ycc[..., ch] - 128.0), axes=(-2, -1), norm="ortho")
        coef = _round_half_away(coef / table) * table
        out[..., ch] = _unblocks(idctn(coef, axes=(-2, -1), norm="ortho")) + 128.0

    out[..., 1:] -= 128.0
    rgb = out @ YCC_TO_RGB.T
    return np.clip(rgb / 255.0, 0.0, 1.0)[:h, :w]


# --------------------------------------------------------------------------- #
# expectation-over-transformation set


TensorFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class EotTransform:
    """A differentiable random transform, written ``name[:p1[:p2]]``.

    ``identity``, ``blur:kernel:sigma``, ``brightness:lo:hi`` (uniform scale factor)
    and ``noise:std`` (additive Gaussian).
    """

    name: str
    params: tuple[float, ...] = ()

    def sample(self, gen: np.random.Generator, shape) -> TensorFn:
        if self.name == "identity":
            return lambda x: x
        if self.name == "blur":
            kernel, sigma = int(self.params[0]), float(self.params[1])
            return lambda x: blur_tensor(x, kernel, sigma)
        if self.name == "brightness":
            factor = float(gen.uniform(self.params[0], self.params[1]))
            return lambda x: factor * x
        if self.name == "noise":
            noise = torch.as_tensor(gen.standard_normal(shape) * self.params[0])
            return lambda x: x + noise
        raise AssertionError(self.name)

    def __str__(self) -> str:
        return ":".join([self.name, *(f"{p:g}" for p in self.params)])


_EOT_ARITY = {"identity": 0, "blur": 2, "brightness": 2, "noise": 1}
DEFAULT_EOT = ("identity", "blur:7:1.5", "brightness:0.8:1.2", "noise:0.02")


def parse_transform(spec: str) -> EotTransform:
    name, *rest = spec.strip().split(":")
    if name == "jpeg":
        raise ValueError("jpeg is not differentiable and cannot be used for EoT")
    if name not in _EOT_ARITY:
        raise ValueError(f"unknown EoT transform {name!r}")
    if len(rest) != _EOT_ARITY[name]:
        raise ValueError(f"transform {name!r} takes {_EOT_ARITY[name]} parameters, got {len(rest)}")
    params = tuple(float(p) for p in rest)
    if name == "blur":
        gaussian_kernel1d(int(params[0]), params[1])
    if name == "brightness" and not 0 < params[0] <= params[1]:
        raise ValueError(f"brightness range must satisfy 0 < lo <= hi, got {params}")
    if name == "noise" and params[0] < 0:
        raise ValueError("noise std must be >= 0")
    return EotTransform(name, params)
