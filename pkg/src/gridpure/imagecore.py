"""Pixel-space images, PNG and tensor-frame I/O, and splittable randomness.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)`` with
``float64`` values in ``[0, 1]`` and 1 or 3 channels.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
from PIL import Image

__all__ = [
    "ImageError",
    "FrameError",
    "RngState",
    "as_image",
    "load_image",
    "save_image",
    "write_tensor",
    "read_tensor",
    "sample_gaussian",
]

FRAME_MAGIC = b"EPS"
# 2**28 components is ~1 GiB of float32, far above any tile we hand to a denoiser.
MAX_FRAME_COMPONENTS = 1 << 28
_MASK64 = (1 << 64) - 1


class ImageError(ValueError):
    """Raised for invalid image buffers or unsupported image files."""


class FrameError(ValueError):
    """Raised when a tensor frame cannot be parsed."""


def as_image(data, *, clamp: bool = False) -> np.ndarray:
    """Validate ``data`` as an image buffer and return it as float64 ``(H, W, C)``.

    A 2-D array is treated as a single-channel image.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageError(f"expected a (H, W, C) array, got shape {arr.shape}")
    h, w, c = arr.shape
    if h == 0 or w == 0:
        raise ImageError("zero dimension")
    if c not in (1, 3):
        raise ImageError(f"unsupported channel count {c}")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    if clamp:
        arr = np.clip(arr, 0.0, 1.0)
    return arr


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _png_header(path: Path) -> tuple[int, int]:
    """Return ``(bit_depth, colour_type)`` from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageError(f"{path}: corrupt PNG stream (bad signature or IHDR)")
    return head[24], head[25]


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into a float image in ``[0, 1]``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    depth, colour = _png_header(path)
    if colour in (4, 6):
        raise ImageError("unsupported channel layout")
    if depth != 8 or colour not in (0, 2):
        raise ImageError(f"unsupported bit depth or colour type (depth={depth}, type={colour})")
    try:
        with Image.open(path) as im:
            im.load()
            raw = np.array(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageError(f"{path}: corrupt PNG stream ({exc})") from exc
    return as_image(raw.astype(np.float64) / 255.0)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize an image to uint8 with round-to-nearest of ``v * 255``."""
    img = as_image(img, clamp=True)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    raw = to_bytes(img)
    if raw.shape[2] == 1:
        pil = Image.fromarray(raw[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(raw, mode="RGB")
    try:
        pil.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_tensor(img: np.ndarray, t: int, out: BinaryIO) -> None:
    """Write one tensor frame: ``EPS h w c t\\n`` then float32 LE payload."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    out.write(f"EPS {h} {w} {c} {int(t)}\n".encode("ascii"))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise FrameError(f"truncated payload: expected {n} bytes, got {n - remaining}")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def parse_header(line: bytes) -> tuple[int, int, int, int]:
    parts = line.strip().split()
    if len(parts) != 5 or parts[0] != FRAME_MAGIC:
        raise FrameError(f"bad magic in frame header {line[:40]!r}")
    try:
        h, w, c, t = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise FrameError(f"non-integer field in frame header {line[:40]!r}") from exc
    if min(h, w, c) == 0:
        raise FrameError("zero dimension")
    if min(h, w, c) < 0 or t < 0:
        raise FrameError("negative field in frame header")
    if h * w * c > MAX_FRAME_COMPONENTS:
        raise FrameError("dimension overflow")
    return h, w, c, t


def read_tensor(stream: BinaryIO) -> tuple[np.ndarray, int]:
    """Read one tensor frame; returns ``(image, timestep)``.

    The image is float32-exact (the payload precision) stored as float64.
    """
    line = stream.readline(256)
    if not line:
        raise FrameError("truncated payload: empty stream")
    if not line.endswith(b"\n"):
        raise FrameError(f"bad magic in frame header {line[:40]!r}")
    h, w, c, t = parse_header(line)
    payload = _read_exact(stream, 4 * h * w * c)
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return data.reshape(h, w, c), t


@dataclass(frozen=True)
class RngState:
    """Immutable handle on a counter-based random stream.

    Equal ``(seed, stream)`` pairs always yield the same samples. ``child``
    derives substreams by hashing keys, so derivation order does not matter.
    """

    seed: int
    stream: int = 0

    def child(self, *keys) -> "RngState":
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<Q", self.stream & _MASK64))
        for key in keys:
            if isinstance(key, np.generic):
                key = key.item()
            h.update(repr(key).encode("utf-8"))
            h.update(b"\x00")
        return RngState(self.seed, int.from_bytes(h.digest(), "little"))

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def sample_gaussian(rng: RngState, n) -> np.ndarray:
    """Standard normal samples; ``n`` is a count or a shape tuple."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if int(np.prod(shape)) <= 0:
        raise ValueError("sample count must be positive")
    return rng.generator().standard_normal(shape)
