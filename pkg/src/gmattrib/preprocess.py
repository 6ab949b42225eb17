"""Image loading and conversion to pixel or DCT-spectrum model inputs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

LOG_EPS = 1e-12
STD_FLOOR = 1e-8
LUMA = (0.299, 0.587, 0.114)


class DecodeError(IOError):
    pass


def load_image(path) -> np.ndarray:
    """Read a raster file as an (H, W, 3) uint8 RGB array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def save_image(img: np.ndarray, path, quality: int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = Image.fromarray(np.asarray(img, dtype=np.uint8))
    if quality is not None:
        im.save(path, format="JPEG", quality=int(quality))
    else:
        im.save(path)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with area-consistent (half-pixel) sample centres.

    Works on float arrays of shape (H, W) or (H, W, C); returns float64.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    extra = (1,) * (img.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def standardize(img: np.ndarray, size: int) -> np.ndarray:
    """Center-crop to square, then bilinear-resample to ``size`` x ``size``."""
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    img = center_crop_square(np.asarray(img))
    if img.shape[0] == size:
        return img.astype(np.uint8, copy=True)
    out = bilinear_resize(img, size, size)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def pixel_tensor(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float in [-1, 1]."""
    x = np.asarray(img, dtype=np.float64) / 127.5 - 1.0
    return np.transpose(x, (2, 0, 1))


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("to_grayscale expects an (H, W, 3) image")
    y = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT basis; row k holds frequency k."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


def dct2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"dct2d expects a square 2-D array, got {x.shape}")
    c = dct_matrix(x.shape[0])
    return c @ x @ c.T


def idct2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"idct2d expects a square 2-D array, got {x.shape}")
    c = dct_matrix(x.shape[0])
    return c.T @ x @ c


def log_scale(spectrum: np.ndarray) -> np.ndarray:
    return np.log(np.abs(spectrum) + LOG_EPS)


def log_spectrum(img: np.ndarray) -> np.ndarray:
    """RGB uint8 image -> log-magnitude DCT spectrum of its luma."""
    return log_scale(dct2d(to_grayscale(img)))


@dataclass
class SpectrumStats:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"spectrum.mean": self.mean, "spectrum.std": self.std,
                "spectrum.count": np.array([self.count], dtype=np.float64)}

    @classmethod
    def from_arrays(cls, arrays) -> "SpectrumStats":
        return cls(np.asarray(arrays["spectrum.mean"], dtype=np.float64),
                   np.asarray(arrays["spectrum.std"], dtype=np.float64),
                   int(np.asarray(arrays["spectrum.count"]).ravel()[0]))


def fit_spectrum_stats(spectra: Iterable[np.ndarray]) -> SpectrumStats:
    """Per-coefficient mean/std from clean training spectra (two-pass)."""
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in spectra])
    if len(stack) < 2:
        raise ValueError("need at least 2 spectra to fit statistics")
    mean = stack.mean(axis=0)
    std = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    return SpectrumStats(mean, np.maximum(std, STD_FLOOR), len(stack))


def normalize_spectrum(spectrum: np.ndarray, stats: SpectrumStats) -> np.ndarray:
    if spectrum.shape[-2:] != stats.mean.shape:
        raise ValueError(f"spectrum shape {spectrum.shape} does not match stats {stats.mean.shape}")
    return (spectrum - stats.mean) / stats.std


def dct_tensor(img: np.ndarray, stats: SpectrumStats) -> np.ndarray:
    """Full frequency-domain pipeline: grey -> DCT -> log -> normalize, shape (1, S, S)."""
    return normalize_spectrum(log_spectrum(img), stats)[None]


def to_model_input(img: np.ndarray, representation: str, stats: SpectrumStats | None = None) -> np.ndarray:
    if representation == "pixel":
        return pixel_tensor(img)
    if representation == "dct":
        if stats is None:
            raise ValueError("dct representation requires fitted SpectrumStats")
        return dct_tensor(img, stats)
    raise ValueError(f"unknown representation {representation!r}")


def batch_inputs(images, representation: str, stats: SpectrumStats | None = None, dtype=np.float32) -> np.ndarray:
    return np.stack([to_model_input(im, representation, stats) for im in images]).astype(dtype)
