"""Post-processing perturbations: blur, crop+upsample, JPEG, additive noise.

Every random draw comes from a per-image substream derived from
(global seed, image id), so results do not depend on processing order.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np
import PIL
from PIL import Image, features
from scipy import ndimage

from .preprocess import bilinear_resize

BLUR_KERNELS = (3, 5, 7, 9)
CROP_RANGE = (5.0, 20.0)
JPEG_QUALITY_RANGE = (10, 75)
NOISE_VAR_RANGE = (5.0, 20.0)
AUG_PROBABILITY = 0.5
ORDER = ("blur", "crop", "jpeg", "noise")


class AugmentationError(RuntimeError):
    pass


@dataclass
class AugmentationRecord:
    image_id: str = ""
    applied: list = field(default_factory=list)

    def names(self) -> list[str]:
        return [name for name, _ in self.applied]

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "applied": [{"name": n, **p} for n, p in self.applied]}


def substream(global_seed: int, image_id: str, purpose: str = "aug") -> np.random.Generator:
    digest = hashlib.sha256(f"{global_seed}:{purpose}:{image_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def codec_info() -> str:
    return f"Pillow {PIL.__version__}, libjpeg {features.version('jpg')}"


def blur_sigma(k: int) -> float:
    return 0.3 * ((k - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(k: int) -> np.ndarray:
    x = np.arange(k) - (k - 1) / 2
    w = np.exp(-(x ** 2) / (2 * blur_sigma(k) ** 2))
    return w / w.sum()


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def apply_blur(img: np.ndarray, k: int) -> np.ndarray:
    w = gaussian_kernel1d(k)
    out = ndimage.correlate1d(img.astype(np.float64), w, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, w, axis=1, mode="reflect")
    return _to_uint8(out)


def gaussian_blur(img, rng, kernel_size: int | None = None):
    k = int(rng.choice(BLUR_KERNELS)) if kernel_size is None else kernel_size
    return apply_blur(img, k), ("blur", {"kernel_size": k, "sigma": blur_sigma(k)})


def apply_crop(img: np.ndarray, crop_h: int, crop_w: int, top: int, left: int) -> np.ndarray:
    h, w = img.shape[:2]
    window = img[top:top + crop_h, left:left + crop_w]
    return _to_uint8(bilinear_resize(window, h, w))


def random_crop_upsample(img, rng, crop_pct: tuple[float, float] | None = None):
    """Crop an asymmetric window (independent percentage per axis), upsample back."""
    h, w = img.shape[:2]
    if crop_pct is None:
        crop_pct = (float(rng.uniform(*CROP_RANGE)), float(rng.uniform(*CROP_RANGE)))
    ch = max(1, int(round(h * (1 - crop_pct[0] / 100))))
    cw = max(1, int(round(w * (1 - crop_pct[1] / 100))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    params = {"pct_h": crop_pct[0], "pct_w": crop_pct[1], "top": top, "left": left,
              "crop_h": ch, "crop_w": cw}
    return apply_crop(img, ch, cw, top, left), ("crop", params)


def apply_jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    try:
        buf = io.BytesIO()
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with Image.open(buf) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except Exception as exc:  # codec failures surface as one error type
        raise AugmentationError(f"JPEG round-trip failed: {exc}") from exc


def jpeg_compress(img, rng, quality: int | None = None):
    if img.ndim != 3 or img.shape[2] != 3:
        raise AugmentationError("jpeg augmentation expects a 3-channel image")
    q = int(rng.integers(JPEG_QUALITY_RANGE[0], JPEG_QUALITY_RANGE[1] + 1)) if quality is None else quality
    return apply_jpeg(img, q), ("jpeg", {"quality": q})


def additive_noise(img, rng, variance: float | None = None):
    """Zero-mean Gaussian noise in 8-bit intensity units, clamped to [0, 255]."""
    var = float(rng.uniform(*NOISE_VAR_RANGE)) if variance is None else variance
    noise = rng.standard_normal(img.shape) * math.sqrt(var)
    return _to_uint8(img.astype(np.float64) + noise), ("noise", {"variance": var})


AUGMENTATIONS = {"blur": gaussian_blur, "crop": random_crop_upsample,
                 "jpeg": jpeg_compress, "noise": additive_noise}


def multi_augment(img, rng, coins: tuple[bool, bool, bool, bool] | None = None, image_id: str = ""):
    """Apply each augmentation with probability 0.5, always in blur->crop->jpeg->noise order."""
    record = AugmentationRecord(image_id)
    if coins is None:
        coins = tuple(bool(c) for c in rng.random(len(ORDER)) < AUG_PROBABILITY)
    for name, fire in zip(ORDER, coins):
        if fire:
            img, entry = AUGMENTATIONS[name](img, rng)
            record.applied.append(entry)
    return img, record


def augment_one(img, name: str, rng, image_id: str = ""):
    if name not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {name!r}")
    out, entry = AUGMENTATIONS[name](img, rng)
    return out, AugmentationRecord(image_id, [entry])


def select_half(n: int, seed: int) -> np.ndarray:
    """Indices of ceil(n/2) images chosen uniformly without replacement."""
    rng = np.random.default_rng([seed, 0x5E1EC7])
    return np.sort(rng.choice(n, size=(n + 1) // 2, replace=False))


def individually_augment(items, which: str, seed: int):
    """Perturb ceil(N/2) of ``items`` ((image_id, image) pairs) with one augmentation."""
    if which not in ("jpeg", "crop", "blur", "noise"):
        raise ValueError(f"unknown augmentation {which!r}")
    items = list(items)
    chosen = set(select_half(len(items), seed).tolist())
    out, records = [], []
    for i, (image_id, img) in enumerate(items):
        if i in chosen:
            img, rec = augment_one(img, which, substream(seed, image_id, which), image_id)
        else:
            rec = AugmentationRecord(image_id)
        out.append((image_id, img))
        records.append(rec)
    return out, records


def multi_augment_dataset(items, seed: int):
    out, records = [], []
    for image_id, img in items:
        img, rec = multi_augment(img, substream(seed, image_id, "multi"), image_id=image_id)
        out.append((image_id, img))
        records.append(rec)
    return out, records
