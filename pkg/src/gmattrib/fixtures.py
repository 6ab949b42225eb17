"""Seedable toy datasets with controllable generator fingerprints.

Base images are smooth procedural content. A "generator" stamps a fixed
high-frequency periodic pattern onto its images, a stand-in for the
periodic upsampling residue real GANs leave behind. Each pattern is one
8x8 DCT basis function tiled across the image, so patterns belonging to
different sources are exactly orthogonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, SampleRecord
from .preprocess import dct2d, save_image

# Standard JPEG luma quantization table (quality 50), indexed [v][u].
_JPEG_LUMA_Q50 = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
])

# (u, v) frequencies of 8x8 basis tiles. 20 <= u^2 + v^2 <= 32 keeps them well
# above a quarter of Nyquist and inside the band a k=9 blur wipes out; sources
# take the bases with the finest JPEG quantization first so moderate
# compression leaves the fingerprint readable.
_BASIS_POOL = sorted(((u, v) for v in range(8) for u in range(8) if 20 <= u * u + v * v <= 32),
                     key=lambda uv: _JPEG_LUMA_Q50[uv[1], uv[0]])


@dataclass
class FingerprintSpec:
    source_id: str
    pattern: np.ndarray
    amplitude: float
    bases: list = field(default_factory=list)


@dataclass
class FixtureConfig:
    image_size: int = 64
    n_sources: int = 3
    amplitude: float = 8.0
    samples_per_source: int = 200
    balance: tuple[int, int] = (2, 3)
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    external: bool = True
    siblings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_sources < 2:
            raise ValueError("need at least 2 fake sources")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if not math.isclose(sum(self.splits), 1.0):
            raise ValueError("split ratios must sum to 1")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")

    def source_ids(self) -> list[str]:
        return [f"gm{i}" for i in range(self.n_sources)]

    def n_real(self) -> int:
        real, fake = self.balance
        return int(round(self.n_sources * self.samples_per_source * real / fake))


def basis_tile(u: int, v: int, size: int) -> np.ndarray:
    """8x8 DCT basis (u horizontal, v vertical) tiled to size x size, unit RMS."""
    x = np.arange(size) % 8
    cx = np.cos(np.pi * (2 * x + 1) * u / 16)
    cy = np.cos(np.pi * (2 * x + 1) * v / 16)
    p = np.outer(cy, cx)
    p -= p.mean()
    return p / np.sqrt((p ** 2).mean())


def fingerprint_bank(source_ids, size: int, seed: int, amplitude: float = 8.0,
                     siblings: dict[str, str] | None = None) -> dict[str, FingerprintSpec]:
    """Patterns for ``source_ids``; ``siblings`` maps a source to the one it half-shares a pattern with.

    A sibling pattern is 0.5 * (parent pattern) + sqrt(0.75) * (fresh basis),
    giving a normalized cross-correlation of exactly 0.5 with its parent.
    """
    siblings = siblings or {}
    rng = np.random.default_rng([seed, 0xF1])
    pool = list(_BASIS_POOL)
    if len(source_ids) > len(pool):
        raise ValueError("too many sources for the basis pool")
    bank: dict[str, FingerprintSpec] = {}
    for sid, (u, v) in zip(source_ids, pool):
        sign = 1.0 if rng.random() < 0.5 else -1.0
        own = sign * basis_tile(u, v, size)
        parent = siblings.get(sid)
        if parent is not None:
            if parent not in bank:
                raise ValueError(f"sibling parent {parent!r} must precede {sid!r}")
            pattern = 0.5 * bank[parent].pattern + math.sqrt(0.75) * own
            pattern = pattern / np.sqrt((pattern ** 2).mean())
            bases = bank[parent].bases + [(u, v)]
        else:
            pattern, bases = own, [(u, v)]
        bank[sid] = FingerprintSpec(sid, pattern, amplitude, bases)
    return bank


def gen_base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random RGB content: low-frequency cosine fields plus soft blobs."""
    if size < 16:
        raise ValueError("size must be at least 16")
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        field_ = np.zeros((size, size))
        for _ in range(12):
            fu, fv = rng.integers(0, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field_ += rng.normal() * np.cos(np.pi * (fu * xx + fv * yy) + phase)
        img[..., c] = field_
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.normal(0, 2.0, size=3)
    img -= img.mean()
    img /= np.abs(img).max() + 1e-12
    base = rng.uniform(100, 155)
    return np.clip(np.rint(base + 70 * img), 0, 255).astype(np.uint8)


def stamp_fingerprint(img: np.ndarray, spec: FingerprintSpec) -> np.ndarray:
    if spec.pattern.shape != img.shape[:2]:
        raise ValueError(f"pattern {spec.pattern.shape} does not match image {img.shape[:2]}")
    out = img.astype(np.float64) + spec.amplitude * spec.pattern[..., None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def band_energy_fraction(gray: np.ndarray) -> float:
    """Fraction of DCT energy with either frequency index above S/4."""
    c = dct2d(np.asarray(gray, dtype=np.float64))
    s = c.shape[0]
    k = np.arange(s)
    high = (k[:, None] > s // 4) | (k[None, :] > s // 4)
    e = c ** 2
    return float(e[high].sum() / e.sum())


def normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-300))


def _split_counts(n: int, ratios) -> list[int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return [n_train, n_val, n - n_train - n_val]


def generate(cfg: FixtureConfig):
    """Yield (SampleRecord, image) pairs for the whole fixture, in memory."""
    ids = cfg.source_ids()
    ext_ids = ["ext0"] if cfg.external else []
    siblings = {}
    if cfg.siblings:
        siblings[ids[1]] = ids[0]
    bank = fingerprint_bank(ids + ext_ids, cfg.image_size, cfg.seed, cfg.amplitude, siblings)
    plan = [("real", cfg.n_real())] + [(s, cfg.samples_per_source) for s in ids + ext_ids]
    out = []
    for source, n in plan:
        rng = np.random.default_rng([cfg.seed, _source_key(source)])
        if source in ext_ids:
            splits = ["external"] * n
        else:
            counts = _split_counts(n, cfg.splits)
            splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
            splits = [splits[i] for i in rng.permutation(n)]
        for i in range(n):
            img = gen_base_image(np.random.default_rng([cfg.seed, _source_key(source), i]), cfg.image_size)
            if source != "real":
                img = stamp_fingerprint(img, bank[source])
            image_id = f"{source}_{i:05d}"
            rec = SampleRecord(f"images/{source}/{image_id}.png", "real" if source == "real" else "fake",
                               source, splits[i], image_id)
            out.append((rec, img))
    return out, bank


def _source_key(source: str) -> int:
    return int.from_bytes(source.encode()[:8].ljust(8, b"\0"), "little")


def gen_dataset(cfg: FixtureConfig, root) -> DatasetManifest:
    """Write fixture images as PNG under ``root`` plus ``root/manifest.jsonl``."""
    root = Path(root)
    samples, bank = generate(cfg)
    for rec, img in samples:
        save_image(img, root / rec.path)
    notes = {"generator": "gmattrib.fixtures", "amplitude": cfg.amplitude, "n_sources": cfg.n_sources,
             "siblings": cfg.siblings, "fingerprint_bases": {k: v.bases for k, v in bank.items()}}
    manifest = DatasetManifest([rec for rec, _ in samples], cfg.seed, cfg.image_size, notes, root)
    manifest.save(root / "manifest.jsonl")
    return manifest
