"""CAM / Grad-CAM saliency maps and Jet-coloured overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Flatten, GlobalAvgPool, ModelGraph, sigmoid
from .preprocess import bilinear_resize, save_image

# Piecewise-linear Jet segments: (position, value) per channel.
JET_SEGMENTS = {
    "r": ((0.0, 0.0), (0.35, 0.0), (0.66, 1.0), (0.89, 1.0), (1.0, 0.5)),
    "g": ((0.0, 0.0), (0.125, 0.0), (0.375, 1.0), (0.64, 1.0), (0.91, 0.0), (1.0, 0.0)),
    "b": ((0.0, 0.5), (0.11, 1.0), (0.34, 1.0), (0.65, 0.0), (1.0, 0.0)),
}


class UnsupportedHeadError(ValueError):
    pass


@dataclass
class SaliencyMap:
    raw: np.ndarray
    normalized: np.ndarray
    output_name: str
    confidence: float


def normalize_map(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def _head_index(model: ModelGraph) -> int:
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (GlobalAvgPool, Flatten)):
            return i
    raise UnsupportedHeadError(f"{model.name} has no pooling/flatten head")


def _inputs(model, x, pre):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if pre is not None:
        x = pre.forward(x, stop=pre.branch_layer)
    return x


def cam(model: ModelGraph, x, output: int = 0, pre: ModelGraph | None = None,
        name: str | None = None) -> SaliencyMap:
    """Class activation map of one image: dense-weighted sum of final feature maps.

    ``pre`` is the frozen primary when ``model`` is a secondary that consumes
    branch features.
    """
    if model.head != "gap_cam":
        raise UnsupportedHeadError(f"cam needs a GAP+dense head; {model.name} has {model.head!r} (use grad_cam)")
    h = _head_index(model)
    feats = model.forward(_inputs(model, x, pre), stop=h)[0]
    dense = model.layers[h + 1]
    w = dense.params["weight"][output]
    raw = np.tensordot(w, feats, axes=(0, 0))
    logit = float(raw.mean() + dense.params["bias"][output])
    return SaliencyMap(raw, normalize_map(raw), name or model.name, float(sigmoid(np.array([logit]))[0]))


def cam_logit(model: ModelGraph, x, output: int = 0, pre: ModelGraph | None = None) -> float:
    return float(model.forward(_inputs(model, x, pre))[0, output])


def grad_cam(model: ModelGraph, x, output: int = 0, pre: ModelGraph | None = None,
             name: str | None = None) -> SaliencyMap:
    """Grad-CAM at the last conv block: ReLU of gradient-weighted feature maps."""
    h = _head_index(model)
    feats = model.forward(_inputs(model, x, pre), stop=h)
    logits = model.forward(feats, cache=True, start=h)
    score = sigmoid(logits[:, output])
    dlogits = np.zeros_like(logits)
    dlogits[:, output] = score * (1 - score)
    dfeat = model.backward(dlogits, start=h)
    model.clear_cache()
    alpha = dfeat[0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, feats[0], axes=(0, 0)), 0.0)
    return SaliencyMap(raw, normalize_map(raw), name or model.name, float(score[0]))


def saliency(model: ModelGraph, x, pre: ModelGraph | None = None, name: str | None = None) -> SaliencyMap:
    if model.head == "gap_cam":
        return cam(model, x, pre=pre, name=name)
    return grad_cam(model, x, pre=pre, name=name)


def jet_lut(n: int = 256) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    chans = []
    for c in "rgb":
        pos, val = zip(*JET_SEGMENTS[c])
        chans.append(np.interp(t, pos, val))
    return np.rint(np.stack(chans, axis=1) * 255).astype(np.uint8)


_JET = jet_lut()


def jet(values: np.ndarray) -> np.ndarray:
    idx = np.clip(np.rint(np.asarray(values) * 255), 0, 255).astype(int)
    return _JET[idx]


def overlay(smap: SaliencyMap, base_image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    h, w = base_image.shape[:2]
    up = np.clip(bilinear_resize(smap.normalized, h, w), 0.0, 1.0)
    color = jet(up).astype(np.float64)
    base = np.asarray(base_image, dtype=np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    return np.clip(np.rint((1 - alpha) * base + alpha * color), 0, 255).astype(np.uint8)


def render_heatmap(smap: SaliencyMap, base_image: np.ndarray, path, alpha: float = 0.5,
                   sidecar=None, image_id: str = "", verdict: str = "") -> Path:
    """Write the overlay as PNG; confidence/verdict go to a JSON-lines sidecar, not the pixels."""
    path = Path(path)
    try:
        save_image(overlay(smap, base_image, alpha), path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write heatmap {path}: {exc}") from exc
    if sidecar is not None:
        rec = {"image_id": image_id, "output": smap.output_name, "verdict": verdict,
               "confidence": round(smap.confidence, 6), "heatmap": path.name}
        with open(sidecar, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
