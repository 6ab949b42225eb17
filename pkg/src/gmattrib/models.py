"""Proposed primary/secondary topologies, the two baselines, and weight bundles.

Bundle file layout (extension ``.gmb``)::

    magic      8 bytes   b"GMATTRB\\x00"
    version    uint32 LE
    hdr_len    uint32 LE
    header     hdr_len bytes of UTF-8 JSON (graph descriptions + tensor table)
    payload    concatenated little-endian float32 tensors
    digest     32 bytes, SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import (AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, GlobalAvgPool, LeakyReLU,
                 ModelGraph, ShapeError)
from .preprocess import SpectrumStats

PRIMARY_WIDTHS = (16, 16, 32, 32, 64, 64, 64, 64)
PRIMARY_STRIDES = (1, 2, 1, 2, 1, 2, 1, 2)
BRANCH_CONVS = 4
INIT_STD = 0.02
INPUT_SIZES = (64, 128, 256)
BASELINES = ("gandct-conv", "ganfp-postpool")

MAGIC = b"GMATTRB\x00"
FORMAT_VERSION = 1


class BundleError(IOError):
    pass


class BundleMagicError(BundleError):
    pass


class BundleVersionError(BundleError):
    pass


class BundleTruncatedError(BundleError):
    pass


class BundleDigestError(BundleError):
    pass


def _in_channels(representation: str) -> int:
    if representation == "pixel":
        return 3
    if representation == "dct":
        return 1
    raise ValueError(f"unknown representation {representation!r}")


def _conv_block(layers, in_ch, out_ch, stride, bn, rng, dtype):
    layers.append(Conv2d(in_ch, out_ch, stride, bias=not bn, rng=rng, std=INIT_STD, dtype=dtype))
    if bn:
        layers.append(BatchNorm2d(out_ch, dtype=dtype))
    layers.append(LeakyReLU())


def _head(layers, feat_shape, representation, n_outputs, rng, dtype):
    if representation == "pixel":
        layers.append(GlobalAvgPool())
        layers.append(Dense(feat_shape[0], n_outputs, rng=rng, std=INIT_STD, dtype=dtype))
        return "gap_cam"
    layers.append(Flatten())
    layers.append(Dense(int(np.prod(feat_shape)), n_outputs, rng=rng, std=INIT_STD, dtype=dtype))
    return "flatten_dense"


def build_primary(representation: str = "pixel", input_size: int = 128, seed: int = 2021,
                  dtype=np.float64, widths=PRIMARY_WIDTHS) -> ModelGraph:
    """Eight 3x3 conv blocks, stride 2 every other layer, BN on all but the first.

    Pixel inputs get a GAP + dense head (CAM-capable, any resolution); DCT
    inputs get flatten + dense.
    """
    if input_size not in INPUT_SIZES:
        raise ValueError(f"input_size must be one of {INPUT_SIZES}")
    in_ch = _in_channels(representation)
    rng = np.random.default_rng(seed)
    layers = []
    branch_layer = None
    prev = in_ch
    for i, (w, s) in enumerate(zip(widths, PRIMARY_STRIDES)):
        _conv_block(layers, prev, w, s, bn=i > 0, rng=rng, dtype=dtype)
        prev = w
        if i + 1 == BRANCH_CONVS:
            branch_layer = len(layers)
    feat = _trunk_shape(layers, (in_ch, input_size, input_size))
    head = _head(layers, feat, representation, 1, rng, dtype)
    return ModelGraph(layers, (in_ch, input_size, input_size), representation, head, "sigmoid", 1,
                      branch_layer, name="primary", meta={"role": "primary", "seed": seed})


def _trunk_shape(layers, input_shape):
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    return shape


def branch_shape(primary: ModelGraph) -> tuple:
    if primary.branch_layer is None:
        raise ValueError(f"{primary.name} has no branch point")
    return primary.shapes()[primary.branch_layer]


def build_secondary(primary: ModelGraph, name: str, seed: int = 2021, dtype=None) -> ModelGraph:
    """Fresh copy of the primary's layers after the branch point, plus a new head."""
    dtype = dtype or primary.dtype
    in_shape = branch_shape(primary)
    rng = np.random.default_rng(seed)
    layers = []
    prev = in_shape[0]
    for layer in primary.layers[primary.branch_layer:]:
        if isinstance(layer, Conv2d):
            if layer.in_ch != prev:
                raise ShapeError("branch feature channels do not match the replicated layers")
            layers.append(Conv2d(layer.in_ch, layer.out_ch, layer.stride, layer.use_bias, rng=rng,
                                 std=INIT_STD, dtype=dtype))
            prev = layer.out_ch
        elif isinstance(layer, BatchNorm2d):
            layers.append(BatchNorm2d(layer.channels, layer.momentum, layer.eps, dtype=dtype))
        elif isinstance(layer, LeakyReLU):
            layers.append(LeakyReLU(layer.alpha))
        else:
            break
    feat = _trunk_shape(layers, in_shape)
    head = _head(layers, feat, primary.representation, 1, rng, dtype)
    return ModelGraph(layers, in_shape, primary.representation, head, "sigmoid", 1, None,
                      name=name, meta={"role": "secondary", "seed": seed, "source": name})


def build_baseline(name: str, decision: str = "sigmoid", representation: str = "pixel",
                   input_size: int = 128, n_classes: int = 1, seed: int = 2021, dtype=np.float64) -> ModelGraph:
    """Reconstructed comparison models (no batchnorm, average-pool downsampling)."""
    if name not in BASELINES:
        raise ValueError(f"unknown baseline {name!r}; choose from {BASELINES}")
    if decision not in ("sigmoid", "softmax"):
        raise ValueError("decision must be 'sigmoid' or 'softmax'")
    n_out = 1 if decision == "sigmoid" else n_classes
    if decision == "softmax" and n_classes < 2:
        raise ValueError("softmax decision needs n_classes >= 2")
    in_ch = _in_channels(representation)
    rng = np.random.default_rng(seed)
    layers = []
    if name == "gandct-conv":
        _conv_block(layers, in_ch, 8, 1, False, rng, dtype)
        layers.append(AvgPool2d(2))
        prev = 8
        for w in (16, 32, 64):
            _conv_block(layers, prev, w, 1, False, rng, dtype)
            prev = w
    else:
        layers += [AvgPool2d(2), AvgPool2d(2)]
        prev = in_ch
        for w in (32, 32, 64, 64, 128, 128):
            _conv_block(layers, prev, w, 1, False, rng, dtype)
            prev = w
    feat = _trunk_shape(layers, (in_ch, input_size, input_size))
    layers.append(Flatten())
    layers.append(Dense(int(np.prod(feat)), n_out, rng=rng, std=INIT_STD, dtype=dtype))
    return ModelGraph(layers, (in_ch, input_size, input_size), representation, "flatten_dense", decision,
                      n_out, None, name=name, meta={"role": "baseline", "seed": seed})


def forward_logits(model: ModelGraph, x, batch_size=256) -> np.ndarray:
    return model.predict(x, batch_size=batch_size)


@dataclass
class ModelBundle:
    primary: ModelGraph
    secondaries: dict[str, ModelGraph] = field(default_factory=dict)
    stats: SpectrumStats | None = None

    def __post_init__(self):
        for name, sec in self.secondaries.items():
            self._check(name, sec)

    def _check(self, name, sec):
        if tuple(sec.input_shape) != tuple(branch_shape(self.primary)):
            raise ShapeError(f"secondary {name!r} expects {sec.input_shape}, branch gives {branch_shape(self.primary)}")

    def add_secondary(self, name: str, sec: ModelGraph):
        if name in self.secondaries:
            raise ValueError(f"duplicate secondary name {name!r}")
        self._check(name, sec)
        self.secondaries[name] = sec

    def probe_scores(self, x, batch_size=256) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Primary and per-secondary sigmoid scores; branch features computed once."""
        from .nn import sigmoid
        p = self.primary
        feats = p.predict(x, batch_size, stop=p.branch_layer)
        primary = sigmoid(p.predict(feats, batch_size, start=p.branch_layer))[:, 0]
        secs = {name: sigmoid(s.predict(feats, batch_size))[:, 0] for name, s in self.secondaries.items()}
        return primary, secs


# --------------------------------------------------------------------------
# serialization


def _collect(bundle: ModelBundle):
    graphs = {"primary": bundle.primary}
    graphs.update({f"secondary/{k}": v for k, v in bundle.secondaries.items()})
    tensors = {}
    for prefix, g in graphs.items():
        for key, arr in g.state_dict().items():
            tensors[f"{prefix}/{key}"] = arr
    if bundle.stats is not None:
        for key, arr in bundle.stats.to_arrays().items():
            tensors[f"stats/{key}"] = arr
    return graphs, tensors


def bundle_bytes(bundle: ModelBundle) -> bytes:
    graphs, tensors = _collect(bundle)
    table, chunks, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "graphs": {k: g.describe() for k, g in graphs.items()},
        "secondary_order": list(bundle.secondaries),
        "has_stats": bundle.stats is not None,
        "tensors": table,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hdr)) + hdr + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def bundle_digest(bundle: ModelBundle) -> str:
    return hashlib.sha256(bundle_bytes(bundle)).hexdigest()


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bundle_bytes(bundle))
    return path


def parse_bundle(raw: bytes) -> ModelBundle:
    if len(raw) < len(MAGIC) + 8:
        raise BundleTruncatedError("file too short for a bundle header")
    if raw[:len(MAGIC)] != MAGIC:
        raise BundleMagicError("not a weight bundle (bad magic bytes)")
    version, hdr_len = struct.unpack("<II", raw[len(MAGIC):len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"unsupported bundle version {version}")
    start = len(MAGIC) + 8
    if len(raw) < start + hdr_len + 32:
        raise BundleTruncatedError("bundle truncated inside header")
    try:
        header = json.loads(raw[start:start + hdr_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleDigestError(f"corrupt bundle header: {exc}") from exc
    payload_len = sum(t["nbytes"] for t in header["tensors"])
    end = start + hdr_len + payload_len
    if len(raw) < end + 32:
        raise BundleTruncatedError(f"bundle truncated: expected {end + 32} bytes, got {len(raw)}")
    if len(raw) > end + 32:
        raise BundleDigestError("trailing bytes after digest")
    if hashlib.sha256(raw[:end]).digest() != raw[end:end + 32]:
        raise BundleDigestError("content digest mismatch")
    payload = memoryview(raw)[start + hdr_len:end]
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload[t["offset"]:t["offset"] + t["nbytes"]], dtype="<f4")
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)

    def graph(prefix):
        g = ModelGraph.from_description(header["graphs"][prefix], dtype=np.float32)
        g.load_state_dict({k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")})
        return g

    secs = {name: graph(f"secondary/{name}") for name in header["secondary_order"]}
    stats = None
    if header["has_stats"]:
        stats = SpectrumStats.from_arrays({k[len("stats/"):]: v for k, v in tensors.items() if k.startswith("stats/")})
    return ModelBundle(graph("primary"), secs, stats)


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read bundle {path}: {exc}") from exc
    return parse_bundle(raw)
