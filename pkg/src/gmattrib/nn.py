"""Small differentiable operator set: conv/BN/LeakyReLU/pooling/dense, losses, Adam.

Tensors are plain numpy arrays in NCHW layout. Every layer caches what its
backward pass needs only when asked to (``cache=True``), so inference on a
frozen graph never mutates it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

LEAKY_ALPHA = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


def gaussian_init(shape, std: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (rng.standard_normal(shape) * std).astype(dtype)


# --------------------------------------------------------------------------
# functional ops


def conv_out_size(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                       j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * 9, ho * wo)


def _col2im(dcols: np.ndarray, shape, stride: int) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = conv_out_size(h, stride), conv_out_size(w, stride)
    dcols = dcols.reshape(b, c, 9, ho, wo)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, 3 * i + j]
    return dxp[:, :, 1:-1, 1:-1]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1."""
    if weight.shape[2:] != (3, 3):
        raise ShapeError(f"expected 3x3 kernel, got {weight.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {weight.shape}")
    b, _, h, w = x.shape
    out = np.matmul(weight.reshape(weight.shape[0], -1), _im2col(x, stride))
    out = out.reshape(b, weight.shape[0], conv_out_size(h, stride), conv_out_size(w, stride))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def leaky_relu(x: np.ndarray, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return np.maximum(x, alpha * x)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def avg_pool2d(x: np.ndarray, pool_size: int = 2) -> np.ndarray:
    b, c, h, w = x.shape
    if h % pool_size or w % pool_size:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {pool_size}")
    return x.reshape(b, c, h // pool_size, pool_size, w // pool_size, pool_size).mean(axis=(3, 5))


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_bce(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Sigmoid probabilities and mean binary cross-entropy (log-sum-exp form)."""
    labels = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    z = logits
    loss = np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))
    return sigmoid(z), float(loss.mean())


def sigmoid_bce_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=probs.dtype).reshape(probs.shape)
    return (probs - labels) / probs.shape[0]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels) -> tuple[np.ndarray, float]:
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.ndim != 1 or len(labels) != len(logits):
        raise ShapeError("one integer label per row expected")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(len(labels)), labels]
    return softmax(logits), float(nll.mean())


def softmax_ce_grad(probs: np.ndarray, labels) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(g)), np.asarray(labels)] -= 1.0
    return g / len(g)


# --------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"
    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=False, cache=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache

    def output_shape(self, shape):
        return shape

    def describe(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        self.grads = {}
        self._cache = None


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, stride=1, bias=True, rng=None, std=0.02, dtype=np.float64):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_ch, self.out_ch, self.stride, self.use_bias = in_ch, out_ch, stride, bias
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = gaussian_init((out_ch, in_ch, 3, 3), std, rng, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def forward(self, x, train=False, cache=False):
        w = self.params["weight"]
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"conv2d expects {self.in_ch} channels, got {x.shape[1]}")
        b, _, h, wd = x.shape
        cols = _im2col(x, self.stride)
        out = np.matmul(w.reshape(self.out_ch, -1), cols)
        out = out.reshape(b, self.out_ch, conv_out_size(h, self.stride), conv_out_size(wd, self.stride))
        if self.use_bias:
            out += self.params["bias"][None, :, None, None]
        self._cache = (cols, x.shape) if cache else None
        return out

    def backward(self, dout):
        cols, xshape = self._need_cache()
        b = dout.shape[0]
        d = dout.reshape(b, self.out_ch, -1)
        w = self.params["weight"]
        self.grads["weight"] = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if self.use_bias:
            self.grads["bias"] = d.sum(axis=(0, 2))
        dcols = np.matmul(w.reshape(self.out_ch, -1).T, d)
        return _col2im(dcols, xshape, self.stride)

    def output_shape(self, shape):
        c, h, w = shape
        return (self.out_ch, conv_out_size(h, self.stride), conv_out_size(w, self.stride))

    def describe(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "stride": self.stride, "bias": self.use_bias}


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False, cache=False):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            if x.shape[0] < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train) if cache else None
        return xhat * gamma + beta

    def backward(self, dout):
        xhat, inv_std, train = self._need_cache()
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        if not train:
            return dxhat * inv_std[None, :, None, None]
        n = dout.shape[0] * dout.shape[2] * dout.shape[3]
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv_std[None, :, None, None] / n * (n * dxhat - sum_d - xhat * sum_dx)

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}


class LeakyReLU(Layer):
    kind = "leaky_relu"
    trainable = False

    def __init__(self, alpha=LEAKY_ALPHA):
        super().__init__()
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.alpha = alpha

    def forward(self, x, train=False, cache=False):
        self._cache = x if cache else None
        return np.maximum(x, self.alpha * x)

    def backward(self, dout):
        x = self._need_cache()
        slope = (x >= 0).astype(dout.dtype)
        slope *= 1 - self.alpha
        slope += self.alpha
        return dout * slope

    def describe(self):
        return {"kind": self.kind, "alpha": self.alpha}


class AvgPool2d(Layer):
    kind = "avg_pool2d"
    trainable = False

    def __init__(self, pool_size=2):
        super().__init__()
        self.pool_size = pool_size

    def forward(self, x, train=False, cache=False):
        self._cache = x.shape if cache else None
        return avg_pool2d(x, self.pool_size)

    def backward(self, dout):
        self._need_cache()
        p = self.pool_size
        return np.repeat(np.repeat(dout, p, axis=2), p, axis=3) / (p * p)

    def output_shape(self, shape):
        c, h, w = shape
        if h % self.pool_size or w % self.pool_size:
            raise ShapeError(f"spatial size {h}x{w} not divisible by {self.pool_size}")
        return (c, h // self.pool_size, w // self.pool_size)

    def describe(self):
        return {"kind": self.kind, "pool_size": self.pool_size}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"
    trainable = False

    def forward(self, x, train=False, cache=False):
        self._cache = x.shape if cache else None
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._need_cache()
        return np.broadcast_to(dout[:, :, None, None] / (h * w), (b, c, h, w)).copy()

    def output_shape(self, shape):
        return (shape[0],)


class Flatten(Layer):
    kind = "flatten"
    trainable = False

    def forward(self, x, train=False, cache=False):
        self._cache = x.shape if cache else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._need_cache())

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, std=0.02, dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = gaussian_init((out_features, in_features), std, rng, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False, cache=False):
        self._cache = x if cache else None
        return dense(x, self.params["weight"], self.params["bias"])

    def backward(self, dout):
        x = self._need_cache()
        self.grads["weight"] = dout.T @ x
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"]

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, BatchNorm2d, LeakyReLU, AvgPool2d, GlobalAvgPool, Flatten, Dense)}


def layer_from_description(desc: dict, dtype=np.float64) -> Layer:
    d = dict(desc)
    kind = d.pop("kind")
    if kind == "conv2d":
        return Conv2d(d["in_ch"], d["out_ch"], d["stride"], d["bias"], dtype=dtype)
    if kind == "batchnorm2d":
        return BatchNorm2d(d["channels"], d["momentum"], d["eps"], dtype=dtype)
    if kind == "dense":
        return Dense(d["in_features"], d["out_features"], dtype=dtype)
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**d)


# --------------------------------------------------------------------------
# graph


@dataclass
class ModelGraph:
    """An ordered stack of layers plus the metadata the toolkit needs.

    ``input_shape`` is (channels, height, width). ``branch_layer`` is the
    number of leading layers whose output feeds secondary modules (None when
    the graph has no branch point).
    """

    layers: list[Layer]
    input_shape: tuple[int, int, int]
    representation: str = "pixel"
    head: str = "gap_cam"
    decision: str = "sigmoid"
    n_outputs: int = 1
    branch_layer: int | None = None
    name: str = "model"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes()  # validates the stack

    def shapes(self, input_shape=None) -> list[tuple]:
        shape = tuple(input_shape or self.input_shape)
        out = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params.values():
                return p.dtype
        return np.float64

    def astype(self, dtype) -> "ModelGraph":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, train=False, cache=False, start=0, stop=None):
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers[start:stop]:
            x = layer.forward(x, train=train, cache=cache)
        return x

    def backward(self, dout, start=0, stop=None):
        """Backpropagate through layers[start:stop]; returns the input gradient."""
        for layer in reversed(self.layers[start:stop]):
            dout = layer.backward(dout)
        return dout

    def predict(self, x, batch_size=256, start=0, stop=None):
        """Eval-mode forward in chunks; safe to call concurrently."""
        x = np.asarray(x)
        outs = [self.forward(x[i:i + batch_size], start=start, stop=stop) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i:02d}.{layer.kind}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{i:02d}.{layer.kind}.{k}": layer.grads[k]
                for i, layer in enumerate(self.layers) for k in layer.params}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.named_params()
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                state[f"{i:02d}.{layer.kind}.{k}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{i:02d}.{layer.kind}.{k}"
                    if key not in state:
                        raise KeyError(f"missing tensor {key}")
                    if state[key].shape != store[k].shape:
                        raise ShapeError(f"{key}: shape {state[key].shape} != {store[k].shape}")
                    store[k] = np.array(state[key], dtype=store[k].dtype)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.named_params().values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, v in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(v, dtype=np.float32).tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "representation": self.representation,
            "head": self.head,
            "decision": self.decision,
            "n_outputs": self.n_outputs,
            "branch_layer": self.branch_layer,
            "layers": [layer.describe() for layer in self.layers],
            "meta": self.meta,
        }

    @classmethod
    def from_description(cls, desc: dict, dtype=np.float64) -> "ModelGraph":
        return cls(
            layers=[layer_from_description(d, dtype) for d in desc["layers"]],
            input_shape=tuple(desc["input_shape"]),
            representation=desc["representation"],
            head=desc["head"],
            decision=desc["decision"],
            n_outputs=desc["n_outputs"],
            branch_layer=desc["branch_layer"],
            name=desc["name"],
            meta=dict(desc.get("meta", {})),
        )


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for k, p in params.items():
        if k not in grads or grads[k].shape != p.shape:
            raise ShapeError(f"gradient for {k} missing or mis-shaped")
        if k in state.m and state.m[k].shape != p.shape:
            raise ShapeError(f"optimizer state for {k} mis-shaped")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params
