"""Optimization loops, early stopping, frozen-primary secondary training."""

from __future__ import annotations

import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .nn import AdamState, ModelGraph, adam_step, sigmoid_bce, sigmoid_bce_grad, softmax_ce, softmax_ce_grad

log = logging.getLogger(__name__)

TASK_LR = {"detection": 1e-3, "attribution": 1e-4}
DATA_SEED = 0
MODEL_SEEDS = (2021, 1000)


class TrainingError(RuntimeError):
    pass


class FrozenPrimaryError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "detection"
    lr: float | None = None
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.0
    target_val_loss: float | None = None
    data_seed: int = DATA_SEED
    model_seed: int = MODEL_SEEDS[0]
    init_std: float = 0.02
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.task not in TASK_LR:
            raise ValueError(f"task must be one of {sorted(TASK_LR)}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def learning_rate(self) -> float:
        return TASK_LR[self.task] if self.lr is None else self.lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learning_rate"] = self.learning_rate
        return d


@dataclass
class EpochTelemetry:
    epoch: int
    train_loss: float
    val_loss: float
    train_accuracy: float
    positive_fraction: float
    negative_ratio: float = float("nan")
    val_accuracy: float = float("nan")


@dataclass
class TrainResult:
    history: list[EpochTelemetry] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    initial_val_loss: float = math.inf
    stop_reason: str = ""

    def epochs_run(self) -> int:
        return len(self.history)


def _loss(model: ModelGraph, logits, labels):
    if model.decision == "softmax":
        probs, loss = softmax_ce(logits, labels)
        return probs, loss, softmax_ce_grad(probs, labels)
    probs, loss = sigmoid_bce(logits, labels)
    return probs, loss, sigmoid_bce_grad(probs, labels)


def _predicted_positive(model, probs):
    if model.decision == "softmax":
        return probs.argmax(axis=1)
    return (probs[:, 0] > 0.5).astype(int)


def evaluate_loss(model: ModelGraph, x, y, batch_size=256, feature_fn=None) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        if feature_fn is not None:
            xb = feature_fn(xb)
        logits = model.forward(xb)
        probs, loss, _ = _loss(model, logits, y[i:i + batch_size])
        total += loss * len(xb)
        correct += int((_predicted_positive(model, probs) == np.asarray(y[i:i + batch_size]).ravel()).sum())
    return total / len(x), correct / len(x)


def train(model: ModelGraph, train_x, train_y, val_x, val_y, cfg: TrainConfig,
          feature_fn: Callable | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Adam with early stopping on validation cross-entropy.

    The model is left holding the weights of its best validation epoch
    (epoch 0 = the weights it came in with). ``feature_fn`` maps raw batches
    to model inputs on the fly (used for frozen-primary features).
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise TrainingError("training and validation splits must be non-empty")
    train_y = np.asarray(train_y)
    val_y = np.asarray(val_y)
    state = AdamState(lr=cfg.learning_rate)
    result = TrainResult()
    best_state = copy.deepcopy(model.state_dict())
    result.initial_val_loss, _ = evaluate_loss(model, val_x, val_y, cfg.eval_batch_size, feature_fn)
    result.best_val_loss = result.initial_val_loss
    stale = 0
    n = len(train_x)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.data_seed, cfg.model_seed, epoch]).permutation(n)
        losses, seen, correct, positives, negatives = 0.0, 0, 0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            xb = train_x[idx]
            if feature_fn is not None:
                xb = feature_fn(xb)
            yb = train_y[idx]
            logits = model.forward(xb, train=True, cache=True)
            probs, loss, dlogits = _loss(model, logits, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, step {start // cfg.batch_size}")
            model.backward(dlogits.astype(logits.dtype))
            adam_step(model.named_params(), model.named_grads(), state)
            pred = _predicted_positive(model, probs)
            yflat = yb.ravel()
            losses += loss * len(idx)
            seen += len(idx)
            correct += int((pred == yflat).sum())
            positives += int((pred > 0).sum())
            negatives += int((yflat == 0).sum())
        model.clear_cache()
        val_loss, val_acc = evaluate_loss(model, val_x, val_y, cfg.eval_batch_size, feature_fn)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        tel = EpochTelemetry(epoch, losses / seen, val_loss, correct / seen, positives / seen,
                             negatives / seen, val_acc)
        result.history.append(tel)
        log.info("epoch %d train_loss=%.4f val_loss=%.4f acc=%.3f", epoch, tel.train_loss, val_loss, tel.train_accuracy)
        if on_epoch is not None:
            on_epoch(tel)
        if val_loss < result.best_val_loss - cfg.min_delta:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
            if cfg.target_val_loss is not None and val_loss <= cfg.target_val_loss:
                result.stop_reason = f"validation loss reached {cfg.target_val_loss}"
                break
        else:
            stale += 1
            if stale >= cfg.patience:
                result.stop_reason = f"no validation improvement for {cfg.patience} epochs"
                break
    else:
        result.stop_reason = f"reached max_epochs={cfg.max_epochs}"
    model.load_state_dict(best_state)
    return result


# --------------------------------------------------------------------------
# frozen primary + secondaries


def freeze(model: ModelGraph) -> ModelGraph:
    model.meta["frozen"] = True
    model.clear_cache()
    return model


def is_frozen(model: ModelGraph) -> bool:
    return bool(model.meta.get("frozen"))


def branch_features(primary: ModelGraph, x, batch_size=256) -> np.ndarray:
    """Eval-mode activations at the primary's branch point."""
    if primary.branch_layer is None:
        raise ValueError(f"{primary.name} has no branch point")
    return primary.predict(x, batch_size=batch_size, stop=primary.branch_layer)


def train_secondary(primary: ModelGraph, secondary: ModelGraph, train_x, train_y, val_x, val_y,
                    cfg: TrainConfig, cached: bool = True, features=None) -> TrainResult:
    """Fit one secondary on features of a frozen primary.

    ``features`` may carry precomputed (train, val) branch features to share
    between several secondaries; otherwise they are computed here (cached)
    or per batch (``cached=False``).
    """
    if not is_frozen(primary):
        raise FrozenPrimaryError("primary module must be frozen before secondary training")
    before = primary.digest()
    if features is not None:
        result = train(secondary, features[0], train_y, features[1], val_y, cfg)
    elif cached:
        result = train(secondary, branch_features(primary, train_x, cfg.eval_batch_size), train_y,
                       branch_features(primary, val_x, cfg.eval_batch_size), val_y, cfg)
    else:
        result = train(secondary, train_x, train_y, val_x, val_y, cfg,
                       feature_fn=lambda xb: primary.forward(xb, stop=primary.branch_layer))
    if primary.digest() != before:
        raise FrozenPrimaryError("primary weights changed during secondary training")
    return result


def one_vs_rest_labels(sources, source_of_interest: str) -> np.ndarray:
    """Positive = images from the source of interest; negative = real and every other source."""
    return (np.asarray(sources) == source_of_interest).astype(np.int64)


def train_secondaries(primary: ModelGraph, secondaries: dict[str, ModelGraph], train_x, train_sources,
                      val_x, val_sources, cfg: TrainConfig, workers: int = 1) -> dict[str, TrainResult]:
    """Train one-vs-rest secondaries against a shared, read-only feature cache."""
    if not is_frozen(primary):
        raise FrozenPrimaryError("primary module must be frozen before secondary training")
    feats = (branch_features(primary, train_x, cfg.eval_batch_size),
             branch_features(primary, val_x, cfg.eval_batch_size))

    def job(name):
        return name, train_secondary(primary, secondaries[name], None, one_vs_rest_labels(train_sources, name),
                                     None, one_vs_rest_labels(val_sources, name), cfg, features=feats)

    if workers <= 1:
        return dict(job(name) for name in secondaries)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(job, list(secondaries)))


# --------------------------------------------------------------------------
# diagnostics


def epoch_telemetry_check(history: list[EpochTelemetry], negative_ratio: float | None = None) -> list[dict]:
    """Flag epochs where the model predicted (essentially) everything negative."""
    if not history:
        raise ValueError("empty history")
    out = []
    for tel in history:
        ratio = tel.negative_ratio if negative_ratio is None else negative_ratio
        stagnant = abs(tel.train_accuracy - ratio) <= 1e-6 and tel.positive_fraction < 1e-3
        out.append({"epoch": tel.epoch, "all_negative_stagnancy": bool(stagnant)})
    return out


def stagnant_epochs(history, negative_ratio=None) -> list[int]:
    return [d["epoch"] for d in epoch_telemetry_check(history, negative_ratio) if d["all_negative_stagnancy"]]


def epochs_to_threshold(history: list[EpochTelemetry], target: float) -> int | None:
    """First epoch whose validation loss is at or below ``target``."""
    for tel in history:
        if tel.val_loss <= target:
            return tel.epoch
    return None
