"""Cross-entropy loss, its gradients, Adam, and the fine-tuning loop."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .encoder import (
    ForwardCache,
    ModelParams,
    StaleCacheError,
    backward_from_logits,
    forward,
    log_softmax,
    predict_proba,
    softmax,
)
from .tokenizer import Batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 2e-5
    epochs: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    # all off by default
    warmup_steps: int = 0
    # "constant", or "linear" decay to zero at the final step
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    # stop once eval-mode train accuracy reaches this value
    early_stop_accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("warmup_steps and weight_decay must be nonnegative")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


# -- loss and gradients ------------------------------------------------------------


def cross_entropy(logits: np.ndarray, gold: int | np.ndarray) -> float:
    """-log softmax(logits)[gold]; with a batch of logits, the mean over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    logits2 = logits[None, :] if single else logits
    gold_arr = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    num_classes = logits2.shape[1]
    if gold_arr.shape != (logits2.shape[0],):
        raise ValueError(f"need one gold label per row, got {gold_arr.shape} for {logits2.shape}")
    if gold_arr.min() < 0 or gold_arr.max() >= num_classes:
        raise ValueError(f"gold label out of range [0, {num_classes})")
    logp = log_softmax(logits2)[np.arange(len(gold_arr)), gold_arr]
    return float(-logp.mean())


def cross_entropy_grad(logits: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d(logits) = (softmax - onehot) / batch."""
    probs = softmax(logits)
    probs[np.arange(len(gold)), gold] -= 1.0
    return probs / len(gold)


def backward(params: ModelParams, batch: Batch, cache: ForwardCache) -> "OrderedDict[str, np.ndarray]":
    """Exact gradients of the mean batch cross-entropy for every parameter tensor."""
    if cache.batch is not batch:
        raise StaleCacheError("cache belongs to a different batch")
    if batch.labels is None:
        raise ValueError("batch has no labels")
    return backward_from_logits(params, cache, cross_entropy_grad(cache.logits, batch.labels))


def loss_and_grads(
    params: ModelParams, batch: Batch, rng: np.random.Generator | None = None, mode: str = "train"
) -> tuple[float, "OrderedDict[str, np.ndarray]", np.ndarray]:
    logits, cache = forward(params, batch, mode, rng)
    return cross_entropy(logits, batch.labels), backward(params, batch, cache), logits


# -- optimizer -------------------------------------------------------------------------


@dataclass
class OptimizerState:
    first_moment: "OrderedDict[str, np.ndarray]"
    second_moment: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            OrderedDict((k, np.zeros_like(v)) for k, v in params.items()),
            OrderedDict((k, np.zeros_like(v)) for k, v in params.items()),
        )


def _decays(name: str) -> bool:
    return not name.endswith((".bias", ".scale", ".shift"))


def learning_rate_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warmup over ``warmup_steps``, then constant or linearly decaying. ``step`` is 1-based."""
    if config.warmup_steps and step <= config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    if config.lr_schedule == "linear" and total_steps:
        remaining = max(0, total_steps - step + 1)
        return config.learning_rate * remaining / max(1, total_steps - config.warmup_steps)
    return config.learning_rate


def total_steps(n: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n / config.batch_size)


def adam_step(
    params: ModelParams,
    grads: "dict[str, np.ndarray]",
    state: OptimizerState,
    config: TrainConfig,
    total_steps: int | None = None,
) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name in params:
        if grads[name].shape != params[name].shape or state.first_moment[name].shape != params[name].shape:
            raise ValueError(f"{name}: shape mismatch between parameter, gradient and optimizer state")
    if config.max_grad_norm is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.max_grad_norm:
            grads = {k: g * (config.max_grad_norm / norm) for k, g in grads.items()}
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr = learning_rate_at(t, config, total_steps)
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
        if config.weight_decay and _decays(name):
            p -= lr * config.weight_decay * p
    params.version += 1
    return params, state


# -- loop ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    eval_accuracy: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    # mean batch loss before each optimizer step
    step_losses: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_loss", "train_accuracy", "eval_accuracy"])
            for r in self.epochs:
                writer.writerow([
                    r.epoch,
                    repr(r.mean_loss),
                    repr(r.train_accuracy),
                    "" if r.eval_accuracy is None else repr(r.eval_accuracy),
                ])

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainHistory":
        with Path(path).open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            EpochRecord(
                int(r["epoch"]),
                float(r["mean_loss"]),
                float(r["train_accuracy"]),
                float(r["eval_accuracy"]) if r["eval_accuracy"] else None,
            )
            for r in rows
        ])


def epoch_order(n: int, epoch: int, seed: int, shuffle: bool = True) -> np.ndarray:
    """Example order for one epoch; the permutation stream depends only on (seed, epoch)."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(n: int, batch_size: int, epoch: int, seed: int, shuffle: bool = True) -> list[np.ndarray]:
    order = epoch_order(n, epoch, seed, shuffle)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def class_accuracy(params: ModelParams, data: Batch) -> float:
    """Fraction of rows whose eval-mode argmax equals the row label."""
    probs = predict_proba(params, data)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def train(
    params: ModelParams,
    data: Batch,
    config: TrainConfig,
    eval_data: Batch | None = None,
    state: OptimizerState | None = None,
    on_epoch_end: Callable[[int, ModelParams, TrainHistory], None] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Fine-tune ``params`` in place on encoded, labeled ``data``.

    Runs ``epochs * ceil(N / batch_size)`` steps (the last short batch is kept),
    unless ``early_stop_accuracy`` is reached first.
    """
    if data.labels is None or len(data) == 0:
        raise ValueError("training data must be nonempty and labeled")
    num_classes = params.config.num_classes
    if data.labels.max() >= num_classes:
        raise ValueError(
            f"labels reach class {int(data.labels.max())} but the model head has {num_classes} outputs"
        )
    state = state or OptimizerState.zeros_like(params)
    history = TrainHistory()
    n = len(data)
    steps = total_steps(n, config)
    for epoch in range(1, config.epochs + 1):
        dropout_rng = np.random.default_rng([config.seed, epoch, 1])
        total = 0.0
        for idx in batch_indices(n, config.batch_size, epoch, config.seed, config.shuffle):
            batch = data.take(idx)
            loss, grads, _ = loss_and_grads(params, batch, dropout_rng)
            history.step_losses.append(loss)
            total += loss * len(idx)
            adam_step(params, grads, state, config, steps)
        train_acc = class_accuracy(params, data)
        eval_acc = class_accuracy(params, eval_data) if eval_data is not None else None
        history.epochs.append(EpochRecord(epoch, total / n, train_acc, eval_acc))
        log.info("epoch %d loss %.6f train-acc %.4f", epoch, total / n, train_acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, history)
        if config.early_stop_accuracy is not None and train_acc >= config.early_stop_accuracy:
            break
    return params, history
