"""SGD training loop, step learning-rate schedule, loss and error metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Variable, no_grad
from .data import AugmentConfig, LabeledImages, normalize, prefetch, training_batches
from .errors import NumericError
from .models import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 30
    milestones: tuple[int, ...] = (15, 23)
    decay_factor: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor is a divisor and must exceed 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# Full-length CIFAR schedule: 200 epochs, lr / 5 after epochs 60, 120 and 160.
PAPER_SCHEDULE = TrainConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, batch_size=128,
                             epochs=200, milestones=(60, 120, 160), decay_factor=5.0)


def lr_at(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr0 / config.decay_factor ** passed


@dataclass
class TrainState:
    epoch: int = 0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    best_val_metric: float = math.inf
    rng_state: dict | None = None


def sgd_step(params, state: TrainState, lr: float, momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD: v = m*v + (g + wd*w); w -= lr*v.

    Weight decay applies only to parameters flagged with ``decay``.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {p.name}")
    for p in params:
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.value
        v = state.velocities.get(p.name)
        v = g if v is None else momentum * v + g
        state.velocities[p.name] = v
        p.value = p.value - lr * v


def cross_entropy(logits, labels) -> Variable:
    return ops.softmax_cross_entropy(logits, labels)


def topk_error(logits, labels, k: int) -> float:
    """Percentage of rows whose label is not among the k largest logits.

    Ties rank the lower class index first.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, num = logits.shape
    if not 1 <= k <= num:
        raise ValueError(f"k must lie in [1, {num}]")
    # a class outranks the label if its logit is larger, or equal with a lower index
    target = logits[np.arange(n), labels][:, None]
    idx = np.arange(num)[None, :]
    ahead = (logits > target) | ((logits == target) & (idx < labels[:, None]))
    rank = ahead.sum(axis=1)
    return 100.0 * float(np.mean(rank >= k))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_top1: float
    val_top5: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict[str, np.ndarray] | None = None
    diverged: bool = False
    final_state: TrainState | None = None

    @property
    def best(self) -> EpochRecord | None:
        return self.records[self.best_epoch] if self.best_epoch >= 0 else None


def evaluate(model: Model, data: LabeledImages, norm, batch_size: int = 256) -> dict[str, float]:
    """Loss and top-1/top-5 error in eval mode, without touching parameters."""
    losses, logits_all = [], []
    with no_grad():
        for start in range(0, len(data), batch_size):
            x = normalize(data.images[start : start + batch_size], norm)
            y = data.labels[start : start + batch_size]
            logits = model(x, "eval")
            losses.append(float(cross_entropy(logits, y).value) * len(y))
            logits_all.append(logits.value)
    logits = np.concatenate(logits_all)
    k5 = min(5, logits.shape[1])
    return {
        "loss": sum(losses) / len(data),
        "top1": topk_error(logits, data.labels, 1),
        "top5": topk_error(logits, data.labels, k5),
    }


def fit(model: Model, train_set: LabeledImages, val_set: LabeledImages, config: TrainConfig,
        augment_config: AugmentConfig | None = None, norm=None, on_epoch=None) -> TrainHistory:
    """Train ``model`` in place and return the per-epoch history.

    ``norm`` defaults to statistics of ``train_set``. The best epoch is the
    one with the lowest validation top-1 error (earliest on ties); its
    parameters are kept in ``history.best_state``.
    """
    if norm is None:
        norm = train_set.norm_stats()
    augment_config = augment_config or AugmentConfig()
    rng = np.random.default_rng([config.seed, 0x5EED])
    params = model.parameters()
    state = TrainState()
    history = TrainHistory(final_state=state)

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        total, count = 0.0, 0
        try:
            stream = training_batches(train_set, config.batch_size, rng, augment_config, norm)
            for xb, yb in prefetch(stream):
                for p in params:
                    p.zero_grad()
                loss = cross_entropy(model(xb, "train"), yb)
                lval = float(loss.value)
                if not math.isfinite(lval):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                loss.backward()
                del loss
                sgd_step(params, state, lr, config.momentum, config.weight_decay)
                total += lval * len(yb)
                count += len(yb)
        except NumericError as exc:
            log.warning("training stopped: %s", exc)
            history.diverged = True
            break
        metrics = evaluate(model, val_set, norm)
        rec = EpochRecord(epoch, lr, total / max(count, 1), metrics["loss"], metrics["top1"], metrics["top5"])
        history.records.append(rec)
        if rec.val_top1 < state.best_val_metric:
            state.best_val_metric = rec.val_top1
            history.best_epoch = epoch
            history.best_state = model.state_dict()
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        log.info("epoch %d lr=%.5g train_loss=%.4f val_loss=%.4f top1=%.2f",
                 epoch, lr, rec.train_loss, rec.val_loss, rec.val_top1)
        if on_epoch is not None:
            on_epoch(rec, model, state)
    return history
