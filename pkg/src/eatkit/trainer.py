"""Energy-aware training: SGD with momentum on cross-entropy plus the signed sparsity penalty."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .autodiff import GradientTape, Tensor, backward, softmax_cross_entropy
from .data import Dataset, augment_batch
from .energy import CostModel, energy_ratio_over_dataset
from .errors import ConfigError, DatasetError, DivergenceError, NonFiniteError, ShapeError
from .model import ActivationRecord, Model, forward
from .sparsity import PenaltyConfig, sparsity_penalty

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_initial: float = 0.1
    lr_decay: float = 0.95
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 512
    penalty: Optional[PenaltyConfig] = None
    seed: int = 0
    shuffle: bool = True
    augment: bool = False
    crop_padding: int = 4
    max_rotation: float = 15.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.crop_padding < 0 or not 0 <= self.max_rotation <= 180:
            raise ConfigError("augmentation parameters out of range")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr_initial": self.lr_initial,
            "lr_decay": self.lr_decay,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "penalty": self.penalty.to_dict() if self.penalty is not None else None,
            "seed": self.seed,
            "shuffle": self.shuffle,
            "augment": self.augment,
            "crop_padding": self.crop_padding,
            "max_rotation": self.max_rotation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("penalty") is not None:
            kw["penalty"] = PenaltyConfig.from_dict(kw["penalty"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_penalty(self, penalty: Optional[PenaltyConfig]) -> "TrainConfig":
        return replace(self, penalty=penalty)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    penalty: float
    lr: float
    train_accuracy: float
    val_accuracy: Optional[float] = None
    energy_ratio: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    def rows(self) -> list[dict]:
        return [vars(e).copy() for e in self.epochs]


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Exponential schedule: lr_initial * lr_decay ** epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr_initial * cfg.lr_decay ** epoch


def sgd_momentum_step(weights: np.ndarray, gradients: np.ndarray, velocity: np.ndarray, lr: float,
                      momentum: float, weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """g' = g + wd * w;  v' = momentum * v + g';  w' = w - lr * v'."""
    if not (weights.shape == gradients.shape == velocity.shape):
        raise ShapeError(f"shape mismatch: w {weights.shape}, g {gradients.shape}, v {velocity.shape}")
    g = gradients + weight_decay * weights if weight_decay else gradients
    v = momentum * velocity + g
    return weights - lr * v, v


def _penalty_active(penalty: Optional[PenaltyConfig]) -> bool:
    return penalty is not None and penalty.lam != 0


def _objective_terms(model: Model, batch, labels, penalty: Optional[PenaltyConfig]):
    logits, record = forward(model, batch)
    ce = softmax_cross_entropy(logits, labels)
    if not _penalty_active(penalty):
        return ce, ce, 0.0, logits, record
    term = sparsity_penalty(record, penalty, model.parameter_count) * (penalty.sign * penalty.lam)
    return ce + term, ce, float(term.data), logits, record


def objective(model: Model, batch, labels, penalty: Optional[PenaltyConfig]) -> tuple[Tensor, ActivationRecord]:
    """Cross-entropy plus sign * lambda * sparsity penalty, and the activation record.

    sign=+1 minimizes firing activations; sign=-1 maximizes them. With no
    penalty or lambda == 0 the result is the plain cross-entropy tensor.
    """
    total, _, _, _, record = _objective_terms(model, batch, labels, penalty)
    return total, record


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size])
        preds.append(np.argmax(logits.data, axis=1))  # first max = lowest class index
    return np.concatenate(preds)


def evaluate_accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    images = dataset.images.astype(model.dtype, copy=False)
    return float(np.mean(predict(model, images, batch_size) == dataset.labels))


def train(model: Model, train_set: Dataset, cfg: TrainConfig, val_set: Optional[Dataset] = None,
          cost: Optional[CostModel] = None,
          on_epoch: Optional[Callable[[EpochStats], None]] = None) -> tuple[Model, TrainHistory]:
    """Run ``cfg.epochs`` epochs of mini-batch SGD on a copy of ``model``.

    The input model is left untouched. Batch order and augmentation are drawn
    from generators seeded by ``cfg.seed``; the last partial batch is kept.
    With ``val_set`` each epoch records validation accuracy, and with ``cost``
    as well, the validation energy ratio.
    """
    if len(train_set) == 0:
        raise DatasetError("training set is empty")
    trained = model.copy()
    for w in trained.weights:
        w.requires_grad = True
    velocity = [np.zeros_like(w.data) for w in trained.weights]
    shuffle_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    order_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    images = train_set.images.astype(trained.dtype, copy=False)
    labels = train_set.labels
    n = len(train_set)
    history = TrainHistory()

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = order_rng.permutation(n) if cfg.shuffle else np.arange(n)
        loss_sum = pen_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if cfg.augment:
                x = augment_batch(x, aug_rng, cfg.crop_padding, cfg.max_rotation)
            try:
                with GradientTape() as tape:
                    total, _, pen, logits, _ = _objective_terms(trained, x, y, cfg.penalty)
            except NonFiniteError as exc:
                raise DivergenceError(str(exc), epoch, b) from exc
            loss = float(total.data)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite loss", epoch, b)
            grads = backward(tape, total, trained.weights)
            for i, w in enumerate(trained.weights):
                g = grads[w]
                if not np.isfinite(g).all():
                    raise DivergenceError(f"non-finite gradient for {w.name}", epoch, b)
                w.data, velocity[i] = sgd_momentum_step(w.data, g, velocity[i], lr,
                                                        cfg.momentum, cfg.weight_decay)
            loss_sum += loss * len(idx)
            pen_sum += pen * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))

        stats = EpochStats(epoch, loss_sum / n, pen_sum / n, lr, correct / n)
        if val_set is not None:
            try:
                stats.val_accuracy = evaluate_accuracy(trained, val_set)
                if cost is not None:
                    stats.energy_ratio = energy_ratio_over_dataset(
                        trained, val_set.images.astype(trained.dtype, copy=False), cost)
            except NonFiniteError as exc:
                raise DivergenceError(str(exc), epoch, -1) from exc
        history.epochs.append(stats)
        log.debug("epoch %d loss %.5f penalty %.5f acc %.4f", epoch, stats.loss, stats.penalty,
                  stats.train_accuracy)
        if on_epoch is not None:
            on_epoch(stats)
    return trained, history
