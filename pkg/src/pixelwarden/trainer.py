"""Minibatch SGD with momentum on cross-entropy, validated every epoch."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset_io import LabeledDataset
from .defense import augment_batch
from .model import (
    ClassifierModel, batch_loss_and_grad, normalize, predict_dataset, predict_logits,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite; usually the learning rate is too high."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    augment: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()[:16]


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    # excluded from equality: timing varies between otherwise identical runs
    epoch_seconds: list[float] = field(default_factory=list, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for i in range(self.epochs):
            w.writerow([i + 1, repr(self.train_loss[i]), repr(self.train_acc[i]), repr(self.val_acc[i])])
        return buf.getvalue()

    def to_json(self, include_timing: bool = False) -> str:
        d = asdict(self)
        if not include_timing:
            d.pop("epoch_seconds")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainRecord":
        return cls(**json.loads(text))

    @classmethod
    def from_csv(cls, text: str) -> "TrainRecord":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["train_loss"]) for r in rows],
                   [float(r["train_acc"]) for r in rows],
                   [float(r["val_acc"]) for r in rows])


def channel_stats(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of [0, 1]-scaled pixels."""
    x = dataset.images.reshape(-1, dataset.images.shape[-1]).astype(np.float64) / 255.0
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def evaluate_accuracy(model: ClassifierModel, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict_dataset(model, dataset.images)
    return float(np.mean(pred == dataset.labels))


def _check_compatible(model: ClassifierModel, dataset: LabeledDataset, what: str) -> None:
    if len(dataset) == 0:
        raise ValueError(f"{what} set is empty")
    if tuple(dataset.image_shape) != tuple(model.input_shape):
        raise ValueError(f"{what} images {dataset.image_shape} != model input {model.input_shape}")
    if dataset.num_classes != model.num_classes:
        raise ValueError(f"{what} has {dataset.num_classes} classes, model {model.num_classes}")


def train(model_init: ClassifierModel, train_set: LabeledDataset, val_set: LabeledDataset,
          config: TrainConfig = TrainConfig(), set_normalization: bool = True,
          ) -> tuple[ClassifierModel, TrainRecord]:
    """Train a copy of ``model_init``; returns the final-epoch model.

    Normalization statistics are taken from ``train_set`` as given (tampered
    or not) unless ``set_normalization`` is false.
    """
    _check_compatible(model_init, train_set, "train")
    _check_compatible(model_init, val_set, "validation")
    model = model_init.astype(np.dtype(config.dtype))
    if set_normalization:
        model.norm_mean, model.norm_std = channel_stats(train_set)

    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    lr = model.dtype.type(config.learning_rate)
    mu = model.dtype.type(config.momentum)
    n = len(train_set)
    record = TrainRecord()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        aug_seed = int(rng.integers(2**63)) if config.augment else None
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            images = train_set.images[idx]
            if aug_seed is not None:
                images = augment_batch(images, [aug_seed, start])
            x = normalize(model, images)
            y = train_set.labels[idx]
            # overflow shows up as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, logits = batch_loss_and_grad(model, x, y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch + 1}, batch starting {start}; "
                    f"learning rate {config.learning_rate} is likely too high"
                )
            for k, g in grads.items():
                v = velocity[k]
                v *= mu
                v += g
                model.params[k] -= lr * v
            loss_sum += loss * len(idx)
            correct += int((predict_logits(logits) == y).sum())
        if not model.all_finite():
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch + 1}")
        record.train_loss.append(loss_sum / n)
        record.train_acc.append(correct / n)
        record.val_acc.append(evaluate_accuracy(model, val_set))
        record.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.4f train_acc %.4f val_acc %.4f (%.1fs)",
                 epoch + 1, config.epochs, record.train_loss[-1], record.train_acc[-1],
                 record.val_acc[-1], record.epoch_seconds[-1])
    return model, record
