"""Loss, gradients, optimizers and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NetworkConfig, TrainConfig
from .errors import DataError, ParameterError, ShapeError
from .grid import rotate_resample
from .model import ParamStore, forward, init_params, predict

__all__ = [
    "loss_cross_entropy",
    "backward",
    "SGD",
    "Adam",
    "make_optimizer",
    "scheduled_lr",
    "optimizer_step",
    "TrainRecord",
    "accuracy",
    "accuracy_at_angle",
    "train",
]


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    return labels


def loss_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, K), got {logits.shape}")
    labels = _check_labels(labels, logits.shape[1])
    if len(labels) != logits.shape[0]:
        raise ShapeError("one label per logits row required")
    return ad.cross_entropy(logits, labels)


def backward(config: NetworkConfig, params: ParamStore, images, labels,
             training: bool = True, dtype=np.float64) -> float:
    """Fill ``params.grads`` with d(loss)/d(param) for one batch; returns the loss."""
    leaves = params.leaves(dtype)
    logits = forward(config, params, images, training=training, leaves=leaves, dtype=dtype).logits
    loss = loss_cross_entropy(logits, labels)
    loss.backward()
    params.collect(leaves)
    return float(loss.data)


# -- optimizers -----------------------------------------------------------------


@dataclass
class SGD:
    lr: float
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
            else:
                v = g
            params.params[name] = params.params[name] - self.lr * v


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params.params[name] = params.params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum)
    if cfg.optimizer == "adam":
        return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    raise ParameterError(f"unknown optimizer {cfg.optimizer!r}")


def scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for batch ``step`` (0-based) of a ``total_steps`` run."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / max(total_steps, 1)))
    raise ParameterError(f"unknown schedule {cfg.schedule!r}")


def optimizer_step(params: ParamStore, grads: dict[str, np.ndarray] | None, optimizer) -> ParamStore:
    """Apply one update in place and return ``params``."""
    grads = params.grads if grads is None else grads
    for name, g in grads.items():
        if name not in params.params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if np.shape(g) != params.params[name].shape:
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} != {params.params[name].shape}")
    optimizer.step(params, grads)
    return params


# -- evaluation -----------------------------------------------------------------


def accuracy(config, params, images, labels, dtype=np.float64, batch_size: int = 128) -> float:
    labels = _check_labels(labels, config.num_classes)
    if len(labels) == 0:
        raise DataError("cannot score an empty split")
    logits = predict(config, params, images, batch_size=batch_size, dtype=dtype)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy_at_angle(config, params, images, labels, angle_deg: float,
                      dtype=np.float64, batch_size: int = 128) -> float:
    """Accuracy after rotating every image counter-clockwise by ``angle_deg``."""
    images = np.asarray(images, dtype=np.float64)
    if angle_deg % 360 != 0:
        images = rotate_resample(images, np.deg2rad(angle_deg)).real
    return accuracy(config, params, images, labels, dtype=dtype, batch_size=batch_size)


@dataclass(frozen=True)
class TrainRecord:
    epoch: int
    loss: float
    acc_0: float
    acc_45: float
    seed: int
    seconds: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise DataError(f"epoch {self.epoch}: non-finite loss")
        if not (0.0 <= self.acc_0 <= 1.0 and 0.0 <= self.acc_45 <= 1.0):
            raise DataError("accuracies must lie in [0, 1]")

    CSV_HEADER = "epoch,loss,acc_0,acc_45,seconds,seed"

    def csv_row(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.acc_0!r},{self.acc_45!r},{self.seconds:.3f},{self.seed}"


def train(config: NetworkConfig, dataset, epochs: int | None = None, seed: int | None = None,
          train_config: TrainConfig | None = None, log=None):
    """Train on ``dataset["train"]``, scoring ``dataset["valid"]`` after each epoch.

    ``dataset`` maps split names to objects with ``images`` and ``labels``
    (a :class:`~hnext.data.RotatedDataset` per split).  Returns the final
    parameters and one :class:`TrainRecord` per epoch.  The run is
    deterministic given the seed: initialization and shuffling both derive
    from it.
    """
    tc = train_config or TrainConfig()
    epochs = tc.epochs if epochs is None else int(epochs)
    seed = tc.seed if seed is None else int(seed)
    if epochs < 0:
        raise ParameterError("epochs must be >= 0")
    dtype = np.dtype(tc.dtype)
    train_split = dataset["train"]
    images = np.asarray(train_split.images)
    labels = _check_labels(train_split.labels, config.num_classes)
    if tc.max_train is not None:
        images, labels = images[: tc.max_train], labels[: tc.max_train]
    if len(labels) == 0:
        raise DataError("training split is empty")
    valid = dataset.get("valid") if hasattr(dataset, "get") else None
    if valid is None or len(valid.labels) == 0:
        raise DataError("validation split is empty")

    params = init_params(config, seed)
    optimizer = make_optimizer(tc)
    scheduled_lr(tc, 0, 1)  # reject an unknown schedule before any work
    per_epoch = -(-len(labels) // tc.batch_size)
    step = 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    records: list[TrainRecord] = []
    for epoch in range(epochs):
        start = time.perf_counter()
        order = rng.permutation(len(labels))
        total, count = 0.0, 0
        for b in range(0, len(order), tc.batch_size):
            idx = order[b:b + tc.batch_size]
            loss = backward(config, params, images[idx], labels[idx], training=True, dtype=dtype)
            optimizer.lr = scheduled_lr(tc, step, epochs * per_epoch)
            optimizer_step(params, None, optimizer)
            step += 1
            total += loss * len(idx)
            count += len(idx)
        acc0 = accuracy_at_angle(config, params, valid.images, valid.labels, 0.0, dtype=dtype)
        acc45 = accuracy_at_angle(config, params, valid.images, valid.labels, 45.0, dtype=dtype)
        rec = TrainRecord(epoch, total / count, acc0, acc45, seed, time.perf_counter() - start)
        records.append(rec)
        if log is not None:
            log(rec)
    return params, records
