"""Initialization, SGD with momentum, LR schedule, loss, training loop."""

from __future__ import annotations

import json
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, augment_batch
from .engine import BufferPool, NetworkSpec, network_backward, network_forward
from .errors import ConfigError, DataError
from .layer import LayerParams

CIFAR_LR_SCHEDULE = [(0, 1e-2), (400, 1e-1), (32000, 1e-2), (48000, 1e-3)]


@dataclass
class TrainConfig:
    mode: str = "exact"
    bits: Optional[int] = 8
    batch_size: int = 128
    total_iters: int = 64000
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_schedule: list = field(
        default_factory=lambda: list(CIFAR_LR_SCHEDULE))
    seed: int = 0
    hflip: bool = True
    translate: bool = True
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.lr_schedule = [(int(s), float(lr)) for s, lr in self.lr_schedule]
        starts = [s for s, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or starts != sorted(set(starts)):
            raise ConfigError(
                "lr_schedule needs strictly increasing starts from 0")

    def to_json(self) -> dict:
        return {"mode": self.mode, "bits": self.bits,
                "batch_size": self.batch_size,
                "total_iters": self.total_iters,
                "momentum": self.momentum,
                "weight_decay": self.weight_decay,
                "lr_schedule": [list(p) for p in self.lr_schedule],
                "seed": self.seed, "hflip": self.hflip,
                "translate": self.translate, "log_path": self.log_path}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        kwargs = {k: d[k] for k in (
            "mode", "bits", "batch_size", "total_iters", "momentum",
            "weight_decay", "lr_schedule", "seed", "hflip", "translate",
            "log_path") if k in d}
        return cls(**kwargs)


def init_params(spec: NetworkSpec, seed: int,
                dtype=np.float32) -> list:
    """He-style weight init, gamma=1, beta=0, deterministic given seed."""
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    shapes = spec.layer_shapes(batch=1)
    params = []
    for l, (in_shape, _) in zip(spec.layers, shapes):
        cin = in_shape[1]
        if l.kind == "conv":
            fan_in = cin * l.kernel * l.kernel
            w = rng.standard_normal(
                (l.out_channels, cin, l.kernel, l.kernel))
        else:
            fan_in = cin
            w = rng.standard_normal((cin, l.out_channels))
        w = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
        if l.preact:
            params.append(LayerParams(
                kind=l.kind, weight=w, stride=l.stride, pad=l.pad,
                gamma=np.ones(cin, dtype=dtype),
                beta=np.zeros(cin, dtype=dtype)))
        else:
            params.append(LayerParams(kind=l.kind, weight=w,
                                      stride=l.stride, pad=l.pad))
    return params


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Piecewise-constant schedule lookup."""
    starts = [s for s, _ in config.lr_schedule]
    return config.lr_schedule[bisect_right(starts, iteration) - 1][1]


def sgd_step(params: list, lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param -= lr*v; zero grads.

    Weight decay applies to linear weights only, not to gamma/beta.
    """
    for p in params:
        slots = [(p.weight, p.grad_weight, p.vel_weight, weight_decay)]
        if p.preact:
            slots.append((p.gamma, p.grad_gamma, p.vel_gamma, 0.0))
            slots.append((p.beta, p.grad_beta, p.vel_beta, 0.0))
        for value, grad, vel, wd in slots:
            dt = value.dtype.type
            vel *= dt(momentum)
            if wd:
                vel += grad + dt(wd) * value
            else:
                vel += grad
            value -= dt(lr) * vel
        p.zero_grads()


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy with max-subtraction; returns (loss, grad)."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    grad = sm
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(nll.mean()), grad.astype(logits.dtype)


@dataclass
class TrainResult:
    records: list          # (iteration, loss, lr, elapsed_ms)
    params: list
    pool: BufferPool

    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.records])


def iterate_batches(dataset: Dataset, batch_size: int, total_iters: int,
                    seed: int):
    """Seeded epoch shuffles, dropping the last partial batch; yields
    (iteration, epoch, image_batch, label_batch) with fresh copies."""
    n = len(dataset.labels)
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise ConfigError("batch_size larger than dataset")
    shuffle_rng = np.random.default_rng(seed)
    it = 0
    epoch = 0
    while it < total_iters:
        order = shuffle_rng.permutation(n)
        for b in range(per_epoch):
            if it >= total_iters:
                return
            idx = order[b * batch_size:(b + 1) * batch_size]
            yield it, epoch, dataset.images[idx].copy(), dataset.labels[idx]
            it += 1
        epoch += 1


def train(spec: NetworkSpec, config: TrainConfig, dataset: Dataset,
          params: Optional[list] = None) -> TrainResult:
    """Run the training loop; returns the log, trained params, and the
    instrumented buffer pool.

    All randomness (init, shuffling, augmentation) derives from
    config.seed; augmentation draws come from a per-batch generator keyed
    by (seed, epoch, iteration) so runs are reproducible regardless of
    restart points.
    """
    if params is None:
        params = init_params(spec, config.seed)
    pool = BufferPool(spec.width() + 1, dtype=params[0].dtype)
    records = []
    t0 = time.perf_counter()
    augment = config.hflip or config.translate
    for it, epoch, images, labels in iterate_batches(
            dataset, config.batch_size, config.total_iters, config.seed):
        if augment and images.ndim == 4:
            aug_rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, epoch, it)))
            images = augment_batch(images, aug_rng, hflip=config.hflip,
                                   translate=config.translate)
        logits, tapes = network_forward(
            spec, params, images, mode=config.mode, bits=config.bits,
            pool=pool)
        loss, g = softmax_xent(logits, labels)
        network_backward(spec, params, tapes, g, images, mode=config.mode,
                         pool=pool)
        lr = lr_at(config, it)
        sgd_step(params, lr, config.momentum, config.weight_decay)
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        records.append((it, loss, lr, elapsed_ms))
    result = TrainResult(records=records, params=params, pool=pool)
    if config.log_path:
        write_log(config.log_path, records)
    return result


def write_log(path: str, records: list) -> None:
    with open(path, "w") as f:
        f.write("iter,loss,lr,elapsed_ms\n")
        for it, loss, lr, ms in records:
            f.write(f"{it},{loss:.17g},{lr:.17g},{ms:.3f}\n")


def evaluate(spec: NetworkSpec, params: list, dataset: Dataset,
             batch_size: int = 256) -> float:
    """Top-1 error rate with full-precision forward and running statistics."""
    n = len(dataset.labels)
    wrong = 0
    for start in range(0, n, batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits, _ = network_forward(spec, params, images, training=False)
        wrong += int(np.count_nonzero(logits.argmax(axis=1) != labels))
    return wrong / n
