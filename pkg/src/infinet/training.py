"""Label-smoothed cross-entropy, AdamW, warmup+cosine schedule and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Node, Parameter, make_node
from .data import Sample, as_arrays, augment, batches
from .model import predict_logits, save_checkpoint
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 10
    batch_size: int = 64
    base_lr: float | None = None  # None -> 4e-3 * batch_size / 256
    min_lr: float | None = None  # None -> base_lr / 100
    warmup_epochs: float | None = None  # None -> 5% of total_epochs
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    grad_clip: float | None = None
    augment: bool = False
    seed: int = 0
    parallel: int = 0  # worker threads for within-batch sharding; 0 = reference mode

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = 4e-3 * self.batch_size / 256
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100
        if self.warmup_epochs is None:
            self.warmup_epochs = 0.05 * self.total_epochs
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs cannot exceed total_epochs")
        if self.batch_size < 1 or self.total_epochs < 0:
            raise ValueError("batch_size must be >= 1 and total_epochs >= 0")


# ---------------------------------------------------------------------------
# loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_smoothed(logits: Node, labels: Sequence[int], eps: float = 0.0) -> Node:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    N, K = logits.shape
    if K < 2:
        raise ValueError("need at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    target = np.full((N, K), eps / K, dtype=logits.dtype)
    target[np.arange(N), labels] += 1.0 - eps
    logp = log_softmax(logits.data)
    loss = -(target * logp).sum() / N

    def vjp(g):
        return (g * (np.exp(logp) - target) / N,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", vjp)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Node]) -> "OptimState":
        return cls([np.zeros(p.shape, p.dtype) for p in params], [np.zeros(p.shape, p.dtype) for p in params])


def adamw_step(params: Sequence[Node], grads: Sequence[np.ndarray | None], state: OptimState, lr: float,
               betas=(0.9, 0.999), wd: float = 0.0, eps: float = ADAM_EPS):
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``.

    Decay only hits parameters flagged ``decay`` (weights), never biases or norm affine terms.
    """
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads and optimizer state must align")
    b1, b2 = betas
    state.t += 1
    bc1 = 1 - b1**state.t
    bc2 = 1 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape, p.dtype)
        g = np.asarray(getattr(g, "data", g))
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match parameter {p.shape}")
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd and getattr(p, "decay", True):
            update = update + wd * p.data
        p.value = Tensor._wrap((p.data - lr * update).astype(p.dtype, copy=False))


class AdamW:
    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), weight_decay: float = 0.0):
        self.params = list(params)
        self.betas = betas
        self.weight_decay = weight_decay
        self.state = OptimState.zeros_like(self.params)

    def step(self, lr: float, grads=None):
        if grads is None:
            grads = [None if p.grad is None else p.grad.data for p in self.params]
        adamw_step(self.params, grads, self.state, lr, self.betas, self.weight_decay)


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for i, g in enumerate(grads):
            if g is not None:
                grads[i] = g * scale
    return total


# ---------------------------------------------------------------------------
# schedule

def lr_at(config: TrainConfig, fraction: float) -> float:
    """Linear warmup to ``base_lr`` then half-cosine down to ``min_lr``; ``fraction`` of the run."""
    fraction = min(max(fraction, 0.0), 1.0)
    if config.total_epochs == 0:
        return config.base_lr
    w = config.warmup_epochs / config.total_epochs
    if w > 0 and fraction < w:
        return config.base_lr * fraction / w
    if w >= 1:
        return config.base_lr
    progress = (fraction - w) / (1 - w)
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# loop

@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None
    wall_ms: int


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def metrics_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.step, repr(r.lr), repr(r.train_loss), repr(r.train_acc),
                    "" if r.val_acc is None else repr(r.val_acc), r.wall_ms])
    return buf.getvalue()


def write_metrics_csv(path, rows: Sequence[MetricsRow]):
    Path(path).write_text(metrics_to_csv(rows), encoding="utf-8", newline="")


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), int(r["step"]), float(r["lr"]), float(r["train_loss"]),
                           float(r["train_acc"]), None if r["val_acc"] == "" else float(r["val_acc"]),
                           int(r["wall_ms"])) for r in reader]


@dataclass
class TrainResult:
    rows: list[MetricsRow] = field(default_factory=list)
    checkpoint: Path | None = None


def _batch_grads(model: Module, params, images: np.ndarray, labels, eps: float):
    x = Node(Tensor(images, dtype=model.dtype))
    logits = model(x)
    loss = cross_entropy_smoothed(logits, labels, eps)
    found = ag.gradients(loss)
    grads = [found[id(p)][1] if id(p) in found else None for p in params]
    return float(loss.data), grads, logits.data


def _sharded_grads(pool, model, params, images, labels, eps, shards):
    # each shard's loss is a mean over its rows; reweight to the full-batch mean
    parts = [s for s in np.array_split(np.arange(len(labels)), shards) if len(s)]
    futures = [pool.submit(_batch_grads, model, params, images[idx], [labels[i] for i in idx], eps)
               for idx in parts]
    results = [f.result() for f in futures]
    n = len(labels)
    loss = sum(r[0] * len(idx) / n for r, idx in zip(results, parts))
    grads = []
    for j in range(len(params)):
        acc = None
        for r, idx in zip(results, parts):
            g = r[1][j]
            if g is not None:
                acc = g * (len(idx) / n) if acc is None else acc + g * (len(idx) / n)
        grads.append(acc)
    logits = np.concatenate([r[2] for r in results])
    return loss, grads, logits


def evaluate(model: Module, dataset: Sequence[Sample], batch_size: int = 256) -> float:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    images, labels = as_arrays(dataset, model.dtype)
    logits = predict_logits(model, images, batch_size)
    return float((logits.argmax(axis=1) == labels).mean())


def train(model: Module, dataset: Sequence[Sample], config: TrainConfig, val: Sequence[Sample] | None = None,
          checkpoint: str | Path | None = None, metrics: str | Path | None = None) -> TrainResult:
    """Run ``config.total_epochs`` epochs of AdamW; one metrics row per epoch.

    Reference mode (``parallel == 0``) is sequential and bit-reproducible for a
    fixed seed; its ``wall_ms`` column is written as 0 so metric files compare
    byte for byte. Timing is still logged.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    params = model.parameters()
    opt = AdamW(params, config.betas, config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = steps_per_epoch * config.total_epochs
    aug_rng = np.random.default_rng([config.seed, 1])
    pool = ThreadPoolExecutor(config.parallel) if config.parallel > 1 else None
    result = TrainResult()
    step = 0
    try:
        for epoch in range(config.total_epochs):
            t0 = time.perf_counter()
            loss_sum, correct, seen = 0.0, 0, 0
            data = [augment(s, aug_rng) for s in dataset] if config.augment else dataset
            for batch in batches(data, config.batch_size, shuffle_seed=config.seed * 100003 + epoch,
                                 dtype=model.dtype):
                lr = lr_at(config, (step + 1) / total_steps)
                images = batch.images.data
                if pool is None:
                    loss, grads, logits = _batch_grads(model, params, images, batch.labels, config.label_smoothing)
                else:
                    loss, grads, logits = _sharded_grads(pool, model, params, images, batch.labels,
                                                         config.label_smoothing, config.parallel)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss} at step {step} (epoch {epoch})")
                if config.grad_clip is not None:
                    clip_grad_norm(grads, config.grad_clip)
                opt.step(lr, grads)
                n = len(batch.labels)
                loss_sum += loss * n
                correct += int((logits.argmax(axis=1) == np.asarray(batch.labels)).sum())
                seen += n
                step += 1
            val_acc = evaluate(model, val) if val else None
            elapsed = int(round((time.perf_counter() - t0) * 1000))
            row = MetricsRow(epoch + 1, step, lr, loss_sum / seen, correct / seen, val_acc,
                             0 if pool is None else elapsed)
            log.info("epoch %d loss %.4f acc %.3f val %s (%d ms)", row.epoch, row.train_loss, row.train_acc,
                     "-" if val_acc is None else f"{val_acc:.3f}", elapsed)
            result.rows.append(row)
    finally:
        if pool is not None:
            pool.shutdown()
    if metrics is not None:
        write_metrics_csv(metrics, result.rows)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
        result.checkpoint = Path(checkpoint)
    return result


def train_steps(model: Module, dataset: Sequence[Sample], steps: int, lr: float = 1e-2,
                weight_decay: float = 0.0, label_smoothing: float = 0.0) -> list[float]:
    """Fixed-lr full-batch AdamW for ``steps`` updates; returns the loss trace (overfit checks)."""
    params = model.parameters()
    opt = AdamW(params, (0.9, 0.999), weight_decay)
    images, labels = as_arrays(dataset, model.dtype)
    trace = []
    for _ in range(steps):
        loss, grads, _ = _batch_grads(model, params, images, labels.tolist(), label_smoothing)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {len(trace)}")
        opt.step(lr, grads)
        trace.append(loss)
    return trace
