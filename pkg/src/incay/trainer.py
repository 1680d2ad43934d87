"""SGD-with-momentum training loop for the reciprocal-norm objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import layers
from .data import Dataset, batches
from .layers import Architecture, LayerParams
from .losses import (
    ClassifierState,
    LossConfig,
    LossReport,
    center_update,
    correctness_mask,
    inference_logits,
    reciprocal_norm_total,
)
from .numerics import Tensor, row_norms, spawn_rngs, xavier_init

log = logging.getLogger(__name__)

EVAL_CHUNK = 2000


def default_lr_drops(total_iters: int) -> tuple:
    """Drops at 50%, 75% and 90% of the budget (duplicates removed)."""
    drops = sorted({int(total_iters * frac) for frac in (0.5, 0.75, 0.9)} - {0})
    return tuple(d for d in drops if d < total_iters)


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "mnist2d"
    loss: LossConfig = field(default_factory=LossConfig)
    base_lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    total_iters: int = 10000
    lr_drop_iters: tuple | None = None
    eval_every: int = 200
    seed: int = 0
    eval_train_limit: int | None = None

    def __post_init__(self):
        if self.arch not in layers.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.total_iters < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, total_iters >= 0")
        if self.lr_drop_iters is None:
            object.__setattr__(self, "lr_drop_iters", default_lr_drops(self.total_iters))
        drops = tuple(int(d) for d in self.lr_drop_iters)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_iters must be strictly increasing, got {drops}")
        if drops and (drops[0] < 0 or drops[-1] >= self.total_iters):
            raise ValueError(f"lr_drop_iters must lie in [0, {self.total_iters}), got {drops}")
        object.__setattr__(self, "lr_drop_iters", drops)


@dataclass
class Model:
    arch: Architecture
    params: list
    classifier: ClassifierState

    def features(self, x: Tensor, chunk: int = EVAL_CHUNK) -> Tensor:
        parts = [layers.forward_features(self.arch, self.params, x[s:s + chunk]) for s in range(0, len(x), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.arch.feature_dim))


@dataclass(frozen=True)
class MetricsRecord:
    iter: int
    split: str
    base_loss: float
    incay_loss: float
    total_loss: float
    accuracy: float
    mean_feature_norm: float


@dataclass
class TrainResult:
    model: Model
    records: list


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, report: LossReport):
        super().__init__(
            f"non-finite loss at iteration {iteration}: base={report.base_loss}, "
            f"incay={report.incay_loss}, decay={report.decay_loss}, total={report.total}"
        )
        self.iteration = iteration
        self.report = report


def lr_at(config: TrainConfig, iteration: int) -> float:
    """base_lr / 10^d, d = number of drop points <= iteration."""
    drops = sum(1 for d in config.lr_drop_iters if d <= iteration)
    return config.base_lr / 10**drops


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    velocity: Sequence[Tensor],
    lr: float,
    momentum: float,
    mu: float = 0.0,
    decayed: Sequence[bool] | None = None,
):
    """Classical momentum: v <- momentum*v + g (+ 2*mu*p if decayed); p <- p - lr*v.

    Returns new ``(params, velocity)`` lists; inputs are left untouched.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must have equal length")
    if decayed is None:
        decayed = [True] * len(params)
    new_p, new_v = [], []
    for p, g, v, dec in zip(params, grads, velocity, decayed):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        step = g + 2.0 * mu * p if dec and mu else g
        v = momentum * v + step
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def build_model(config: TrainConfig, input_shape: tuple, num_classes: int) -> Model:
    init_rng = spawn_rngs(config.seed, 2)[0]
    if config.arch == "mlp":
        arch = layers.mlp(input_dim=int(np.prod(input_shape)), num_classes=num_classes)
    else:
        arch = layers.ARCHITECTURES[config.arch](num_classes=num_classes)
    params = layers.init_params(arch, init_rng)
    d = arch.feature_dim
    weights = xavier_init(init_rng, d, num_classes, (num_classes, d))
    centers = np.zeros((num_classes, d)) if config.loss.kind == "center" else None
    return Model(arch, params, ClassifierState(weights, centers))


def _flatten(model: Model):
    """Parameter tensors in a fixed order plus their weight-decay flags."""
    tensors, decayed = [], []
    for p in model.params:
        if p is not None:
            tensors.append(p.weights)
            decayed.append(True)
            if p.bias is not None:
                tensors.append(p.bias)
                decayed.append(False)
    # classifier decay is part of the loss gradient
    tensors.append(model.classifier.weights)
    decayed.append(False)
    return tensors, decayed


def _unflatten(model: Model, tensors: list) -> None:
    it = iter(tensors)
    for i, p in enumerate(model.params):
        if p is not None:
            w = next(it)
            b = next(it) if p.bias is not None else None
            model.params[i] = LayerParams(w, b)
    model.classifier = ClassifierState(next(it), model.classifier.centers)


def _flat_grads(model: Model, layer_grads: list, d_weights: Tensor) -> list:
    out = []
    for p, g in zip(model.params, layer_grads):
        if p is not None:
            out.append(g[0])
            if p.bias is not None:
                out.append(g[1])
    out.append(d_weights)
    return out


def evaluate(model: Model, data: Dataset, loss_config: LossConfig, iteration: int = 0) -> MetricsRecord:
    """Split-level loss terms, strict-argmax accuracy and mean feature norm."""
    if len(data) == 0:
        raise ValueError(f"cannot evaluate on empty split {data.split!r}")
    f = model.features(data.images)
    report = reciprocal_norm_total(f, data.labels, model.classifier, loss_config)
    scores = inference_logits(f, model.classifier, loss_config.kind, loss_config.alpha)
    return MetricsRecord(
        iter=iteration,
        split=data.split,
        base_loss=report.base_loss,
        incay_loss=report.incay_loss,
        total_loss=report.total,
        accuracy=float(np.mean(correctness_mask(scores, data.labels))),
        mean_feature_norm=float(np.mean(row_norms(f))),
    )


def train(
    config: TrainConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
    on_eval: Callable[[int, Model], None] | None = None,
) -> TrainResult:
    """Run ``config.total_iters`` minibatch steps.

    Every ``eval_every`` completed steps the train split (optionally capped
    at ``eval_train_limit`` samples) and the test split are evaluated; each
    record is passed to ``on_record`` as soon as it exists, and ``on_eval``
    receives the iteration and the current model.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    model = build_model(config, train_data.images.shape[1:], train_data.num_classes)
    batch_rng = spawn_rngs(config.seed, 2)[1]
    stream = batches(train_data, config.batch_size, batch_rng)
    loss_cfg = config.loss
    tensors, decayed = _flatten(model)
    velocity = [np.zeros_like(t) for t in tensors]
    train_eval = train_data if config.eval_train_limit is None else train_data.subset(config.eval_train_limit)
    records = []

    for it in range(config.total_iters):
        idx = next(stream)
        x, y = train_data.images[idx], train_data.labels[idx]
        f, caches = layers.forward_features(model.arch, model.params, x, keep_cache=True)
        report = reciprocal_norm_total(f, y, model.classifier, loss_cfg)
        if not np.isfinite(report.total):
            raise TrainingDiverged(it, report)
        layer_grads = layers.backward_features(model.arch, model.params, caches, report.d_features)
        grads = _flat_grads(model, layer_grads, report.d_weights)
        tensors, velocity = sgd_momentum_step(
            tensors, grads, velocity, lr_at(config, it), config.momentum, loss_cfg.decay_mu, decayed
        )
        _unflatten(model, tensors)
        if loss_cfg.kind == "center":
            model.classifier.centers = center_update(model.classifier, f, y, loss_cfg.center_lr)

        done = it + 1
        if done % config.eval_every == 0:
            splits = [train_eval] + ([test_data] if test_data is not None else [])
            for split in splits:
                rec = evaluate(model, split, loss_cfg, done)
                records.append(rec)
                if on_record is not None:
                    on_record(rec)
            log.info("iter %d: %s", done, " ".join(f"{r.split} acc={r.accuracy:.4f} norm={r.mean_feature_norm:.3g}" for r in records[-len(splits):]))
            if on_eval is not None:
                on_eval(done, model)
    return TrainResult(model, records)
