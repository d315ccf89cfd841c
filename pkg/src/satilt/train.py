"""Optimizers, learning-rate schedule, training loops and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import ops
from .backbone import Model, forward
from .data import Dataset
from .tensor import Tape, backward
from .tilt import angle_error, decode_prediction, encode_batch

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    mode: str = "multilabel"
    lr0: float = 0.001
    decay_steps: int = 40000
    decay_rate: float = 0.95
    momentum: float = 0.9
    rho: float = 0.9
    eps: float = 1e-8
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    batch_size: int = 16
    total_steps: int = 3000
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        if self.mode not in ("multilabel", "regression"):
            raise ValueError(f"mode must be 'multilabel' or 'regression', got {self.mode!r}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_steps < 1 or self.total_steps < 0 or self.eval_every < 1:
            raise ValueError("decay_steps and eval_every must be >= 1, total_steps >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Continuous exponential decay: lr0 * decay_rate ** (step / decay_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr0 * cfg.decay_rate ** (step / cfg.decay_steps)


@dataclass
class RMSpropState:
    rho: float = 0.9
    momentum: float = 0.9
    eps: float = 1e-8
    s: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    step: int = 0


def rmsprop_step(params: dict, grads: dict, state: RMSpropState, lr: float) -> RMSpropState:
    """In-place update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    s <- rho s + (1 - rho) g^2;  m <- momentum m + lr g / sqrt(s + eps);  p <- p - m
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        s = state.s.get(name)
        if s is None:
            s = state.s[name] = np.zeros_like(p.data)
            state.m[name] = np.zeros_like(p.data)
        m = state.m[name]
        s *= state.rho
        s += (1.0 - state.rho) * g * g
        m *= state.momentum
        m += lr * g / np.sqrt(s + state.eps)
        p.data -= m
    state.step += 1
    return state


@dataclass
class AdaDeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    eg: dict = field(default_factory=dict)
    ex: dict = field(default_factory=dict)
    step: int = 0


def adadelta_step(params: dict, grads: dict, state: AdaDeltaState) -> AdaDeltaState:
    """In-place AdaDelta update (unit learning rate)."""
    rho, eps = state.rho, state.eps
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        eg = state.eg.get(name)
        if eg is None:
            eg = state.eg[name] = np.zeros_like(p.data)
            state.ex[name] = np.zeros_like(p.data)
        ex = state.ex[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1.0 - rho) * delta * delta
        p.data += delta
    state.step += 1
    return state


# ----------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    model: Model
    losses: list = field(default_factory=list)
    history: list = field(default_factory=list)
    optimizer: object = None


def batch_indices(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch."""
    epoch = 0
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            rng = np.random.default_rng([seed, 7919, epoch])
            buf = np.concatenate([buf, rng.permutation(n)])
            epoch += 1
        yield buf[:batch_size]
        buf = buf[batch_size:]


def predicted_angles(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Decoded integer angles for a stack of images, without recording a tape."""
    out = []
    for start in range(0, len(images), chunk):
        scores = forward(model, images[start : start + chunk]).data
        if model.config.output == "linear":
            out.extend(int(round(float(v))) % 360 for v in np.mod(scores[:, 0], 360.0))
        else:
            out.extend(decode_prediction(row) for row in scores)
    return np.array(out, dtype=np.int64)


def evaluate(model: Model, dataset: Dataset, I: int) -> dict:
    """Accuracy within +-I degrees and mean angle error, in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    try:
        pred = predicted_angles(model, dataset.images)
    finally:
        model.training = was_training
    true = dataset.angles
    err = np.asarray(angle_error(true, pred))
    per_sample = [
        {"a_true": int(t), "a_pred": int(p), "angle_error": int(e)} for t, p, e in zip(true, pred, err)
    ]
    return {
        "accuracy": float(np.mean(err <= I)),
        "mean_angle_error": float(err.mean()),
        "per_sample": per_sample,
    }


def _run(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    loss_fn: Callable,
    update: Callable,
    eval_dataset: Optional[Dataset],
    on_eval: Optional[Callable],
) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    result = TrainResult(model)
    images = dataset.images
    angles = dataset.angles
    eval_ds = eval_dataset or dataset
    I = eval_ds.spec.interval
    batches = batch_indices(len(dataset), cfg.batch_size, cfg.seed)
    model.train()
    for step in range(cfg.total_steps):
        idx = next(batches)
        with Tape() as tape:
            loss = loss_fn(forward(model, images[idx]), angles[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        backward(loss, tape)
        grads = {name: t.grad for name, t in model.params.items() if t.grad is not None}
        update(step, grads)
        result.losses.append(value)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            metrics = evaluate(model, eval_ds, I)
            row = {
                "step": done,
                "lr": lr_at(step, cfg),
                "loss": value,
                "accuracy": metrics["accuracy"],
                "mean_angle_error": metrics["mean_angle_error"],
            }
            result.history.append(row)
            log.info("step %d loss %.5f acc %.4f ae %.3f", done, value, row["accuracy"], row["mean_angle_error"])
            if on_eval is not None:
                on_eval(row)
    model.eval()
    return result


def train_multilabel(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
    on_eval: Optional[Callable] = None,
    state: Optional[RMSpropState] = None,
) -> TrainResult:
    """Mean BCE against cyclic interval labels, RMSprop with decayed lr."""
    if cfg.mode != "multilabel":
        raise ValueError("train_multilabel needs mode='multilabel'")
    if model.config.out_dim != 360 or model.config.output != "sigmoid":
        raise ValueError("multi-label training needs a 360-way sigmoid head")
    I = dataset.spec.interval
    state = state or RMSpropState(cfg.rho, cfg.momentum, cfg.eps)

    def loss_fn(scores, angles):
        return ops.bce(scores, encode_batch(angles, I))

    def update(step, grads):
        rmsprop_step(model.params, grads, state, lr_at(step, cfg))

    result = _run(model, dataset, cfg, loss_fn, update, eval_dataset, on_eval)
    result.optimizer = state
    return result


def train_regression(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
    on_eval: Optional[Callable] = None,
    state: Optional[AdaDeltaState] = None,
) -> TrainResult:
    """Circular angle loss on a single linear output, AdaDelta updates."""
    if cfg.mode != "regression":
        raise ValueError("train_regression needs mode='regression'")
    if model.config.out_dim != 1 or model.config.output != "linear":
        raise ValueError("regression training needs a 1-d linear head")
    state = state or AdaDeltaState(cfg.adadelta_rho, cfg.adadelta_eps)

    def loss_fn(pred, angles):
        return ops.angle_loss(ops.reshape(pred, (pred.shape[0],)), angles.astype(np.float64))

    def update(step, grads):
        adadelta_step(model.params, grads, state)

    result = _run(model, dataset, cfg, loss_fn, update, eval_dataset, on_eval)
    result.optimizer = state
    return result


def train(model: Model, dataset: Dataset, cfg: TrainConfig, **kw) -> TrainResult:
    if cfg.mode == "regression":
        return train_regression(model, dataset, cfg, **kw)
    return train_multilabel(model, dataset, cfg, **kw)


def metrics_line(row: dict) -> str:
    return json.dumps(row, sort_keys=False)
