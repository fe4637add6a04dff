"""Binary cross-entropy, Adam, plateau/early-stopping callbacks and the epoch loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, LabelError, UsageError
from .layers import Mode
from .model import Model
from .tensor import PCG32

PROB_CLAMP = 1e-7
# PCG32 stream ids, so shuffling/dropout and augmentation never share a sequence
TRAIN_STREAM = 1
AUGMENT_STREAM_BASE = 1 << 40


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 10
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_min_delta: float = 1e-4
    min_lr: float = 1e-6
    early_stop_patience: int = 4
    early_stop_min_delta: float = 1e-4
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.min_lr < 0 or self.plateau_min_delta < 0 or self.early_stop_min_delta < 0:
            raise ConfigError("min_lr and min_delta values must be non-negative")
        return self


def bce_loss(p, y):
    """Mean binary cross-entropy and its gradient w.r.t. each (clamped) probability."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y).reshape(-1)
    if p.shape != y.shape:
        raise UsageError(f"{p.size} probabilities for {y.size} labels")
    if p.size == 0:
        raise DataError("bce_loss on an empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError(f"labels must be 0 or 1, got {sorted(set(np.unique(y).tolist()) - {0, 1})}")
    y = y.astype(np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
    return float(loss), grad


def bce_logit_grad(p, y):
    """Mean BCE and its gradient w.r.t. the sigmoid's input, ``(clamp(p) - y) / n``.

    This is d loss/d p times the sigmoid derivative, both evaluated at the
    clamped probability, so a saturated wrong prediction still gets a full
    gradient instead of one scaled down by p(1 - p).
    """
    loss, _ = bce_loss(p, y)
    pc = np.clip(np.asarray(p, dtype=np.float64).reshape(-1), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return loss, (pc - y) / pc.size


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """One Adam update; ``params`` are modified in place and ``state`` is advanced."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("params, grads and Adam state have different lengths")
    lr = cfg.learning_rate if lr is None else lr
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (theta, g) in enumerate(zip(params, grads)):
        if theta.shape != g.shape or theta.shape != state.m[i].shape:
            raise UsageError(f"parameter {i}: shape {theta.shape} vs gradient {g.shape}")
        g = np.asarray(g, dtype=np.float64)
        m = b1 * state.m[i].astype(np.float64) + (1.0 - b1) * g
        v = b2 * state.v[i].astype(np.float64) + (1.0 - b2) * g * g
        state.m[i][...] = m
        state.v[i][...] = v
        m_hat = m / c1
        v_hat = v / c2
        theta[...] = theta.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return state


# --- callbacks ---------------------------------------------------------------

@dataclass(frozen=True)
class CallbackState:
    current_lr: float
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    halted: bool = False


def _observe(state: CallbackState, val_loss: float, min_delta: float) -> CallbackState:
    if val_loss < state.best_val_loss - min_delta:
        return replace(state, best_val_loss=val_loss, epochs_since_improvement=0)
    return replace(state, epochs_since_improvement=state.epochs_since_improvement + 1)


def reduce_lr_on_plateau(state: CallbackState, val_loss: float, cfg: TrainConfig) -> CallbackState:
    state = _observe(state, val_loss, cfg.plateau_min_delta)
    if state.epochs_since_improvement > cfg.plateau_patience:
        state = replace(
            state,
            current_lr=max(state.current_lr * cfg.plateau_factor, cfg.min_lr),
            epochs_since_improvement=0,
        )
    return state


def early_stopping(state: CallbackState, val_loss: float, cfg: TrainConfig) -> CallbackState:
    """Update the stopper; the returned state has ``halted`` set when training should stop."""
    state = _observe(state, val_loss, cfg.early_stop_min_delta)
    if state.epochs_since_improvement > cfg.early_stop_patience:
        state = replace(state, halted=True)
    return state


# --- loop ------------------------------------------------------------------

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


def evaluate_loss(model: Model, images, labels, batch_size=32, threshold=0.5):
    """Eval-mode mean BCE and accuracy (prediction positive iff p >= threshold)."""
    probs = predict_batch(model, images, batch_size)
    loss, _ = bce_loss(probs, labels)
    acc = float(np.mean((probs >= threshold) == (np.asarray(labels) == 1)))
    return loss, acc


def predict_batch(model: Model, images, batch_size=32) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.forward(images[start:start + batch_size], Mode.EVAL)[0][:, 0])
    return np.concatenate(out).astype(np.float64)


def augment_rng(seed: int, epoch: int, index: int) -> PCG32:
    """Per-sample augmentation generator, independent of batch order."""
    return PCG32(seed, AUGMENT_STREAM_BASE + (epoch << 24) + index)


def train(
    model: Model,
    train_set,
    val_set,
    cfg: TrainConfig,
    augment=None,
    on_epoch: Callable[[EpochLog], bool | None] | None = None,
):
    """Fit ``model`` in place and return ``(model, logs)``.

    ``train_set`` and ``val_set`` are ``(images [n, C, H, W] float32, labels [n])``.
    ``augment``, if given, is an ``AugmentConfig`` applied to every training
    sample each epoch. Logged train loss/accuracy are measured in Eval mode
    on the un-augmented training images after the epoch's updates.
    ``on_epoch`` sees each log as it is produced; returning True ends the run.
    """
    from .data import augment as augment_image

    cfg.validate()
    x_train, y_train = train_set
    x_val, y_val = val_set
    if len(x_train) == 0 or len(x_val) == 0:
        raise DataError("training and validation sets must be non-empty")
    y_train = np.asarray(y_train)
    rng = PCG32(cfg.seed, TRAIN_STREAM)
    params = [arr for _, _, arr in model.parameters(trainable_only=True)]
    adam = AdamState.for_params(params)
    plateau = CallbackState(current_lr=cfg.learning_rate)
    stopper = CallbackState(current_lr=cfg.learning_rate)
    logs: list[EpochLog] = []
    n = len(x_train)
    for epoch in range(cfg.max_epochs):
        lr = plateau.current_lr
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_train[idx]
            if augment is not None:
                xb = np.stack([augment_image(x_train[i], augment, augment_rng(cfg.seed, epoch, i)) for i in idx])
            probs, caches = model.forward(xb, Mode.TRAIN, rng)
            _, dlogit = bce_logit_grad(probs, y_train[idx])
            grads = model.backward_from_logits(caches, dlogit.reshape(-1, 1).astype(probs.dtype))
            flat = [grads[i][name] for i, name, _ in model.parameters(trainable_only=True)]
            adam_step(params, flat, adam, cfg, lr)
        train_loss, train_acc = evaluate_loss(model, x_train, y_train, cfg.batch_size)
        val_loss, val_acc = evaluate_loss(model, x_val, y_val, cfg.batch_size)
        log = EpochLog(epoch + 1, train_loss, train_acc, val_loss, val_acc, lr)
        logs.append(log)
        if on_epoch is not None and on_epoch(log):
            break
        plateau = reduce_lr_on_plateau(plateau, val_loss, cfg)
        stopper = early_stopping(stopper, val_loss, cfg)
        if stopper.halted:
            break
    return model, logs

