"""MSE training with RMSProp, gradient clipping, and val-based selection.

Batches are independent sequences: each gets its own tape, per-sequence
gradients are averaged in batch position order, clipped by global L2
norm, and applied with RMSProp. The parameters returned come from the
epoch with the lowest validation MSE. Every stochastic choice is driven
by the config seed, so identical configs give bit-identical parameter
trajectories and reports.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from machan.autodiff import Tape
from machan.evaluation import EvaluationError, mse_metric, pearson
from machan.model import ModelConfig, ModelParams, forward_on_tape, init_params
from machan.parallel import map_indexed


class TrainingError(ValueError):
    """Invalid training configuration or input."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the report up to the failing update."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    """All hyperparameters are surfaced here; none are pinned by the method."""

    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 50
    batch_size: int = 16
    patience: int = 10
    seed: int = 0
    shuffle: bool = True
    # optional early exit once the epoch train MSE drops below this
    target_train_mse: float | None = None
    # hard fusion: epochs trained on the soft relaxation before switching
    soft_warmup_epochs: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be non-negative")
        if not 0 < self.decay < 1:
            raise TrainingError("decay must be in (0, 1)")
        if self.clip_norm <= 0:
            raise TrainingError("clip_norm must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainingError("batch_size and epochs must be at least 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_rho: float | None


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    updates: int = 0
    wall_time: float = 0.0


def rmsprop_update(param: np.ndarray, grad: np.ndarray, v: np.ndarray,
                   config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """One RMSProp step: v' = decay v + (1-decay) grad^2; step by grad/sqrt(v')."""
    if param.shape != grad.shape or param.shape != v.shape:
        raise TrainingError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, v {v.shape}"
        )
    v_new = config.decay * v + (1.0 - config.decay) * grad * grad
    param_new = param - config.learning_rate * grad / (np.sqrt(v_new) + config.epsilon)
    return param_new, v_new


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise TrainingError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}


def sequence_gradients(seq, params: ModelParams, config: ModelConfig):
    """Loss (yhat - y)^2 and its parameter gradients for one sequence."""
    tape = Tape()
    p = {name: tape.param(name, arr) for name, arr in params.tensors.items()}
    yhat, _ = forward_on_tape(tape, seq, p, config)
    loss = tape.mse(yhat, tape.const(np.asarray(seq.label, dtype=np.float64)))
    return float(tape.value(loss)), tape.backward(loss)


def train(train_seqs, val_seqs, model_config: ModelConfig,
          train_config: TrainConfig,
          initial: ModelParams | None = None) -> tuple[ModelParams, TrainReport]:
    """Train on the train split, select the best epoch by validation MSE.

    With hard fusion, the first ``soft_warmup_epochs`` epochs compute
    gradients under soft fusion (the smooth relaxation) before switching
    to the straight-through hard objective; validation always scores the
    configured fusion mode. ``initial`` warm-starts from given parameters
    instead of a fresh seeded init.
    """
    if not train_seqs or not val_seqs:
        raise TrainingError("train and val splits must be non-empty")
    start = time.perf_counter()
    params = initial.copy() if initial is not None else init_params(
        model_config, train_config.seed
    )
    warm_config = model_config
    if train_config.soft_warmup_epochs > 0 and model_config.fusion == "hard":
        warm_config = replace(model_config, fusion="soft")
    opt_state = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    shuffle_rng = np.random.default_rng(train_config.seed)
    report = TrainReport()
    best_val = math.inf
    best_params = params.copy()
    since_best = 0
    n = len(train_seqs)
    for epoch in range(train_config.epochs):
        grad_config = (warm_config if epoch < train_config.soft_warmup_epochs
                       else model_config)
        order = np.arange(n)
        if train_config.shuffle:
            shuffle_rng.shuffle(order)
        epoch_losses = []
        for lo in range(0, n, train_config.batch_size):
            batch = [train_seqs[i] for i in order[lo:lo + train_config.batch_size]]
            results = map_indexed(
                lambda seq: sequence_gradients(seq, params, grad_config), batch
            )
            total = {name: None for name in params.names()}
            for loss, grads in results:  # fixed batch-position order
                if not math.isfinite(loss):
                    report.wall_time = time.perf_counter() - start
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, update {report.updates}", report
                    )
                epoch_losses.append(loss)
                for name, g in grads.items():
                    total[name] = g if total[name] is None else total[name] + g
            scale = 1.0 / len(batch)
            avg = {name: g * scale for name, g in total.items()}
            avg = clip_gradients(avg, train_config.clip_norm)
            for name in params.names():
                params.tensors[name], opt_state[name] = rmsprop_update(
                    params.tensors[name], avg[name], opt_state[name], train_config
                )
            report.updates += 1
        train_loss = math.fsum(epoch_losses) / len(epoch_losses)
        val_loss, val_rho = _validate(val_seqs, params, model_config)
        report.epochs.append(EpochStats(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_rho=val_rho
        ))
        if not math.isfinite(val_loss):
            report.wall_time = time.perf_counter() - start
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", report)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > train_config.patience:
                break
        if (train_config.target_train_mse is not None
                and train_loss < train_config.target_train_mse):
            break
    report.wall_time = time.perf_counter() - start
    return best_params, report


def _validate(val_seqs, params, model_config):
    preds = map_indexed(
        lambda seq: _predict(seq, params, model_config), val_seqs
    )
    y = np.asarray([s.label for s in val_seqs])
    yhat = np.asarray(preds)
    loss = mse_metric(y, yhat)
    try:
        rho = pearson(y, yhat)
    except EvaluationError:
        rho = None
    return loss, rho


def _predict(seq, params, model_config) -> float:
    tape = Tape()
    p = {name: tape.param(name, arr) for name, arr in params.tensors.items()}
    yhat, _ = forward_on_tape(tape, seq, p, model_config)
    return float(tape.value(yhat))
