"""Comparison systems: concat LSTM, aligned LSTM, and linear SVR on PoT.

Both LSTM baselines delegate to the attention model's ``forward`` with
the fusion mode switched, so the LSTM cell and regression head are the
same code the attention model runs. The SVR is linear, trained by seeded
subgradient descent on the epsilon-insensitive hinge with L2 weight
regularization; the returned weights are the running (Polyak) average of
the iterates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from machan import model as model_mod
from machan.model import ModelConfig, ModelParams, Prediction

SVR_FORMAT = "MACHAN-SVR1"


class BaselineError(ValueError):
    """Invalid baseline configuration or input."""


def concat_forward(seq, params: ModelParams, config: ModelConfig) -> Prediction:
    """LSTM over raw channel concatenation; absent channels feed zero vectors."""
    return model_mod.forward(seq, params, replace(config, fusion="concat"))


def aligned_forward(seq, params: ModelParams, config: ModelConfig) -> Prediction:
    """LSTM over the concatenated aligned channels (no attention)."""
    return model_mod.forward(seq, params, replace(config, fusion="aligned-concat"))


# -- linear epsilon-insensitive SVR -------------------------------------------


@dataclass
class SvrConfig:
    epsilon: float = 0.1
    lam: float = 1e-4
    steps: int = 2000
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise BaselineError("epsilon must be non-negative")
        if self.lam <= 0:
            raise BaselineError("lam must be positive")
        if self.steps < 1 or self.learning_rate <= 0:
            raise BaselineError("steps and learning_rate must be positive")


@dataclass
class SvrParams:
    w: np.ndarray
    b: float


def svr_objective(params: SvrParams, x: np.ndarray, y: np.ndarray,
                  config: SvrConfig) -> float:
    residual = y - x @ params.w - params.b
    hinge = np.maximum(0.0, np.abs(residual) - config.epsilon)
    return 0.5 * config.lam * float(params.w @ params.w) + float(hinge.mean())


def svr_train(x, y, config: SvrConfig) -> tuple[SvrParams, list[float]]:
    """Full-batch subgradient descent with a 1/sqrt(t) step size.

    Starts from w = 0, b = mean(y). Returns the averaged iterate and the
    objective history evaluated at the running average.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise BaselineError(f"need X (n,d) and y (n,), got {x.shape} and {y.shape}")
    n = x.shape[0]
    w = np.zeros(x.shape[1])
    b = float(y.mean())
    w_avg = w.copy()
    b_avg = b
    history = []
    for t in range(config.steps):
        residual = y - x @ w - b
        active = np.abs(residual) > config.epsilon
        sign = np.sign(residual) * active
        gw = config.lam * w - (x.T @ sign) / n
        gb = -float(sign.sum()) / n
        lr = config.learning_rate / np.sqrt(t + 1.0)
        w = w - lr * gw
        b = b - lr * gb
        # running average over iterates 0..t+1
        k = t + 1
        w_avg = w_avg + (w - w_avg) / (k + 1)
        b_avg = b_avg + (b - b_avg) / (k + 1)
        history.append(svr_objective(SvrParams(w_avg, b_avg), x, y, config))
    return SvrParams(w=w_avg, b=b_avg), history


def standardized_svr_train(x, y, config: SvrConfig) -> tuple[SvrParams, list[float]]:
    """Subgradient SVR preconditioned by column standardization.

    PoT columns span orders of magnitude, which cripples raw subgradient
    steps; training runs on standardized columns and the scaling is folded
    back so the returned weights apply to raw features.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    params, history = svr_train((x - mu) / sd, y, config)
    w_raw = params.w / sd
    b_raw = params.b - float(w_raw @ mu)
    return SvrParams(w=w_raw, b=b_raw), history


def svr_predict(params: SvrParams, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape != params.w.shape:
            raise BaselineError(f"feature length {x.shape} != weights {params.w.shape}")
        return float(x @ params.w + params.b)
    return x @ params.w + params.b


def save_svr(path, params: SvrParams) -> None:
    obj = {
        "format": SVR_FORMAT,
        "dim": int(params.w.size),
        "w": params.w.tolist(),
        "b": params.b,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_svr(path) -> SvrParams:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != SVR_FORMAT:
        raise BaselineError(f"{path}: not a {SVR_FORMAT} model file")
    w = np.asarray(obj["w"], dtype=np.float64)
    if w.size != obj["dim"]:
        raise BaselineError(f"{path}: dim field {obj['dim']} != weight count {w.size}")
    return SvrParams(w=w, b=float(obj["b"]))
