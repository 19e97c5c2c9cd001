"""Scikit-learn style estimators wrapping the sequence regressors.

``MultichannelLSTMRegressor`` fits on lists of ``VolumeSequence`` (the
pipeline's pooled representation); ``PotFeatures`` + ``PotSVR`` compose
into an sklearn ``Pipeline`` over raw records. Both regressors follow
the fit/predict/get_params contract, so they work with ``clone``,
``GridSearchCV`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from machan.baselines import SvrConfig, standardized_svr_train, svr_predict, svr_train
from machan.data import CHANNELS, RawVideoRecord, VolumeSequence, pot_features
from machan.evaluation import predict_all
from machan.model import ModelConfig, forward
from machan.synth import score_attention
from machan.training import TrainConfig, train


def check_sequences(x) -> list[VolumeSequence]:
    """Validate a sequence batch: non-empty, right type, consistent dims."""
    if not isinstance(x, (list, tuple)) or len(x) == 0:
        raise ValueError("X must be a non-empty list of VolumeSequence")
    dims = None
    for item in x:
        if not isinstance(item, VolumeSequence):
            raise TypeError(f"X items must be VolumeSequence, got {type(item).__name__}")
        if dims is None:
            dims = item.dims
        elif item.dims != dims:
            raise ValueError(f"{item.id}: channel dims {item.dims} != first item {dims}")
    return list(x)


def _with_labels(sequences, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (len(sequences),):
        raise ValueError(f"y must have shape ({len(sequences)},), got {y.shape}")
    return [
        VolumeSequence(id=s.id, channels=s.channels, present=s.present, label=float(v))
        for s, v in zip(sequences, y)
    ]


class MultichannelLSTMRegressor(BaseEstimator, RegressorMixin):
    """Sequence-to-scalar regressor over three visual channels.

    ``fusion`` picks the architecture: ``hard`` (argmax channel selection
    with straight-through training), ``soft`` (attention-weighted sum),
    ``concat`` (raw concatenation baseline) or ``aligned-concat``.
    A fraction of the training data is held out internally for the
    validation-based epoch selection.
    """

    def __init__(self, fusion="hard", m=16, n=16, d_s=16, head="last",
                 learning_rate=1e-3, epochs=50, batch_size=16, patience=10,
                 clip_norm=5.0, decay=0.9, soft_warmup_epochs=0,
                 val_fraction=0.2, seed=0):
        self.fusion = fusion
        self.m = m
        self.n = n
        self.d_s = d_s
        self.head = head
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.clip_norm = clip_norm
        self.decay = decay
        self.soft_warmup_epochs = soft_warmup_epochs
        self.val_fraction = val_fraction
        self.seed = seed

    def _configs(self, sequences):
        dims = sequences[0].dims
        model_config = ModelConfig(
            d_f=dims["face"], d_p=dims["pose"], d_c=dims["hat"],
            m=self.m, n=self.n, d_s=self.d_s, fusion=self.fusion, head=self.head,
        )
        train_config = TrainConfig(
            learning_rate=self.learning_rate, decay=self.decay,
            clip_norm=self.clip_norm, epochs=self.epochs,
            batch_size=self.batch_size, patience=self.patience,
            seed=self.seed, soft_warmup_epochs=self.soft_warmup_epochs,
        )
        return model_config, train_config

    def fit(self, X, y=None):
        sequences = check_sequences(X)
        if y is not None:
            sequences = _with_labels(sequences, y)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        model_config, train_config = self._configs(sequences)
        n_val = max(1, int(round(self.val_fraction * len(sequences))))
        if n_val >= len(sequences):
            raise ValueError("not enough sequences to hold out a validation split")
        order = np.random.default_rng(self.seed).permutation(len(sequences))
        val = [sequences[i] for i in order[:n_val]]
        tr = [sequences[i] for i in order[n_val:]]
        self.params_, self.report_ = train(tr, val, model_config, train_config)
        self.config_ = model_config
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict")

    def predict(self, X):
        self._check_fitted()
        return predict_all(self.params_, self.config_, check_sequences(X))

    def attention_traces(self, X):
        """Per-sequence attention traces (attention fusion modes only)."""
        self._check_fitted()
        return [forward(s, self.params_, self.config_).trace for s in check_sequences(X)]

    def attention_accuracy(self, X, modes: dict[str, list[int]]) -> float:
        """Mean fraction of timesteps whose selected channel matches ``modes``."""
        sequences = check_sequences(X)
        traces = self.attention_traces(sequences)
        scores = [score_attention(tr, modes[s.id]) for s, tr in zip(sequences, traces)]
        return float(np.mean(scores))


class PotFeatures(BaseEstimator, TransformerMixin):
    """Transform raw per-video records into pooled-time-series vectors."""

    def __init__(self, levels=5, channels=CHANNELS, grad_mode="sum"):
        self.levels = levels
        self.channels = channels
        self.grad_mode = grad_mode

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        if not isinstance(X, (list, tuple)) or len(X) == 0:
            raise ValueError("X must be a non-empty list of RawVideoRecord")
        rows = []
        for record in X:
            if not isinstance(record, RawVideoRecord):
                raise TypeError(
                    f"X items must be RawVideoRecord, got {type(record).__name__}"
                )
            rows.append(pot_features(record, levels=self.levels,
                                     channels=tuple(self.channels),
                                     grad_mode=self.grad_mode).values)
        return np.vstack(rows)


class PotSVR(BaseEstimator, RegressorMixin):
    """Linear epsilon-insensitive SVR trained by seeded subgradient descent.

    ``standardize`` preconditions the subgradient steps on column-scaled
    features (scaling folds back into the raw-space weights).
    """

    def __init__(self, epsilon=0.1, lam=1e-4, steps=2000, learning_rate=0.05,
                 standardize=True, seed=0):
        self.epsilon = epsilon
        self.lam = lam
        self.steps = steps
        self.learning_rate = learning_rate
        self.standardize = standardize
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        config = SvrConfig(epsilon=self.epsilon, lam=self.lam, steps=self.steps,
                           learning_rate=self.learning_rate, seed=self.seed)
        fit_fn = standardized_svr_train if self.standardize else svr_train
        self.svr_params_, self.history_ = fit_fn(X, y, config)
        return self

    def predict(self, X):
        if not hasattr(self, "svr_params_"):
            raise NotFittedError("call fit before predict")
        X = np.asarray(X, dtype=np.float64)
        return np.atleast_1d(svr_predict(self.svr_params_, X))
