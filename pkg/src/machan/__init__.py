"""Multichannel attention LSTM for sequence-to-scalar popularity regression.

The package fuses three per-video visual feature channels (face, pose,
human attributes) with a learned per-timestep attention distribution,
feeds the selected channel to an LSTM, and regresses a scalar popularity
score. Includes the data pipeline (volume pooling, PoT descriptors,
label normalization, seeded splits), reverse-mode autodiff, RMSProp
training, concat/aligned-LSTM and linear-SVR baselines, a synthetic
channel-switching benchmark, scikit-learn style estimators, and a CLI.
"""

from machan.autodiff import GradCheckReport, Tape, Tensor, grad_check
from machan.baselines import (
    SvrConfig,
    SvrParams,
    aligned_forward,
    concat_forward,
    svr_predict,
    svr_train,
)
from machan.data import (
    CHANNELS,
    Dataset,
    LabelNormalizer,
    PotVector,
    RawVideoRecord,
    SplitSpec,
    VolumeSequence,
    compute_popularity,
    downsample,
    load_records,
    pool_volumes,
    pot_features,
    split_dataset,
)
from machan.estimators import MultichannelLSTMRegressor, PotFeatures, PotSVR
from machan.evaluation import EvalReport, RunAggregate, aggregate, evaluate, mse_metric, pearson
from machan.model import (
    AttentionTrace,
    ModelConfig,
    ModelParams,
    Prediction,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from machan.synth import SynthConfig, generate, generate_videos, oracle_label, score_attention
from machan.training import TrainConfig, TrainReport, clip_gradients, rmsprop_update, train

__all__ = [
    "CHANNELS",
    "AttentionTrace",
    "Dataset",
    "EvalReport",
    "GradCheckReport",
    "LabelNormalizer",
    "ModelConfig",
    "ModelParams",
    "MultichannelLSTMRegressor",
    "PotFeatures",
    "PotSVR",
    "PotVector",
    "Prediction",
    "RawVideoRecord",
    "RunAggregate",
    "SplitSpec",
    "SvrConfig",
    "SvrParams",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "VolumeSequence",
    "aggregate",
    "aligned_forward",
    "clip_gradients",
    "compute_popularity",
    "concat_forward",
    "downsample",
    "evaluate",
    "forward",
    "generate",
    "generate_videos",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "load_records",
    "mse_metric",
    "oracle_label",
    "pearson",
    "pool_volumes",
    "pot_features",
    "rmsprop_update",
    "save_checkpoint",
    "score_attention",
    "split_dataset",
    "svr_predict",
    "svr_train",
    "train",
]
__version__ = "0.1.0"
