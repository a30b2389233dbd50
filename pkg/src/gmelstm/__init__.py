"""Gated multimodal embedding LSTM with temporal attention, in numpy.

Submodules: ``numerics`` (reverse-mode tensors), ``model`` (LSTM and
attention), ``gme`` (gate controllers), ``training`` (Adam, supervised and
REINFORCE loops), ``data`` (clips, preprocessing, splits, synthetic tasks),
``evaluation`` (metrics and reports), ``experiments`` and ``cli``.
"""
from .data import MultimodalClip, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .evaluation import EvalReport, binary_metrics, evaluate
from .gme import GateController, GateTrace, inference_gates, sample_gates
from .model import ModelShape, SequenceModelParams, forward, mae_loss, predict
from .training import Adam, ReinforceConfig, TrainConfig, train_gme, train_supervised

__version__ = "0.1.0"

__all__ = [
    "Adam", "EvalReport", "GateController", "GateTrace", "ModelShape", "MultimodalClip",
    "ReinforceConfig", "SequenceModelParams", "SyntheticSpec", "TrainConfig",
    "binary_metrics", "evaluate", "forward", "generate_synthetic", "inference_gates",
    "load_dataset", "mae_loss", "predict", "sample_gates", "save_dataset", "train_gme",
    "train_supervised",
]
