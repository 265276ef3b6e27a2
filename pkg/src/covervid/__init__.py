"""Divided space-time video transformer co-trained on videos and images, in numpy."""

from covervid.data import Dataset, DatasetSpec, generate
from covervid.estimator import CoVeRClassifier
from covervid.model import ModelConfig, ModelParams, forward, init_params
from covervid.tensor import Tape, Tensor
from covervid.train import TrainConfig, cotrain, pretrain_spatial

__all__ = [
    "CoVeRClassifier", "Dataset", "DatasetSpec", "ModelConfig", "ModelParams", "Tape", "Tensor",
    "TrainConfig", "cotrain", "forward", "generate", "init_params", "pretrain_spatial",
]
__version__ = "0.1.0"
