from .loss import generalized_iou, grounding_loss
from .model import GrounderConfig, GroundingModel, build_vocab, tokenize
from .stage import (
    GrounderState,
    GrounderTrainConfig,
    GroundingExample,
    SparseTubeletPrediction,
    new_state,
    predict_tubelet,
    train_grounder,
)

__all__ = [
    "GrounderConfig",
    "GrounderState",
    "GrounderTrainConfig",
    "GroundingExample",
    "GroundingModel",
    "SparseTubeletPrediction",
    "build_vocab",
    "generalized_iou",
    "grounding_loss",
    "new_state",
    "predict_tubelet",
    "tokenize",
    "train_grounder",
]
