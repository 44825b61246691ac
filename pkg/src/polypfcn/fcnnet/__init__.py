from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import NumericalError, softmax, softmax_cross_entropy
from .network import (
    Network,
    NetworkSpec,
    build_network,
    predict_logits,
    predict_probmap,
)
from .train import (
    EpochRecord,
    TrainConfig,
    assemble_batch,
    sgd_step,
    stack_samples,
    train,
    train_step,
)

__all__ = [
    "CheckpointError",
    "EpochRecord",
    "Network",
    "NetworkSpec",
    "NumericalError",
    "TrainConfig",
    "assemble_batch",
    "build_network",
    "load_checkpoint",
    "predict_logits",
    "predict_probmap",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "stack_samples",
    "train",
    "train_step",
]
