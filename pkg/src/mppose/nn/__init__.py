from . import autodiff
from .network import (
    ArchConfig,
    CheckpointError,
    MPNetwork,
    load_checkpoint,
    multipath_loss,
    save_checkpoint,
)
from .train import (
    Adam,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    ViewSet,
    make_training_pair,
    render_view_set,
    train,
)

__all__ = [
    "Adam",
    "ArchConfig",
    "CheckpointError",
    "MPNetwork",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "ViewSet",
    "autodiff",
    "load_checkpoint",
    "make_training_pair",
    "multipath_loss",
    "render_view_set",
    "save_checkpoint",
    "train",
]
