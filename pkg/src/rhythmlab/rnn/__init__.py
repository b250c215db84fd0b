"""Two-layer LSTM language identifier."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    DropoutMasks,
    LstmModel,
    ModelError,
    forward,
    forward_slice,
    gradients,
    init_model,
    loss,
)
from .train import Evaluation, LabelMismatch, TrainConfig, TrainingDiverged, evaluate, train
