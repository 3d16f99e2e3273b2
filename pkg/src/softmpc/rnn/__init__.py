"""Recurrent surrogate models: numpy GRU/LSTM with hand-derived gradients."""

from .backprop import (
    loss_and_grads,
    make_dropout_masks,
    mse,
    teacher_forced_loss,
    teacher_forced_loss_and_grads,
    zero_grads,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    GATE_COUNT,
    Hidden,
    LayerParams,
    RnnArch,
    RnnModel,
    head_forward,
    init_model,
    rnn_forward,
    rollout,
    step_stack,
)
from .optim import Adam, PlateauScheduler
from .train import (
    SelfLoopTrainer,
    TeacherForcedTrainer,
    TrainSpec,
    train,
    train_teacher_forced,
)

__all__ = [
    "GATE_COUNT", "Hidden", "LayerParams", "RnnArch", "RnnModel",
    "head_forward", "init_model", "rnn_forward", "rollout", "step_stack",
    "mse", "zero_grads", "loss_and_grads", "make_dropout_masks",
    "teacher_forced_loss", "teacher_forced_loss_and_grads",
    "Adam", "PlateauScheduler",
    "TrainSpec", "SelfLoopTrainer", "TeacherForcedTrainer",
    "train", "train_teacher_forced",
    "save_checkpoint", "load_checkpoint",
]
