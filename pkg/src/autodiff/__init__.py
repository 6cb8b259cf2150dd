from src.autodiff.tensor import Tape, Tensor, active_tape, backward
from src.autodiff.optim import SGD, OptimizerState, sgd_step
from src.autodiff.gradcheck import check_gradients

__all__ = [
    "Tape", "Tensor", "active_tape", "backward",
    "SGD", "OptimizerState", "sgd_step",
    "check_gradients",
]
