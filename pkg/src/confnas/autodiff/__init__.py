from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import Module, ModuleList, count_parameters
from .optim import LrSchedule, OptimizerState, adam, cosine_lr, optimizer_step, sgd
from .tensor import (NonFiniteError, Parameter, ShapeError, Tape, Tensor, active_tape, backward,
                     no_grad)
from .ops import forward_op

__all__ = [
    "ops", "GradCheckReport", "grad_check", "Module", "ModuleList", "count_parameters", "LrSchedule",
    "OptimizerState", "adam", "cosine_lr", "optimizer_step", "sgd", "NonFiniteError", "Parameter",
    "ShapeError", "Tape", "Tensor", "active_tape", "backward", "no_grad", "forward_op",
]
