from . import nn, optim
from .gradcheck import grad_check
from .optim import SGD, Adam, adam_step, sgd_step
from .serialize import load_params, save_params
from .tensor import NumericError, ShapeError, Tensor, count_flops, no_grad

__all__ = [
    "Adam", "SGD", "NumericError", "ShapeError", "Tensor", "adam_step", "count_flops", "grad_check",
    "load_params", "nn", "no_grad", "optim", "save_params", "sgd_step",
]
