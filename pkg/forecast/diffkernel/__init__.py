"""Minimal reverse-mode differentiation kernel on numpy arrays."""

from . import ops
from .distributions import GmmStep, gmm_log_density
from .layers import Affine, ConvEncoder, LSTMCell, LSTMState, Module
from .optim import SGD, Adam, sgd_step
from .tape import Parameter, Tape, Tensor

__all__ = [
    "Adam",
    "Affine",
    "ConvEncoder",
    "GmmStep",
    "LSTMCell",
    "LSTMState",
    "Module",
    "Parameter",
    "SGD",
    "Tape",
    "Tensor",
    "gmm_log_density",
    "ops",
    "sgd_step",
]
