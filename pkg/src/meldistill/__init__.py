"""Data-free knowledge distillation for mel-spectrogram sound classifiers."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    MeldistillError,
    NumericalAbort,
    ShapeError,
)
from .tensor import (
    Adam,
    GradCheckReport,
    Parameter,
    RngState,
    Tensor,
    concat,
    conv2d,
    cosine_sim,
    cross_entropy,
    grad_check,
    kld,
    mse,
    no_grad,
    roll_axis,
)

__all__ = [
    "Adam",
    "ConfigError",
    "ContractError",
    "DataError",
    "GradCheckReport",
    "MeldistillError",
    "NumericalAbort",
    "Parameter",
    "RngState",
    "ShapeError",
    "Tensor",
    "concat",
    "conv2d",
    "cosine_sim",
    "cross_entropy",
    "grad_check",
    "kld",
    "mse",
    "no_grad",
    "roll_axis",
]
