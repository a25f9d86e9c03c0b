from . import functional
from .gradcheck import GradCheckResult, grad_check
from .rng import Rng, derive_seed
from .tensor import DimensionError, NumericalError, Tensor, as_tensor, is_grad_enabled, no_grad, parameter

DiffNode = Tensor

__all__ = [
    "DiffNode",
    "DimensionError",
    "GradCheckResult",
    "NumericalError",
    "Rng",
    "Tensor",
    "as_tensor",
    "derive_seed",
    "functional",
    "grad_check",
    "is_grad_enabled",
    "no_grad",
    "parameter",
]
