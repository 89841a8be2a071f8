"""Small reverse-mode differentiation engine over float64 numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .params import ParamGroup
from .tensor import Tensor, as_tensor, backward, zero_grads

__all__ = ["ParamGroup", "Tensor", "as_tensor", "backward", "grad_check", "ops", "zero_grads"]
