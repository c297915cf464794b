"""Desk-scale latent world models with decision-time iterative state refinement."""

from .autodiff import Tensor, backward, tensor
from .distributions import Categorical

__all__ = ["Tensor", "backward", "tensor", "Categorical"]
__version__ = "0.1.0"
