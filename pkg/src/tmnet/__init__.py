"""Controllable space-time video super-resolution on a small numpy autodiff engine."""

from tmnet.tensor import ConfigError, ShapeError, TapeError, Tensor, backward, no_grad, tensor

__all__ = ["ConfigError", "ShapeError", "TapeError", "Tensor", "backward", "no_grad", "tensor"]
__version__ = "0.1.0"
