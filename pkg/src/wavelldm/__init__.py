"""Lightweight latent diffusion for speech restoration: codec, diffusion, metrics."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
