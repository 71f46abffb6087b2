"""Patch-level quality estimation and patch-weighted preference optimization
for a toy diffusion denoiser, end to end on synthetic scenes."""

from .tensor import GradTape, Tensor

__all__ = ["Tensor", "GradTape"]
__version__ = "0.1.0"
