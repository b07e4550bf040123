"""Differentiable underwater scene reconstruction toolkit.

A minimal 3D Gaussian splatting renderer coupled to a physically motivated
water model (wavelength-selective attenuation plus multi-scale depth-aware
backscatter), trained end-to-end with a from-scratch reverse-mode autodiff
tape, and inverted to restore water-free imagery.
"""

from .core import DivergedError, InvalidArgumentError
from .renderer import Camera, GaussianPrimitive, RenderOutput, rasterize
from .tape import ParamVector, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "DivergedError",
    "GaussianPrimitive",
    "InvalidArgumentError",
    "ParamVector",
    "RenderOutput",
    "Tensor",
    "no_grad",
    "rasterize",
    "__version__",
]
