"""Conditional deformable templates: FiLM template generator, SVF registration
and a projection patch discriminator on a small reverse-mode autodiff core."""

from . import evaluation, geometry, io, layers, metrics, networks, objectives, synthdata, tensor, trainer
from .tensor import Tensor, grad, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "grad", "no_grad", "evaluation", "geometry", "io", "layers", "metrics", "networks",
           "objectives", "synthdata", "tensor", "trainer", "__version__"]
