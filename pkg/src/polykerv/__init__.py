"""Polynomial kernel convolution networks: layers, model zoo, optimizers,
stability diagnostics, concurrent distillation, and an experiment CLI."""

from . import autograd, backend, data, diagnostics, distill, netspec, network, optim, polyconv, zoo
from .autograd import Tensor, no_grad, precision, set_default_dtype
from .netspec import LayerSpec, NetworkSpec, surgery
from .network import Network, init_parameters, transplant
from .polyconv import PolyKervParams, ReactParams, expand_rpkn, polykerv2d, react_quadratic, rpolykerv2d
from .zoo import ModelPreset, build

__version__ = "0.1.0"
