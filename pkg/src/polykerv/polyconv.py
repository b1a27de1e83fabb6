"""Polynomial kernel convolutions and the quadratic activation they expand to.

A conventional convolution computes, per patch, the linear response
``z = patch . w + bias``. The polynomial kernel layer raises the shifted
response to an integer degree instead::

    (z + shift)^degree + bias            unregularized kernel
    gain * ((z + shift)^degree + bias)   regularized kernel

``shift`` balances the nonlinear terms, ``gain`` is a learnable scale meant
to keep the growth of activations through stacked layers in check. Both are
scalars per layer; ``bias`` is per output channel as in a conventional conv.

For degree 2 with zero bias, the regularized kernel expands into a quadratic
polynomial in z, which :class:`ReactParams` captures as a standalone
elementwise activation with independently learnable coefficients.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, ShapeError


@dataclass
class PolyKervParams:
    """Per-layer parameters of a polynomial kernel convolution.

    degree is fixed at construction; shift, gain and bias are learnable
    tensors. gain is None for the unregularized kernel.
    """

    degree: int
    shift: Tensor
    bias: Tensor
    gain: Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.degree, (int, np.integer)) or self.degree < 1:
            raise ConfigurationError(f"polynomial degree must be an integer >= 1, got {self.degree!r}")
        if self.shift.data.size != 1:
            raise ShapeError(f"shift must be a one-element tensor, got shape {self.shift.data.shape}")
        if self.gain is not None and self.gain.data.size != 1:
            raise ShapeError(f"gain must be a one-element tensor, got shape {self.gain.data.shape}")


@dataclass
class ReactParams:
    """Coefficients of the learnable quadratic activation c2*x^2 + c1*x + c0."""

    coef2: Tensor
    coef1: Tensor
    coef0: Tensor

    @classmethod
    def from_kernel(cls, gain: float, shift: float, dtype=None) -> "ReactParams":
        """Build coefficients from a degree-2 kernel's gain and shift.

        The linear coefficient is 2*gain*shift and the constant is shift^2,
        the correspondence used when porting kernel parameters into the
        activation form.
        """
        dtype = dtype or ag.default_dtype()
        return cls(
            coef2=Tensor(np.full(1, gain, dtype=dtype), requires_grad=True),
            coef1=Tensor(np.full(1, 2.0 * gain * shift, dtype=dtype), requires_grad=True),
            coef0=Tensor(np.full(1, shift * shift, dtype=dtype), requires_grad=True),
        )


def _patch_response(x: Tensor, weight: Tensor, stride: int, padding: int, what: str):
    """Shared lowering: per-patch linear responses as an (N*OH*OW, O) matrix."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"{what}: got input {x.data.shape}, weight {weight.data.shape}")
    o, i, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError(f"{what}: non-square kernel {weight.data.shape}")
    if i != x.data.shape[1]:
        raise ShapeError(f"{what}: input has {x.data.shape[1]} channels, weight expects {i}")
    n, _, oh, ow = ag._check_conv_geometry(x, k, stride, padding, what)
    cols = ag.im2col(x, k, stride, padding)
    wmat = ag.reshape(weight, (o, i * k * k))
    z = ag.matmul(cols, ag.transpose(wmat, (1, 0)))
    return z, (n, oh, ow, o)


def _to_nchw(flat: Tensor, dims) -> Tensor:
    n, oh, ow, o = dims
    return ag.transpose(ag.reshape(flat, (n, oh, ow, o)), (0, 3, 1, 2))


def polykerv2d(x: Tensor, weight: Tensor, params: PolyKervParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Polynomial kernel convolution: per patch (z + shift)^degree + bias."""
    z, dims = _patch_response(x, weight, stride, padding, "polykerv2d")
    out = ag.power_int(ag.add_scalar(z, params.shift), params.degree)
    out = ag.add_row(out, params.bias)
    return _to_nchw(out, dims)


def rpolykerv2d(x: Tensor, weight: Tensor, params: PolyKervParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Regularized variant: gain * ((z + shift)^degree + bias).

    The bias sits inside the gain scale, matching the kernel definition.
    """
    if params.gain is None:
        raise ConfigurationError("rpolykerv2d needs params.gain")
    z, dims = _patch_response(x, weight, stride, padding, "rpolykerv2d")
    out = ag.power_int(ag.add_scalar(z, params.shift), params.degree)
    out = ag.add_row(out, params.bias)
    out = ag.mul_scalar(out, params.gain)
    return _to_nchw(out, dims)


def react_quadratic(x: Tensor, params: ReactParams) -> Tensor:
    """Elementwise learnable quadratic: coef2*x^2 + coef1*x + coef0."""
    sq = ag.mul_scalar(ag.power_int(x, 2), params.coef2)
    lin = ag.mul_scalar(x, params.coef1)
    return ag.add_scalar(ag.add(sq, lin), params.coef0)


def expansion_coefficients(degree: int, gain: float, shift: float) -> list[float]:
    """Coefficients of gain*(z + shift)^degree as a polynomial in z.

    Returned in ascending order of power: index i holds the coefficient of
    z^i, which is gain * C(degree, i) * shift^(degree - i).
    """
    if degree < 1:
        raise ConfigurationError(f"degree must be >= 1, got {degree}")
    return [gain * math.comb(degree, i) * shift ** (degree - i) for i in range(degree + 1)]


def expand_rpkn(params: PolyKervParams) -> list[float]:
    """Expand a bias-free regularized kernel into polynomial coefficients."""
    if np.any(params.bias.data != 0):
        raise ConfigurationError("expansion is defined for the bias-free kernel (bias must be all zero)")
    gain = 1.0 if params.gain is None else float(params.gain.data.reshape(-1)[0])
    shift = float(params.shift.data.reshape(-1)[0])
    return expansion_coefficients(params.degree, gain, shift)
