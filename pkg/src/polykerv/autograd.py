"""Dense tensors with reverse-mode automatic differentiation.

The graph is taped implicitly: every op returns a fresh Tensor holding a
closure that knows how to push gradients to its parents. ``backward()`` on a
scalar does a topological sort and runs the closures in reverse. Gradients
accumulate into ``.grad`` until explicitly zeroed.

Precision is module-global: float32 by default (deep polynomial stacks are
expected to overflow there, which the diagnostics observe), float64 for
gradient-check builds via :func:`set_default_dtype` or :func:`precision`.

Broadcasting is deliberately restricted: elementwise ops accept two tensors
of identical shape, or a tensor and a plain Python scalar. The only other
mixed-shape ops are the dedicated ``add_row`` (bias over matrix rows) and the
scalar-parameter helpers ``add_scalar`` / ``mul_scalar``.
"""

from contextlib import contextmanager

import numpy as np

from . import backend
from .errors import ConfigurationError, InputError, ShapeError, UsageError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_QUIET = dict(over="ignore", under="ignore", invalid="ignore", divide="ignore")


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors use ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"unsupported dtype {dtype!r}, use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used by verification builds)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE if not isinstance(data, np.ndarray) else data.dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power_int(self, n)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


# -- elementwise and linear ops ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        with np.errstate(**_QUIET):
            out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return _result(out_data, (a, b), bw, "add")

    c = a.data.dtype.type(b)
    with np.errstate(**_QUIET):
        out_data = a.data + c

    def bw_scalar(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _result(out_data, (a,), bw_scalar, "add_const")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        with np.errstate(**_QUIET):
            out_data = a.data - b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(-g)

        return _result(out_data, (a, b), bw, "sub")
    return add(a, -b)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _result(-a.data, (a,), bw, "neg")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        with np.errstate(**_QUIET):
            out_data = a.data * b.data

        def bw(g):
            with np.errstate(**_QUIET):
                if a.requires_grad:
                    a.accumulate_grad(g * b.data)
                if b.requires_grad:
                    b.accumulate_grad(g * a.data)

        return _result(out_data, (a, b), bw, "mul")

    c = a.data.dtype.type(b)
    with np.errstate(**_QUIET):
        out_data = a.data * c

    def bw_scalar(g):
        if a.requires_grad:
            with np.errstate(**_QUIET):
                a.accumulate_grad(g * c)

    return _result(out_data, (a,), bw_scalar, "mul_const")


def power_int(a: Tensor, n: int) -> Tensor:
    """a**n for integer n >= 0, by repeated multiplication."""
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise ConfigurationError(f"power_int needs an integer exponent >= 0, got {n!r}")
    with np.errstate(**_QUIET):
        if n == 0:
            out_data = np.ones_like(a.data)
        else:
            out_data = a.data
            for _ in range(n - 1):
                out_data = out_data * a.data

    def bw(g):
        if not a.requires_grad:
            return
        with np.errstate(**_QUIET):
            if n == 0:
                a.accumulate_grad(np.zeros_like(a.data))
                return
            d = np.ones_like(a.data)
            for _ in range(n - 1):
                d = d * a.data
            a.accumulate_grad(g * (a.data.dtype.type(n) * d))

    return _result(out_data, (a,), bw, f"pow{n}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")
    with np.errstate(**_QUIET):
        out_data = a.data @ b.data

    def bw(g):
        with np.errstate(**_QUIET):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

    return _result(out_data, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _result(out_data, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _result(out_data, (a,), bw, "transpose")


def sum_all(a: Tensor) -> Tensor:
    with np.errstate(**_QUIET):
        out_data = a.data.sum(dtype=a.data.dtype).reshape(())

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(())))

    return _result(out_data, (a,), bw, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    with np.errstate(**_QUIET):
        out_data = (a.data.sum(dtype=a.data.dtype) / a.data.dtype.type(n)).reshape(())

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(()) / a.data.dtype.type(n)))

    return _result(out_data, (a,), bw, "mean")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-F vector to every row of an (N, F) matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_row: got {x.data.shape} and {b.data.shape}")
    with np.errstate(**_QUIET):
        out_data = x.data + b.data[None, :]

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0, dtype=g.dtype))

    return _result(out_data, (x, b), bw, "add_row")


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Add a one-element parameter tensor to every element of x."""
    if s.data.size != 1:
        raise ShapeError(f"add_scalar needs a one-element tensor, got shape {s.data.shape}")
    v = s.data.reshape(-1)[0]
    with np.errstate(**_QUIET):
        out_data = x.data + v

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if s.requires_grad:
            with np.errstate(**_QUIET):
                s.accumulate_grad(g.sum(dtype=g.dtype).reshape(s.data.shape))

    return _result(out_data, (x, s), bw, "add_scalar")


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x elementwise by a one-element parameter tensor."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar needs a one-element tensor, got shape {s.data.shape}")
    v = s.data.reshape(-1)[0]
    with np.errstate(**_QUIET):
        out_data = x.data * v

    def bw(g):
        with np.errstate(**_QUIET):
            if x.requires_grad:
                x.accumulate_grad(g * v)
            if s.requires_grad:
                s.accumulate_grad((g * x.data).sum(dtype=g.dtype).reshape(s.data.shape))

    return _result(out_data, (x, s), bw, "mul_scalar")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _result(out_data, (a,), bw, "relu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    with np.errstate(**_QUIET):
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            with np.errstate(**_QUIET):
                dot = (g * out_data).sum(axis=-1, keepdims=True)
                a.accumulate_grad(out_data * (g - dot))

    return _result(out_data, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    with np.errstate(**_QUIET):
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out_data = shifted - lse

    def bw(g):
        if a.requires_grad:
            with np.errstate(**_QUIET):
                sm = np.exp(out_data)
                a.accumulate_grad(g - sm * g.sum(axis=-1, keepdims=True))

    return _result(out_data, (a,), bw, "log_softmax")


# -- losses -------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.data.shape}")
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {b} rows of logits but labels shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    with np.errstate(**_QUIET):
        shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1))
        nll = lse - shifted[np.arange(b), labels]
        out_data = (nll.sum(dtype=logits.data.dtype) / logits.data.dtype.type(b)).reshape(())

    def bw(g):
        if logits.requires_grad:
            with np.errstate(**_QUIET):
                p = np.exp(shifted)
                p /= p.sum(axis=-1, keepdims=True)
                p[np.arange(b), labels] -= 1
                logits.accumulate_grad(p * (g.reshape(()) / logits.data.dtype.type(b)))

    return _result(out_data, (logits,), bw, "cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_probs) -> Tensor:
    """Mean over the batch of KL(teacher || softmax(student_logits)).

    Gradients flow to the student logits only; the teacher distribution is a
    plain array.
    """
    t = np.asarray(teacher_probs, dtype=student_logits.data.dtype)
    if student_logits.data.shape != t.shape or student_logits.data.ndim != 2:
        raise ShapeError(
            f"kl_divergence: student {student_logits.data.shape} vs teacher {t.shape}"
        )
    if (t < 0).any():
        raise InputError("teacher probabilities must be nonnegative")
    rows = t.sum(axis=-1)
    if np.abs(rows - 1.0).max(initial=0.0) > 1e-5:
        raise InputError(f"teacher probability rows must sum to 1, worst row sums to {rows[np.abs(rows - 1).argmax()]}")
    b = t.shape[0]
    with np.errstate(**_QUIET):
        shifted = student_logits.data - student_logits.data.max(axis=-1, keepdims=True)
        lsm = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        terms = np.where(t > 0, t * (np.log(np.maximum(t, 1e-300)) - lsm), 0.0)
        val = terms.sum(dtype=np.float64) / b
        # Gibbs' inequality guarantees >= 0; rounding may dip a hair below
        out_data = np.asarray(max(val, 0.0), dtype=student_logits.data.dtype).reshape(())

    def bw(g):
        if student_logits.requires_grad:
            with np.errstate(**_QUIET):
                p = np.exp(lsm)
                student_logits.accumulate_grad(
                    (p - t) * (g.reshape(()) / student_logits.data.dtype.type(b))
                )

    return _result(out_data, (student_logits,), bw, "kl_divergence")


# -- image ops -----------------------------------------------------------


def im2col(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Lower NCHW to an (N*OH*OW, C*K*K) patch matrix; adjoint is scatter-add."""
    n, c, h, w = x.data.shape
    out_data = backend.im2col(x.data, k, stride, padding)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(backend.col2im(g, (n, c, h, w), k, stride, padding))

    return _result(out_data, (x,), bw, "im2col")


def _check_conv_geometry(x: Tensor, k: int, stride: int, padding: int, what: str):
    n, c, h, w = x.data.shape
    oh = backend.conv_out_size(h, k, stride, padding)
    ow = backend.conv_out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"{what}: output would be {oh}x{ow} for input {h}x{w}, k={k}, stride={stride}, padding={padding}"
        )
    return n, c, oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Standard 2-d convolution, lowered to im2col + matmul.

    x: (N, C, H, W); weight: (O, C, K, K); bias: (O,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.data.shape}, weight {weight.data.shape}")
    o, i, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {weight.data.shape}")
    if i != x.data.shape[1]:
        raise ShapeError(f"conv2d: input has {x.data.shape[1]} channels, weight expects {i}")
    n, c, oh, ow = _check_conv_geometry(x, k, stride, padding, "conv2d")
    cols = im2col(x, k, stride, padding)
    wmat = reshape(weight, (o, i * k * k))
    out = matmul(cols, transpose(wmat, (1, 0)))
    out = add_row(out, bias)
    out = reshape(out, (n, oh, ow, o))
    return transpose(out, (0, 3, 1, 2))


def _check_pool(x: Tensor, k: int, stride: int, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if k < 1 or stride < 1:
        raise ConfigurationError(f"{what}: window {k} and stride {stride} must be >= 1")
    if k > h or k > w:
        raise ConfigurationError(f"{what}: window {k} larger than input {h}x{w}")


def maxpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    _check_pool(x, k, stride, "maxpool2d")
    out_data, arg = backend.maxpool(x.data, k, stride)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(backend.maxpool_backward(g, arg, x.data.shape, k, stride))

    return _result(out_data, (x,), bw, "maxpool2d")


def avgpool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    _check_pool(x, k, stride, "avgpool2d")
    out_data = backend.avgpool(x.data, k, stride)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(backend.avgpool_backward(g, x.data.shape, k, stride))

    return _result(out_data, (x,), bw, "avgpool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x (N, in), weight (out, in), bias (out,)."""
    return add_row(matmul(x, transpose(weight, (1, 0))), bias)
