"""Hot numeric kernels: patch extraction, patch scatter and pooling.

Two implementations exist for every kernel: a numba-jitted one and a pure
numpy one. The active implementation is picked once at import time from the
``POLYKERV_BACKEND`` environment variable ("numba" or "numpy", default
"numba" when numba is importable) and can be switched at runtime with
:func:`use`, which the benchmark and the fallback-equivalence tests rely on.

All kernels are written so both paths accumulate floating point sums in the
same order, and none of them use threaded reductions, so results are
reproducible run to run.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _jit(fn):
    return njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im
#
# im2col lowers an NCHW tensor to a (N*OH*OW, C*K*K) patch matrix so that
# convolution becomes a single matmul. col2im is its exact adjoint
# (scatter-add back into the padded input).
# ---------------------------------------------------------------------------


def _im2col_loop(xp, n, c, oh, ow, k, stride, cols):
    for i in range(n):
        for r in range(oh):
            for s in range(ow):
                row = (i * oh + r) * ow + s
                col = 0
                for ch in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            cols[row, col] = xp[i, ch, r * stride + ki, s * stride + kj]
                            col += 1
    return cols


def _col2im_loop(cols, n, c, oh, ow, k, stride, out):
    # Offset-major accumulation order; the numpy path matches it so the two
    # backends agree bitwise.
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                col = (ch * k + ki) * k + kj
                for i in range(n):
                    for r in range(oh):
                        for s in range(ow):
                            row = (i * oh + r) * ow + s
                            out[i, ch, r * stride + ki, s * stride + kj] += cols[row, col]
    return out


def _im2col_numpy(xp, n, c, oh, ow, k, stride, cols):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, OH, OW, K, K)
    cols[:] = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols


def _col2im_numpy(cols, n, c, oh, ow, k, stride, out):
    cr = cols.reshape(n, oh, ow, c, k, k)
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                out[:, ch, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cr[
                    :, :, :, ch, ki, kj
                ]
    return out


# ---------------------------------------------------------------------------
# Pooling. Max pooling records the flat window offset of the running maximum
# (first-scanned index wins on ties) so the backward pass can route gradients
# deterministically.
# ---------------------------------------------------------------------------


def _maxpool_loop(x, k, stride, out, arg):
    n, c, _, _ = x.shape
    _, _, oh, ow = out.shape
    for i in range(n):
        for ch in range(c):
            for r in range(oh):
                for s in range(ow):
                    best = x[i, ch, r * stride, s * stride]
                    besti = 0
                    for ki in range(k):
                        for kj in range(k):
                            v = x[i, ch, r * stride + ki, s * stride + kj]
                            if v > best:
                                best = v
                                besti = ki * k + kj
                    out[i, ch, r, s] = best
                    arg[i, ch, r, s] = besti
    return out


def _maxpool_backward_loop(g, arg, k, stride, gx):
    n, c, oh, ow = g.shape
    for i in range(n):
        for ch in range(c):
            for r in range(oh):
                for s in range(ow):
                    a = arg[i, ch, r, s]
                    gx[i, ch, r * stride + a // k, s * stride + a % k] += g[i, ch, r, s]
    return gx


def _avgpool_loop(x, k, stride, out):
    n, c, _, _ = x.shape
    _, _, oh, ow = out.shape
    inv = 1.0 / (k * k)
    for i in range(n):
        for ch in range(c):
            for r in range(oh):
                for s in range(ow):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            acc += x[i, ch, r * stride + ki, s * stride + kj]
                    out[i, ch, r, s] = acc * inv
    return out


def _avgpool_backward_loop(g, k, stride, gx):
    n, c, oh, ow = g.shape
    inv = 1.0 / (k * k)
    for i in range(n):
        for ch in range(c):
            for r in range(oh):
                for s in range(ow):
                    v = g[i, ch, r, s] * inv
                    for ki in range(k):
                        for kj in range(k):
                            gx[i, ch, r * stride + ki, s * stride + kj] += v
    return gx


def _maxpool_numpy(x, k, stride, out, arg):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(out.shape + (k * k,))
    arg[:] = win.argmax(axis=-1)  # np.argmax keeps the first maximum on ties
    out[:] = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out


def _maxpool_backward_numpy(g, arg, k, stride, gx):
    n, c, oh, ow = g.shape
    i, ch, r, s = np.indices((n, c, oh, ow))
    hi = r * stride + arg // k
    wj = s * stride + arg % k
    np.add.at(gx, (i, ch, hi, wj), g)
    return gx


def _avgpool_numpy(x, k, stride, out):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # float64 accumulator to match the jitted loop's promotion rules
    acc = np.zeros(out.shape, dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            acc += win[..., ki, kj]
    out[:] = acc * (1.0 / (k * k))
    return out


def _avgpool_backward_numpy(g, k, stride, gx):
    oh, ow = g.shape[2], g.shape[3]
    v = g.astype(np.float64) * (1.0 / (k * k))
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += v
    return gx


_NUMPY_IMPL = {
    "im2col": _im2col_numpy,
    "col2im": _col2im_numpy,
    "maxpool": _maxpool_numpy,
    "maxpool_backward": _maxpool_backward_numpy,
    "avgpool": _avgpool_numpy,
    "avgpool_backward": _avgpool_backward_numpy,
}

_NUMBA_IMPL = None


def _numba_impl():
    global _NUMBA_IMPL
    if _NUMBA_IMPL is None:
        _NUMBA_IMPL = {
            "im2col": _jit(_im2col_loop),
            "col2im": _jit(_col2im_loop),
            "maxpool": _jit(_maxpool_loop),
            "maxpool_backward": _jit(_maxpool_backward_loop),
            "avgpool": _jit(_avgpool_loop),
            "avgpool_backward": _jit(_avgpool_backward_loop),
        }
    return _NUMBA_IMPL


_active_name = "numpy"
_active = _NUMPY_IMPL


def use(name: str) -> None:
    """Select the kernel backend, "numba" or "numpy"."""
    global _active, _active_name
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        _active = _numba_impl()
    elif name == "numpy":
        _active = _NUMPY_IMPL
    else:
        raise ValueError(f"unknown backend {name!r}, expected 'numba' or 'numpy'")
    _active_name = name


def active_backend() -> str:
    return _active_name


def _init_from_env() -> None:
    choice = os.environ.get("POLYKERV_BACKEND", "").strip().lower()
    if choice not in ("numba", "numpy"):
        choice = "numba" if HAS_NUMBA else "numpy"
    if choice == "numba" and not HAS_NUMBA:
        choice = "numpy"
    use(choice)


_init_from_env()


# ---------------------------------------------------------------------------
# Public entry points. Shape arithmetic and output allocation live here so the
# jitted bodies stay simple.
# ---------------------------------------------------------------------------


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(w, k, stride, padding)
    xp = pad_nchw(x, padding)
    cols = np.empty((n * oh * ow, c * k * k), dtype=x.dtype)
    return _active["im2col"](np.ascontiguousarray(xp), n, c, oh, ow, k, stride, cols)


def col2im(
    cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int
) -> np.ndarray:
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, padding)
    ow = conv_out_size(w, k, stride, padding)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    out = _active["col2im"](np.ascontiguousarray(cols), n, c, oh, ow, k, stride, out)
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def maxpool(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    out = _active["maxpool"](np.ascontiguousarray(x), k, stride, out, arg)
    return out, arg

def maxpool_backward(g: np.ndarray, arg: np.ndarray, x_shape: tuple, k: int, stride: int) -> np.ndarray:
    gx = np.zeros(x_shape, dtype=g.dtype)
    return _active["maxpool_backward"](np.ascontiguousarray(g), arg, k, stride, gx)


def avgpool(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    return _active["avgpool"](np.ascontiguousarray(x), k, stride, out)


def avgpool_backward(g: np.ndarray, x_shape: tuple, k: int, stride: int) -> np.ndarray:
    gx = np.zeros(x_shape, dtype=g.dtype)
    return _active["avgpool_backward"](np.ascontiguousarray(g), k, stride, gx)
