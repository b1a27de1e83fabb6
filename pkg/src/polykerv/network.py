"""Build and run networks described by a NetworkSpec.

Parameters live in a flat registry keyed by "<layer name>.<param>" so that
vanilla and surgically converted networks share names where shapes match,
which is what weight transplanting (probes, fine-tuning) relies on.
"""

import numpy as np

from . import autograd as ag
from . import backend
from .autograd import Tensor
from .errors import ConfigurationError, ShapeError
from .netspec import LayerSpec, NetworkSpec
from .polyconv import PolyKervParams, ReactParams, polykerv2d, react_quadratic, rpolykerv2d


def _conv_args(l: LayerSpec):
    a = l.args
    return int(a["in_channels"]), int(a["out_channels"]), int(a["kernel"]), int(a.get("stride", 1)), int(a.get("padding", 0))


def _out_hw(h, w, k, stride, padding):
    return (
        backend.conv_out_size(h, k, stride, padding),
        backend.conv_out_size(w, k, stride, padding),
    )


def infer_shapes(spec: NetworkSpec) -> list:
    """Walk the spec checking that adjacent layers compose; returns the
    output shape after each top-level layer."""
    shape = tuple(spec.input_shape)
    shapes = []
    for l in spec.layers:
        shape = _layer_out_shape(l, shape)
        shapes.append(shape)
    if len(shape) != 1 or shape[0] != spec.num_classes:
        raise ConfigurationError(
            f"network output shape {shape} does not match num_classes={spec.num_classes}"
        )
    return shapes


def _layer_out_shape(l: LayerSpec, shape):
    kind = l.kind
    if kind in ("conv2d", "polykerv2d", "rpolykerv2d"):
        if len(shape) != 3:
            raise ShapeError(f"{l.name}: expects (C, H, W) input, got {shape}")
        cin, cout, k, stride, padding = _conv_args(l)
        if cin != shape[0]:
            raise ShapeError(f"{l.name}: expects {cin} input channels, got {shape[0]}")
        oh, ow = _out_hw(shape[1], shape[2], k, stride, padding)
        if oh < 1 or ow < 1:
            raise ConfigurationError(f"{l.name}: output spatial dims {oh}x{ow} not positive")
        return (cout, oh, ow)
    if kind in ("maxpool", "avgpool"):
        if len(shape) != 3:
            raise ShapeError(f"{l.name}: expects (C, H, W) input, got {shape}")
        k = int(l.args["kernel"])
        stride = int(l.args.get("stride", k))
        if k > shape[1] or k > shape[2]:
            raise ConfigurationError(f"{l.name}: window {k} larger than input {shape[1]}x{shape[2]}")
        oh, ow = _out_hw(shape[1], shape[2], k, stride, 0)
        return (shape[0], oh, ow)
    if kind in ("relu", "react_pkn"):
        return shape
    if kind == "flatten":
        n = 1
        for d in shape:
            n *= d
        return (n,)
    if kind == "linear":
        if len(shape) != 1:
            raise ShapeError(f"{l.name}: expects flat input, got {shape}")
        fin, fout = int(l.args["in_features"]), int(l.args["out_features"])
        if fin != shape[0]:
            raise ShapeError(f"{l.name}: expects {fin} input features, got {shape[0]}")
        return (fout,)
    if kind == "residual":
        body_shape = shape
        for sub in l.body:
            body_shape = _layer_out_shape(sub, body_shape)
        skip_shape = shape
        if l.projection is not None:
            skip_shape = _layer_out_shape(l.projection, skip_shape)
        if body_shape != skip_shape:
            raise ShapeError(
                f"{l.name}: body output {body_shape} does not match skip path {skip_shape}"
            )
        out = body_shape
        for sub in l.post or []:
            out = _layer_out_shape(sub, out)
        return out
    raise ConfigurationError(f"{l.name}: unknown layer kind {kind!r}")


# -- parameter initialization -----------------------------------------------


def parameter_names(spec: NetworkSpec) -> list:
    """Registry keys the spec requires, in deterministic walk order."""
    names = []
    for l in spec.layers:
        names.extend(layer_parameter_names(l))
    return names


def layer_parameter_names(layer: LayerSpec) -> list:
    names = []

    def visit(l: LayerSpec):
        if l.kind in ("conv2d", "polykerv2d", "rpolykerv2d"):
            names.extend([f"{l.name}.weight", f"{l.name}.bias"])
            if l.kind in ("polykerv2d", "rpolykerv2d"):
                names.append(f"{l.name}.shift")
            if l.kind == "rpolykerv2d":
                names.append(f"{l.name}.gain")
        elif l.kind == "react_pkn":
            names.extend([f"{l.name}.coef2", f"{l.name}.coef1", f"{l.name}.coef0"])
        elif l.kind == "linear":
            names.extend([f"{l.name}.weight", f"{l.name}.bias"])
        elif l.kind == "residual":
            for sub in l.body:
                visit(sub)
            if l.projection is not None:
                visit(l.projection)
            for sub in l.post or []:
                visit(sub)

    visit(layer)
    return names


def init_parameters(spec: NetworkSpec, seed: int) -> dict:
    """Fan-in scaled uniform init for conv/linear weights (bound sqrt(6/fan_in)),
    zero biases, and configured initial values for the polynomial parameters.
    Deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    dt = ag.default_dtype()
    params: dict[str, Tensor] = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dt)

    def scalar(v):
        return Tensor(np.full(1, v, dtype=dt), requires_grad=True)

    def visit(l: LayerSpec):
        a = l.args
        if l.kind in ("conv2d", "polykerv2d", "rpolykerv2d"):
            cin, cout, k, _, _ = _conv_args(l)
            params[f"{l.name}.weight"] = Tensor(uniform((cout, cin, k, k), cin * k * k), requires_grad=True)
            params[f"{l.name}.bias"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True)
            if l.kind in ("polykerv2d", "rpolykerv2d"):
                params[f"{l.name}.shift"] = scalar(float(a.get("shift_init", 0.5)))
            if l.kind == "rpolykerv2d":
                params[f"{l.name}.gain"] = scalar(float(a.get("gain_init", 0.009)))
        elif l.kind == "react_pkn":
            params[f"{l.name}.coef2"] = scalar(float(a.get("coef2_init", 0.009)))
            params[f"{l.name}.coef1"] = scalar(float(a.get("coef1_init", 0.5)))
            params[f"{l.name}.coef0"] = scalar(float(a.get("coef0_init", 0.47)))
        elif l.kind == "linear":
            fin, fout = int(a["in_features"]), int(a["out_features"])
            params[f"{l.name}.weight"] = Tensor(uniform((fout, fin), fin), requires_grad=True)
            params[f"{l.name}.bias"] = Tensor(np.zeros(fout, dtype=dt), requires_grad=True)
        elif l.kind == "residual":
            for sub in l.body:
                visit(sub)
            if l.projection is not None:
                visit(l.projection)
            for sub in l.post or []:
                visit(sub)

    for l in spec.layers:
        visit(l)
    return params


def transplant(source: dict, target_spec: NetworkSpec, seed: int) -> dict:
    """Fresh-init parameters for target_spec, then overwrite every parameter
    whose name also appears in `source`. Same-name shape mismatches are
    collected and reported as one error."""
    params = init_parameters(target_spec, seed)
    mismatched = []
    for name, tensor in params.items():
        if name not in source:
            continue
        src = np.asarray(source[name])
        if tuple(src.shape) != tuple(tensor.data.shape):
            mismatched.append(f"{name}: checkpoint {tuple(src.shape)} vs network {tuple(tensor.data.shape)}")
            continue
        tensor.data = src.astype(tensor.data.dtype, copy=True)
    if mismatched:
        raise ConfigurationError(
            "transplant failed, mismatched parameter shapes: " + "; ".join(mismatched)
        )
    return params


# -- the network itself ------------------------------------------------------


class Network:
    """A NetworkSpec bound to a parameter registry, ready to run."""

    def __init__(self, spec: NetworkSpec, params: dict):
        infer_shapes(spec)
        self.spec = spec
        self.params = params
        needed = set(parameter_names(spec))
        have = set(params.keys())
        if needed != have:
            missing = sorted(needed - have)
            extra = sorted(have - needed)
            raise ConfigurationError(f"parameter registry mismatch: missing {missing}, unexpected {extra}")

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int = 0) -> "Network":
        return cls(spec, init_parameters(spec, seed))

    # -- parameter plumbing ----------------------------------------------

    def param_items(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            src = np.asarray(arrays[name])
            if src.shape != t.data.shape:
                raise ConfigurationError(f"{name}: cannot load shape {src.shape} into {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)

    # -- forward -----------------------------------------------------------

    def forward(self, x, capture: list | None = None) -> Tensor:
        """Run the network. If `capture` is a list, (name, Tensor) pairs are
        appended for every layer output in execution order."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=ag.default_dtype()))
        if x.data.ndim != 4:
            raise ShapeError(f"network input must be NCHW, got {x.data.shape}")
        with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
            out = x
            for l in self.spec.layers:
                out = self._run_layer(l, out, capture)
        return out

    def _p(self, name, field):
        return self.params[f"{name}.{field}"]

    def _run_layer(self, l: LayerSpec, x: Tensor, capture) -> Tensor:
        kind = l.kind
        if kind == "conv2d":
            _, _, _, stride, padding = _conv_args(l)
            out = ag.conv2d(x, self._p(l.name, "weight"), self._p(l.name, "bias"), stride, padding)
        elif kind in ("polykerv2d", "rpolykerv2d"):
            _, _, _, stride, padding = _conv_args(l)
            p = PolyKervParams(
                degree=int(l.args["degree"]),
                shift=self._p(l.name, "shift"),
                bias=self._p(l.name, "bias"),
                gain=self._p(l.name, "gain") if kind == "rpolykerv2d" else None,
            )
            fn = rpolykerv2d if kind == "rpolykerv2d" else polykerv2d
            out = fn(x, self._p(l.name, "weight"), p, stride, padding)
        elif kind == "react_pkn":
            p = ReactParams(self._p(l.name, "coef2"), self._p(l.name, "coef1"), self._p(l.name, "coef0"))
            out = react_quadratic(x, p)
        elif kind == "relu":
            out = ag.relu(x)
        elif kind == "maxpool":
            out = ag.maxpool2d(x, int(l.args["kernel"]), int(l.args.get("stride", l.args["kernel"])))
        elif kind == "avgpool":
            out = ag.avgpool2d(x, int(l.args["kernel"]), int(l.args.get("stride", l.args["kernel"])))
        elif kind == "flatten":
            n = x.data.shape[0]
            out = ag.reshape(x, (n, int(np.prod(x.data.shape[1:]))))
        elif kind == "linear":
            out = ag.linear(x, self._p(l.name, "weight"), self._p(l.name, "bias"))
        elif kind == "residual":
            body = x
            for sub in l.body:
                body = self._run_layer(sub, body, capture)
            skip = x
            if l.projection is not None:
                skip = self._run_layer(l.projection, skip, capture)
            out = ag.add(body, skip)
            if capture is not None:
                capture.append((f"{l.name}.add", out))
            for sub in l.post or []:
                out = self._run_layer(sub, out, capture)
            return out
        else:
            raise ConfigurationError(f"{l.name}: unknown layer kind {kind!r}")
        if capture is not None:
            capture.append((l.name, out))
        return out
