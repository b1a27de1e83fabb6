"""Stability probes: frozen-twin output comparison, activation tracking and
non-finite detection.

The output probe takes a vanilla network and a surgically converted twin
that shares its weights, runs both on the same random input without any
training, and reports the mean squared error between the final logits, or a
non-finite flag with the first layer whose output blew up. Deep polynomial
stacks are expected to overflow here; that is the phenomenon the probe makes
visible.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import no_grad
from .errors import ConfigurationError
from .netspec import LayerSpec, NetworkSpec, surgery
from .network import Network, transplant
from .zoo import build


@dataclass
class ProbeReport:
    """Result of one probe or trace run. mse is None exactly when nonfinite
    is set; first_nonfinite_layer is 1-based into the execution-order trace."""

    mse: float | None
    nonfinite: bool
    first_nonfinite_layer: int | None = None
    first_nonfinite_name: str | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)
    rms_vanilla: list = field(default_factory=list)
    rms_variant: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "mse": None if self.mse is None or not np.isfinite(self.mse) else float(self.mse),
            "nonfinite": self.nonfinite,
            "first_nonfinite_layer": self.first_nonfinite_layer,
            "first_nonfinite_name": self.first_nonfinite_name,
            "seed": self.seed,
            "meta": self.meta,
            "rms_vanilla": [_json_float(v) for _, v in self.rms_vanilla],
            "rms_variant": [_json_float(v) for _, v in self.rms_variant],
        }
        return json.dumps(doc)


def _json_float(v: float):
    return float(v) if np.isfinite(v) else None


def rms(values: np.ndarray) -> float:
    """Root mean square at float64, scaled by the max magnitude so the
    statistic never overflows before the activations themselves do."""
    with np.errstate(over="ignore", invalid="ignore"):
        x = np.asarray(values, dtype=np.float64)
        if x.size == 0:
            return 0.0
        if not np.isfinite(x).all():
            return float(np.sqrt(np.mean(x * x)))  # propagate inf/nan
        m = float(np.abs(x).max())
        if m == 0.0:
            return 0.0
        y = x / m
        return float(m * np.sqrt(np.mean(y * y)))


def activation_trace(net: Network, x) -> list:
    """(name, output array) per layer in execution order, gradients off."""
    captured: list = []
    with no_grad():
        net.forward(x, capture=captured)
    return [(name, t.data) for name, t in captured]


def track_activations(net: Network, x) -> list:
    """Per-layer RMS of the activations, in execution order."""
    return [(name, rms(data)) for name, data in activation_trace(net, x)]


def first_nonfinite(trace: list):
    """1-based index and name of the first layer with any non-finite output,
    or (None, None) when the whole trace is finite."""
    for i, (name, data) in enumerate(trace, start=1):
        if not np.isfinite(data).all():
            return i, name
    return None, None


def mse_probe(vanilla: Network, variant: Network, x) -> ProbeReport:
    """Forward both frozen networks on the same input; MSE of final logits or
    a non-finite flag locating the first offending layer."""
    trace_v = activation_trace(vanilla, x)
    trace_p = activation_trace(variant, x)
    out_v, out_p = trace_v[-1][1], trace_p[-1][1]
    if out_v.shape != out_p.shape:
        raise ConfigurationError(f"probe outputs differ in shape: {out_v.shape} vs {out_p.shape}")
    report = ProbeReport(
        mse=None,
        nonfinite=False,
        rms_vanilla=[(n, rms(d)) for n, d in trace_v],
        rms_variant=[(n, rms(d)) for n, d in trace_p],
    )
    idx, name = first_nonfinite(trace_p)
    if idx is None:
        idx, name = first_nonfinite(trace_v)
    if idx is not None:
        report.nonfinite = True
        report.first_nonfinite_layer = idx
        report.first_nonfinite_name = name
        return report
    diff = out_v.astype(np.float64) - out_p.astype(np.float64)
    report.mse = float(np.mean(diff * diff))
    return report


def run_probe(
    preset: str,
    degree: int = 2,
    shift: float = 0.0,
    seed: int = 0,
    width_multiplier: float = 1.0,
    num_classes: int = 10,
    input_shape=(3, 32, 32),
    batch: int = 1,
) -> ProbeReport:
    """Build a vanilla preset, convert a weight-sharing twin, and probe both
    on one seeded standard-normal batch."""
    spec = build(preset, width_multiplier, num_classes, input_shape)
    variant_spec = surgery(spec, "pkn", degree=degree, shift=shift)
    vanilla = Network.build(spec, seed=seed)
    variant = Network(variant_spec, transplant(vanilla.state_arrays(), variant_spec, seed=seed))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, *spec.input_shape)).astype(ag.default_dtype())
    report = mse_probe(vanilla, variant, x)
    report.seed = seed
    report.meta = {"preset": preset, "degree": degree, "shift": shift}
    return report


def nan_sentinel(loss_value, named_grads) -> str | None:
    """Location of the first non-finite value ("loss" or a parameter name),
    or None when everything is finite."""
    if not np.isfinite(loss_value):
        return "loss"
    for name, g in named_grads:
        if g is None:
            continue
        if not np.isfinite(g).all():
            return name
    return None


def squaring_chain(depth: int) -> Network:
    """Chain of `depth` single-channel degree-2 kernel layers with unit
    weights, zero shift and zero bias: on scalar input 2 the k-th layer
    outputs 2^(2^k) until the dtype overflows."""
    if depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {depth}")
    layers = [
        LayerSpec(
            kind="polykerv2d",
            name=f"square{i}",
            args={
                "in_channels": 1,
                "out_channels": 1,
                "kernel": 1,
                "stride": 1,
                "padding": 0,
                "degree": 2,
                "shift_init": 0.0,
            },
        )
        for i in range(1, depth + 1)
    ]
    layers.append(LayerSpec(kind="flatten", name="flatten", args={}))
    layers.append(LayerSpec(kind="linear", name="head", args={"in_features": 1, "out_features": 2}))
    spec = NetworkSpec(input_shape=(1, 1, 1), num_classes=2, layers=layers)
    net = Network.build(spec, seed=0)
    dt = ag.default_dtype()
    for i in range(1, depth + 1):
        net.params[f"square{i}.weight"].data = np.ones((1, 1, 1, 1), dtype=dt)
        net.params[f"square{i}.bias"].data = np.zeros(1, dtype=dt)
    # identity head so the chain output passes through unchanged in slot 0
    net.params["head.weight"].data = np.array([[1.0], [0.0]], dtype=dt)
    net.params["head.bias"].data = np.zeros(2, dtype=dt)
    return net


def squaring_chain_trace(depth: int):
    """RMS trace of the squaring chain on scalar input 2, restricted to the
    kernel layers."""
    net = squaring_chain(depth)
    x = np.full((1, 1, 1, 1), 2.0, dtype=ag.default_dtype())
    trace = track_activations(net, x)
    return [(name, value) for name, value in trace if name.startswith("square")]
