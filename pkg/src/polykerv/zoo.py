"""Desk-scale model presets, each built as a vanilla (ReLU) NetworkSpec.

The residual family uses a 3x3 stem and stage widths (16, 32, 64, 128)
scaled by a width multiplier, with strides (1, 2, 2, 2). Depth-10/14/18/32
use basic blocks, depth-50 uses bottlenecks with expansion 4. Block counts:

    resnet10 (1, 1, 1, 1)   resnet14 (1, 1, 2, 2)   resnet18 (2, 2, 2, 2)
    resnet32 (3, 4, 5, 3)   resnet50 (3, 4, 6, 3) bottleneck

Any preset can afterwards be converted with netspec.surgery.
"""

from dataclasses import dataclass

from .errors import ConfigurationError
from .netspec import LayerSpec, NetworkSpec
from .network import init_parameters  # noqa: F401  (re-exported: zoo.init_parameters is the public entry)

__all__ = ["ModelPreset", "PRESETS", "build", "build_preset", "init_parameters"]


@dataclass
class ModelPreset:
    name: str
    width_multiplier: float = 1.0
    num_classes: int = 10
    input_shape: tuple = (3, 32, 32)


def _w(base: int, mult: float) -> int:
    return max(1, round(base * mult))


def _conv(name, cin, cout, k, stride=1, padding=0):
    return LayerSpec(
        kind="conv2d",
        name=name,
        args={"in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": padding},
    )


def _pool(kind, name, k, stride=None):
    return LayerSpec(kind=kind, name=name, args={"kernel": k, "stride": stride if stride is not None else k})


def _relu(name):
    return LayerSpec(kind="relu", name=name, args={})


def _linear(name, fin, fout):
    return LayerSpec(kind="linear", name=name, args={"in_features": fin, "out_features": fout})


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _cnn3(p: ModelPreset) -> NetworkSpec:
    c, h, w = p.input_shape
    w1, w2, w3 = _w(16, p.width_multiplier), _w(32, p.width_multiplier), _w(64, p.width_multiplier)
    layers = [
        _conv("conv1", c, w1, 3, 1, 1),
        _relu("act1"),
        _pool("maxpool", "pool1", 2),
        _conv("conv2", w1, w2, 3, 1, 1),
        _relu("act2"),
        _pool("maxpool", "pool2", 2),
        _conv("conv3", w2, w3, 3, 1, 1),
        _relu("act3"),
        LayerSpec(kind="flatten", name="flatten", args={}),
    ]
    fh, fw = h // 4, w // 4
    layers.append(_linear("fc", w3 * fh * fw, p.num_classes))
    return NetworkSpec(input_shape=p.input_shape, num_classes=p.num_classes, layers=layers)


def _lenet(p: ModelPreset) -> NetworkSpec:
    c, h, w = p.input_shape
    w1, w2 = _w(6, p.width_multiplier), _w(16, p.width_multiplier)
    f1, f2 = _w(120, p.width_multiplier), _w(84, p.width_multiplier)
    layers = [
        _conv("conv1", c, w1, 5),
        _relu("act1"),
        _pool("maxpool", "pool1", 2),
        _conv("conv2", w1, w2, 5),
        _relu("act2"),
        _pool("maxpool", "pool2", 2),
        LayerSpec(kind="flatten", name="flatten", args={}),
    ]
    fh = _out_size(_out_size(_out_size(_out_size(h, 5, 1, 0), 2, 2, 0), 5, 1, 0), 2, 2, 0)
    fw = _out_size(_out_size(_out_size(_out_size(w, 5, 1, 0), 2, 2, 0), 5, 1, 0), 2, 2, 0)
    layers += [
        _linear("fc1", w2 * fh * fw, f1),
        _relu("act3"),
        _linear("fc2", f1, f2),
        _relu("act4"),
        _linear("fc3", f2, p.num_classes),
    ]
    return NetworkSpec(input_shape=p.input_shape, num_classes=p.num_classes, layers=layers)


def _vgg11s(p: ModelPreset) -> NetworkSpec:
    # VGG-11 conv plan at one eighth width, single linear head
    c, h, w = p.input_shape
    plan = [(8, 1), (16, 1), (32, 2), (64, 2), (64, 2)]
    layers = []
    cin, idx = c, 0
    for gi, (width, reps) in enumerate(plan, start=1):
        cout = _w(width, p.width_multiplier)
        for _ in range(reps):
            idx += 1
            layers += [_conv(f"conv{idx}", cin, cout, 3, 1, 1), _relu(f"act{idx}")]
            cin = cout
        layers.append(_pool("maxpool", f"pool{gi}", 2))
        h, w = h // 2, w // 2
    if h < 1 or w < 1:
        raise ConfigurationError(f"vgg11s needs at least 32x32 input, got {p.input_shape}")
    layers.append(LayerSpec(kind="flatten", name="flatten", args={}))
    layers.append(_linear("fc", cin * h * w, p.num_classes))
    return NetworkSpec(input_shape=p.input_shape, num_classes=p.num_classes, layers=layers)


def _basic_block(name, cin, cout, stride):
    body = [
        _conv(f"{name}.conv1", cin, cout, 3, stride, 1),
        _relu(f"{name}.act1"),
        _conv(f"{name}.conv2", cout, cout, 3, 1, 1),
    ]
    projection = None
    if stride != 1 or cin != cout:
        projection = _conv(f"{name}.proj", cin, cout, 1, stride, 0)
    return LayerSpec(
        kind="residual",
        name=name,
        args={},
        body=body,
        projection=projection,
        post=[_relu(f"{name}.act2")],
    )


def _bottleneck_block(name, cin, width, stride, expansion=4):
    cout = width * expansion
    body = [
        _conv(f"{name}.conv1", cin, width, 1),
        _relu(f"{name}.act1"),
        _conv(f"{name}.conv2", width, width, 3, stride, 1),
        _relu(f"{name}.act2"),
        _conv(f"{name}.conv3", width, cout, 1),
    ]
    projection = None
    if stride != 1 or cin != cout:
        projection = _conv(f"{name}.proj", cin, cout, 1, stride, 0)
    return LayerSpec(
        kind="residual",
        name=name,
        args={},
        body=body,
        projection=projection,
        post=[_relu(f"{name}.act3")],
    )


_RESNET_PLANS = {
    "resnet10": ((1, 1, 1, 1), "basic"),
    "resnet14": ((1, 1, 2, 2), "basic"),
    "resnet18": ((2, 2, 2, 2), "basic"),
    "resnet32": ((3, 4, 5, 3), "basic"),
    "resnet50": ((3, 4, 6, 3), "bottleneck"),
}


def _resnet(p: ModelPreset) -> NetworkSpec:
    counts, block_kind = _RESNET_PLANS[p.name]
    c, h, w = p.input_shape
    widths = [_w(b, p.width_multiplier) for b in (16, 32, 64, 128)]
    expansion = 4 if block_kind == "bottleneck" else 1
    layers = [_conv("stem", c, widths[0], 3, 1, 1), _relu("stem_act")]
    cin = widths[0]
    ch, cw = h, w
    for si, (width, reps) in enumerate(zip(widths, counts), start=1):
        for bi in range(1, reps + 1):
            stride = 2 if (si > 1 and bi == 1) else 1
            name = f"stage{si}.block{bi}"
            if block_kind == "basic":
                layers.append(_basic_block(name, cin, width, stride))
                cin = width
            else:
                layers.append(_bottleneck_block(name, cin, width, stride, expansion))
                cin = width * expansion
            if stride == 2:
                ch, cw = _out_size(ch, 3, 2, 1), _out_size(cw, 3, 2, 1)
    if ch < 1 or cw < 1:
        raise ConfigurationError(f"{p.name}: input {p.input_shape} too small for four stages")
    layers.append(_pool("avgpool", "gap", ch if ch == cw else min(ch, cw)))
    gh, gw = _out_size(ch, min(ch, cw), min(ch, cw), 0), _out_size(cw, min(ch, cw), min(ch, cw), 0)
    layers.append(LayerSpec(kind="flatten", name="flatten", args={}))
    layers.append(_linear("fc", cin * gh * gw, p.num_classes))
    return NetworkSpec(input_shape=p.input_shape, num_classes=p.num_classes, layers=layers)


PRESETS = {
    "cnn3": _cnn3,
    "lenet": _lenet,
    "vgg11s": _vgg11s,
    "resnet10": _resnet,
    "resnet14": _resnet,
    "resnet18": _resnet,
    "resnet32": _resnet,
    "resnet50": _resnet,
}


def build_preset(preset: ModelPreset) -> NetworkSpec:
    if preset.name not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset.name!r}, available: {sorted(PRESETS)}")
    if preset.width_multiplier <= 0:
        raise ConfigurationError(f"width_multiplier must be positive, got {preset.width_multiplier}")
    return PRESETS[preset.name](preset)


def build(name: str, width_multiplier: float = 1.0, num_classes: int = 10, input_shape=(3, 32, 32)) -> NetworkSpec:
    return build_preset(
        ModelPreset(name=name, width_multiplier=width_multiplier, num_classes=num_classes, input_shape=tuple(input_shape))
    )
