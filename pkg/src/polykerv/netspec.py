"""Declarative network descriptions, their serialization, and surgery.

A NetworkSpec is an ordered list of layer descriptors plus the input shape
and class count. Residual blocks nest: they carry a body, an optional
projection for the skip path, and a post list applied after the add.

Surgery converts a vanilla description (conv + relu + maxpool) into one of
the polynomial variants:

    pkn    conv2d -> polykerv2d, relu dropped, maxpool -> avgpool
    rpkn   conv2d -> rpolykerv2d, relu dropped, maxpool -> avgpool
    react  relu -> react_pkn, maxpool -> avgpool, convs untouched

Specs serialize to a versioned JSON document and round-trip bit-exactly.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigurationError, ConversionError

SPEC_VERSION = 1

LAYER_KINDS = (
    "conv2d",
    "polykerv2d",
    "rpolykerv2d",
    "react_pkn",
    "relu",
    "maxpool",
    "avgpool",
    "linear",
    "residual",
    "flatten",
)

# default initial values for the quadratic activation coefficients
REACT_DEFAULT = (0.009, 0.5, 0.47)


@dataclass
class LayerSpec:
    kind: str
    name: str
    args: dict = field(default_factory=dict)
    body: list | None = None
    projection: "LayerSpec | None" = None
    post: list | None = None

    def __post_init__(self):
        # kinds are validated where they are interpreted (build, surgery) so
        # documents written by newer code fail with a pointed message there
        if self.kind == "residual" and self.body is None:
            raise ConfigurationError(f"residual layer {self.name!r} needs a body")


@dataclass
class NetworkSpec:
    input_shape: tuple
    num_classes: int
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (C, H, W) of positive ints, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")

    # -- serialization ---------------------------------------------------

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_dict(self) -> dict:
        return {
            "spec_version": SPEC_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"network spec document is not valid JSON: {e}") from None
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        version = doc.get("spec_version")
        if version is None:
            raise ConfigurationError("network spec document is missing spec_version")
        if version > SPEC_VERSION:
            raise ConfigurationError(f"network spec version {version} is newer than supported ({SPEC_VERSION})")
        return cls(
            input_shape=tuple(doc["input_shape"]),
            num_classes=doc["num_classes"],
            layers=[_layer_from_dict(d) for d in doc["layers"]],
        )


def _layer_to_dict(l: LayerSpec) -> dict:
    d = {"kind": l.kind, "name": l.name, "args": dict(l.args)}
    if l.body is not None:
        d["body"] = [_layer_to_dict(x) for x in l.body]
    if l.projection is not None:
        d["projection"] = _layer_to_dict(l.projection)
    if l.post is not None:
        d["post"] = [_layer_to_dict(x) for x in l.post]
    return d


def _layer_from_dict(d: dict) -> LayerSpec:
    return LayerSpec(
        kind=d["kind"],
        name=d["name"],
        args=dict(d.get("args", {})),
        body=[_layer_from_dict(x) for x in d["body"]] if "body" in d else None,
        projection=_layer_from_dict(d["projection"]) if "projection" in d else None,
        post=[_layer_from_dict(x) for x in d["post"]] if "post" in d else None,
    )


# -- surgery ---------------------------------------------------------------

SURGERY_MODES = ("pkn", "rpkn", "react")


def surgery(spec: NetworkSpec, mode: str, **mode_args) -> NetworkSpec:
    """Convert a vanilla spec into a polynomial variant. Names are preserved.

    mode_args:
        pkn:   degree (default 2), shift (default 0.5)
        rpkn:  degree, shift, gain (default 0.009)
        react: coef2, coef1, coef0 (default 0.009, 0.5, 0.47)
    """
    if mode not in SURGERY_MODES:
        raise ConversionError(f"unknown surgery mode {mode!r}, expected one of {SURGERY_MODES}")
    known = {
        "pkn": {"degree", "shift"},
        "rpkn": {"degree", "shift", "gain"},
        "react": {"coef2", "coef1", "coef0"},
    }[mode]
    extra = set(mode_args) - known
    if extra:
        raise ConversionError(f"surgery mode {mode!r} does not take arguments {sorted(extra)}")
    args = {
        "degree": int(mode_args.get("degree", 2)),
        "shift": float(mode_args.get("shift", 0.5)),
        "gain": float(mode_args.get("gain", 0.009)),
        "coef2": float(mode_args.get("coef2", REACT_DEFAULT[0])),
        "coef1": float(mode_args.get("coef1", REACT_DEFAULT[1])),
        "coef0": float(mode_args.get("coef0", REACT_DEFAULT[2])),
    }
    if args["degree"] < 1:
        raise ConversionError(f"surgery degree must be >= 1, got {args['degree']}")
    return NetworkSpec(
        input_shape=spec.input_shape,
        num_classes=spec.num_classes,
        layers=_convert_list(spec.layers, mode, args),
    )


def _convert_list(layers, mode, args):
    out = []
    for l in layers:
        conv = _convert_layer(l, mode, args)
        if conv is not None:
            out.append(conv)
    return out


def _convert_layer(l: LayerSpec, mode: str, args: dict):
    if l.kind == "residual":
        return LayerSpec(
            kind="residual",
            name=l.name,
            args=dict(l.args),
            body=_convert_list(l.body, mode, args),
            projection=_convert_layer(l.projection, mode, args) if l.projection is not None else None,
            post=_convert_list(l.post, mode, args) if l.post is not None else None,
        )
    if l.kind == "maxpool":
        return LayerSpec(kind="avgpool", name=l.name, args=dict(l.args))
    if mode in ("pkn", "rpkn"):
        if l.kind == "relu":
            return None
        if l.kind == "conv2d":
            new_args = dict(l.args)
            new_args["degree"] = args["degree"]
            new_args["shift_init"] = args["shift"]
            if mode == "rpkn":
                new_args["gain_init"] = args["gain"]
                return LayerSpec(kind="rpolykerv2d", name=l.name, args=new_args)
            return LayerSpec(kind="polykerv2d", name=l.name, args=new_args)
    else:  # react
        if l.kind == "relu":
            return LayerSpec(
                kind="react_pkn",
                name=l.name,
                args={"coef2_init": args["coef2"], "coef1_init": args["coef1"], "coef0_init": args["coef0"]},
            )
    if l.kind in LAYER_KINDS:
        return LayerSpec(
            kind=l.kind,
            name=l.name,
            args=dict(l.args),
            body=list(l.body) if l.body is not None else None,
            projection=l.projection,
            post=list(l.post) if l.post is not None else None,
        )
    raise ConversionError(f"cannot convert unknown layer kind {l.kind!r}")


def contains_kind(spec: NetworkSpec, kind: str) -> bool:
    def walk(layers):
        for l in layers:
            if l.kind == kind:
                return True
            if l.kind == "residual":
                if walk(l.body) or (l.projection is not None and walk([l.projection])):
                    return True
                if l.post is not None and walk(l.post):
                    return True
        return False

    return walk(spec.layers)
