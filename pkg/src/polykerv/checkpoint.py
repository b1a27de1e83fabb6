"""Versioned checkpoint container: named parameter arrays, optional
optimizer state, the network spec document and free-form metadata, all in
one npz file."""

import io
import json

import numpy as np

from .errors import ConfigurationError
from .netspec import NetworkSpec

FORMAT_VERSION = 1


def save_checkpoint(path, spec: NetworkSpec, params: dict, optimizer_state: dict | None = None, meta: dict | None = None) -> None:
    arrays = {
        "format_version": np.array([FORMAT_VERSION], dtype=np.int64),
        "spec_text": np.array(spec.to_text()),
        "meta_json": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    for name, value in params.items():
        data = value.data if hasattr(value, "data") else np.asarray(value)
        arrays[f"param/{name}"] = data
    for key, value in (optimizer_state or {}).items():
        arrays[f"opt/{key}"] = np.asarray(value)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (spec, params dict of arrays, optimizer state dict, meta)."""
    with np.load(path, allow_pickle=False) as z:
        if "format_version" not in z:
            raise ConfigurationError(f"{path}: not a checkpoint (no format_version)")
        version = int(z["format_version"][0])
        if version > FORMAT_VERSION:
            raise ConfigurationError(
                f"{path}: checkpoint format {version} is newer than supported ({FORMAT_VERSION})"
            )
        spec = NetworkSpec.from_text(str(z["spec_text"][()]))
        meta = json.loads(str(z["meta_json"][()]))
        params = {}
        opt_state = {}
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/") :]] = z[key]
            elif key.startswith("opt/"):
                opt_state[key[len("opt/") :]] = z[key]
    return spec, params, opt_state, meta
