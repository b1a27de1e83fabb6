"""Run configuration: one JSON document, validated field by field before any
compute starts. CLI flags override individual fields via dotted paths."""

import copy
import json
import os
from pathlib import Path

from .data import AugmentPolicy
from .errors import ConfigurationError
from .netspec import SURGERY_MODES
from .train import OPTIMIZERS, SCHEDULERS, TrainSettings
from .zoo import PRESETS

DATA_DIR_ENV = "POLYKERV_DATA_DIR"

DEFAULT_CONFIG = {
    "run_id": "run",
    "seed": 0,
    "out_dir": "runs",
    "model": {
        "preset": "cnn3",
        "width_multiplier": 1.0,
        "num_classes": 3,
        "input_shape": [1, 16, 16],
        "mode": "vanilla",
        "mode_args": {},
    },
    "data": {
        "source": "spirals",
        "spirals": {"n_per_class": 200, "classes": 3, "noise_sd": 0.1, "val_per_class": 100},
        "cifar10": {"train": None, "test": None},
        "mnist": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None},
        "limit": None,
        "augment": None,
        "normalize": True,
    },
    "train": {
        "optimizer": "adam",
        "lr": 3e-4,
        "momentum": 0.9,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.0,
        "momo_lower_bound": 0.0,
        "batch_size": 128,
        "epochs": 10,
        "scheduler": "none",
        "scheduler_args": {},
        "layerwise": None,
    },
    "kd": {
        "teacher_lr": 3e-4,
        "student_lr": 3e-5,
        "temperature": 1.0,
        "mix": 1.0,
        "teacher_optimizer": None,
        "student_optimizer": None,
    },
}

_OPEN_DICTS = {"model.mode_args", "train.scheduler_args", "data.augment"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigurationError(f"unknown config field {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and here not in _OPEN_DICTS:
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Read the config file (optional), apply dotted-path overrides, validate."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {path}: {e}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path} must hold a JSON object")
        cfg = _merge(cfg, doc)
    for item in overrides:
        cfg = _apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def _apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like path.to.field=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        prefix = ".".join(parts[: i + 1])
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"override {item!r}: {prefix!r} is not a config section")
        node = node[part]
    leaf = parts[-1]
    parent_path = ".".join(parts[:-1])
    if leaf not in node and parent_path not in _OPEN_DICTS:
        raise ConfigurationError(f"override {item!r}: unknown field {key.strip()!r}")
    node[leaf] = value
    return cfg


def _require(cond: bool, field: str, message: str):
    if not cond:
        raise ConfigurationError(f"{field}: {message}")


def validate_config(cfg: dict) -> None:
    m = cfg["model"]
    _require(m["preset"] in PRESETS, "model.preset", f"unknown preset {m['preset']!r}, available: {sorted(PRESETS)}")
    _require(m["mode"] in ("vanilla",) + SURGERY_MODES, "model.mode", f"must be vanilla or one of {SURGERY_MODES}")
    _require(isinstance(m["width_multiplier"], (int, float)) and m["width_multiplier"] > 0, "model.width_multiplier", "must be a positive number")
    _require(isinstance(m["num_classes"], int) and m["num_classes"] >= 2, "model.num_classes", "must be an integer >= 2")
    shape = m["input_shape"]
    _require(
        isinstance(shape, (list, tuple)) and len(shape) == 3 and all(isinstance(d, int) and d >= 1 for d in shape),
        "model.input_shape",
        "must be three positive integers [C, H, W]",
    )

    d = cfg["data"]
    _require(d["source"] in ("spirals", "cifar10", "mnist"), "data.source", "must be spirals, cifar10 or mnist")
    if d["source"] == "spirals":
        sp = d["spirals"]
        _require(isinstance(sp["n_per_class"], int) and sp["n_per_class"] >= 1, "data.spirals.n_per_class", "must be a positive integer")
        _require(isinstance(sp["classes"], int) and sp["classes"] >= 2, "data.spirals.classes", "must be an integer >= 2")
        _require(sp["noise_sd"] >= 0, "data.spirals.noise_sd", "must be >= 0")
        _require(isinstance(sp["val_per_class"], int) and sp["val_per_class"] >= 1, "data.spirals.val_per_class", "must be a positive integer")
        _require(sp["classes"] == m["num_classes"], "data.spirals.classes", f"must equal model.num_classes ({m['num_classes']})")
    elif d["source"] == "cifar10":
        for k in ("train", "test"):
            _require(d["cifar10"][k], f"data.cifar10.{k}", "path is required for the cifar10 source")
    else:
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(d["mnist"][k], f"data.mnist.{k}", "path is required for the mnist source")
    if d["limit"] is not None:
        _require(isinstance(d["limit"], int) and d["limit"] >= 1, "data.limit", "must be a positive integer or null")
    if d["augment"] is not None:
        try:
            _augment_policy(d["augment"], cfg["seed"])
        except (ConfigurationError, TypeError) as e:
            raise ConfigurationError(f"data.augment: {e}") from None

    t = cfg["train"]
    _require(t["optimizer"] in OPTIMIZERS, "train.optimizer", f"must be one of {OPTIMIZERS}")
    _require(isinstance(t["lr"], (int, float)) and t["lr"] > 0, "train.lr", "must be a positive number")
    _require(isinstance(t["epochs"], int) and t["epochs"] >= 0, "train.epochs", "must be an integer >= 0")
    _require(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "train.batch_size", "must be an integer >= 1")
    _require(t["scheduler"] in SCHEDULERS, "train.scheduler", f"must be one of {SCHEDULERS}")
    _require(len(t["betas"]) == 2 and all(0 <= b < 1 for b in t["betas"]), "train.betas", "must be two numbers in [0, 1)")
    _require(t["weight_decay"] >= 0, "train.weight_decay", "must be >= 0")

    kd = cfg["kd"]
    _require(kd["temperature"] > 0, "kd.temperature", "must be positive")
    _require(0.0 <= kd["mix"] <= 1.0, "kd.mix", "must be in [0, 1]")
    _require(kd["teacher_lr"] > 0, "kd.teacher_lr", "must be positive")
    _require(kd["student_lr"] > 0, "kd.student_lr", "must be positive")
    for side in ("teacher_optimizer", "student_optimizer"):
        _require(kd[side] is None or kd[side] in OPTIMIZERS, f"kd.{side}", f"must be null or one of {OPTIMIZERS}")

    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a nonnegative integer")
    _require(isinstance(cfg["run_id"], str) and cfg["run_id"], "run_id", "must be a nonempty string")


def _augment_policy(doc: dict, seed: int) -> AugmentPolicy:
    kwargs = {"seed": seed}
    for k in ("hflip_prob",):
        if k in doc:
            kwargs[k] = float(doc[k])
    for k in ("brightness", "contrast", "saturation"):
        if k in doc:
            kwargs[k] = tuple(doc[k])
    extra = set(doc) - {"hflip_prob", "brightness", "contrast", "saturation"}
    if extra:
        raise ConfigurationError(f"unknown augment fields {sorted(extra)}")
    return AugmentPolicy(**kwargs)


def augment_policy_from(cfg: dict) -> AugmentPolicy | None:
    doc = cfg["data"]["augment"]
    if doc is None:
        return None
    return _augment_policy(doc, cfg["seed"])


def train_settings_from(cfg: dict, run_id: str | None = None, lr: float | None = None) -> TrainSettings:
    t = cfg["train"]
    layerwise = t["layerwise"]
    if isinstance(layerwise, list):
        layerwise = (layerwise[0], layerwise[1] if not isinstance(layerwise[1], dict) else dict(layerwise[1]))
    return TrainSettings(
        optimizer=t["optimizer"],
        lr=lr if lr is not None else float(t["lr"]),
        momentum=float(t["momentum"]),
        betas=tuple(t["betas"]),
        eps=float(t["eps"]),
        weight_decay=float(t["weight_decay"]),
        momo_lower_bound=float(t["momo_lower_bound"]),
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        seed=cfg["seed"],
        scheduler=t["scheduler"],
        scheduler_args=dict(t["scheduler_args"]),
        layerwise=layerwise,
        augment_policy=augment_policy_from(cfg),
        normalize=bool(cfg["data"]["normalize"]),
        run_id=run_id or cfg["run_id"],
    )


def resolve_data_path(path: str) -> str:
    """Relative dataset paths resolve against $POLYKERV_DATA_DIR if set."""
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and base:
        return str(Path(base) / p)
    return str(p)
