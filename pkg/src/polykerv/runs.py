"""Assemble models and datasets from a validated config and persist run
artifacts (effective config, metrics lines, summary, checkpoints)."""

import json
from pathlib import Path

import numpy as np

from .config import resolve_data_path
from .data import Dataset, read_cifar10_binary, read_mnist_idx, synthetic_spirals
from .errors import ConfigurationError
from .netspec import surgery
from .network import Network, init_parameters
from .zoo import build

VAL_SEED_OFFSET = 9_999_991  # spiral validation split draws from a shifted stream


def build_specs(cfg: dict):
    """(vanilla spec, converted spec or the same object for vanilla mode)."""
    m = cfg["model"]
    vanilla = build(m["preset"], m["width_multiplier"], m["num_classes"], tuple(m["input_shape"]))
    if m["mode"] == "vanilla":
        return vanilla, vanilla
    return vanilla, surgery(vanilla, m["mode"], **m["mode_args"])


def build_network(cfg: dict) -> Network:
    _, spec = build_specs(cfg)
    return Network(spec, init_parameters(spec, cfg["seed"]))


def load_datasets(cfg: dict):
    d = cfg["data"]
    if d["source"] == "spirals":
        sp = d["spirals"]
        train = synthetic_spirals(sp["n_per_class"], sp["classes"], sp["noise_sd"], seed=cfg["seed"], split="train")
        val = synthetic_spirals(
            sp["val_per_class"], sp["classes"], sp["noise_sd"], seed=cfg["seed"] + VAL_SEED_OFFSET, split="test"
        )
    elif d["source"] == "cifar10":
        train = read_cifar10_binary(resolve_data_path(d["cifar10"]["train"]), split="train")
        val = read_cifar10_binary(resolve_data_path(d["cifar10"]["test"]), split="test")
    else:
        train = read_mnist_idx(
            resolve_data_path(d["mnist"]["train_images"]), resolve_data_path(d["mnist"]["train_labels"]), split="train"
        )
        val = read_mnist_idx(
            resolve_data_path(d["mnist"]["test_images"]), resolve_data_path(d["mnist"]["test_labels"]), split="test"
        )
    if d["limit"] is not None:
        train = Dataset(train.images[: d["limit"]], train.labels[: d["limit"]], train.split, train.num_classes)
    expected = tuple(cfg["model"]["input_shape"])
    if train.images.shape[1:] != expected:
        raise ConfigurationError(
            f"model.input_shape {expected} does not match dataset images {train.images.shape[1:]}"
        )
    if train.num_classes != cfg["model"]["num_classes"]:
        raise ConfigurationError(
            f"model.num_classes {cfg['model']['num_classes']} does not match dataset ({train.num_classes})"
        )
    return train, val


def run_dir(cfg: dict) -> Path:
    d = Path(cfg["out_dir"]) / cfg["run_id"]
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_effective_config(cfg: dict, out: Path) -> None:
    (out / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def write_metrics(records, path: Path) -> None:
    with open(path, "w") as f:
        f.write("# metrics v1\n")
        for r in records:
            f.write(r.to_json_line() + "\n")


def write_summary(doc: dict, path: Path) -> None:
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v

    path.write_text(json.dumps({k: clean(v) for k, v in doc.items()}, indent=2, sort_keys=True) + "\n")


def summary_table(records, title: str) -> str:
    """Small fixed-width table of the run: epoch, loss, accuracies, lr."""
    lines = [title, f"{'epoch':>5}  {'train_loss':>10}  {'train_acc':>9}  {'val_acc':>7}  {'lr':>9}  {'nan':>3}"]
    for r in records:
        loss = f"{r.train_loss:.4f}" if np.isfinite(r.train_loss) else "nan"
        tacc = f"{100 * r.train_acc:.2f}" if np.isfinite(r.train_acc) else "-"
        vacc = f"{100 * r.val_acc:.2f}" if np.isfinite(r.val_acc) else "-"
        lines.append(f"{r.epoch:>5}  {loss:>10}  {tacc:>9}  {vacc:>7}  {min(r.lrs):>9.2e}  {'yes' if r.nan_flag else 'no':>3}")
    return "\n".join(lines)
