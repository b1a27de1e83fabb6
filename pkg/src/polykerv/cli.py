"""Experiment CLI.

Subcommands: probe | train | finetune | distill | gradcheck | sweep.
Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 verification failure.
"""

import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, train_settings_from
from .diagnostics import run_probe
from .distill import KDConfig, train_distilled
from .errors import PolykervError
from .gradcheck import gradcheck_network
from .netspec import surgery
from .network import Network, init_parameters, transplant
from .runs import (
    build_specs,
    load_datasets,
    run_dir,
    summary_table,
    write_effective_config,
    write_metrics,
    write_summary,
)
from .train import train_model
from .zoo import PRESETS, build

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


@click.group()
def main():
    """Polynomial kernel network experiments."""


def _fail_config(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load(config, set_):
    try:
        return load_config(config, set_)
    except PolykervError as e:
        _fail_config(str(e))


# -- probe ---------------------------------------------------------------------


@main.command()
@click.option("--presets", default="cnn3,lenet,resnet10,resnet18,resnet32,resnet50", show_default=True)
@click.option("--degrees", default="2,3,4", show_default=True)
@click.option("--shift", default=0.0, show_default=True, help="kernel shift used by the converted twin")
@click.option("--seeds", default="0", show_default=True, help="comma list or N for range(N)")
@click.option("--width-multiplier", default=1.0, show_default=True)
@click.option("--num-classes", default=10, show_default=True)
@click.option("--input-shape", default="3,32,32", show_default=True)
@click.option("--out", default="runs/probe", show_default=True, type=click.Path(), help="directory for probe_report.jsonl")
def probe(presets, degrees, shift, seeds, width_multiplier, num_classes, input_shape, out):
    """Frozen-twin output comparison across presets and kernel degrees."""
    preset_list = [p.strip() for p in presets.split(",") if p.strip()]
    unknown = [p for p in preset_list if p not in PRESETS]
    if unknown:
        _fail_config(f"unknown presets {unknown}, available: {sorted(PRESETS)}")
    try:
        degree_list = [int(d) for d in degrees.split(",")]
        shape = tuple(int(d) for d in input_shape.split(","))
        seed_list = [int(s) for s in seeds.split(",")]
    except ValueError as e:
        _fail_config(f"bad numeric option: {e}")
    reports = []
    cells = {}
    for preset in preset_list:
        for degree in degree_list:
            per_seed = []
            for seed in seed_list:
                try:
                    r = run_probe(
                        preset,
                        degree=degree,
                        shift=shift,
                        seed=seed,
                        width_multiplier=width_multiplier,
                        num_classes=num_classes,
                        input_shape=shape,
                    )
                except PolykervError as e:
                    _fail_config(str(e))
                reports.append(r)
                per_seed.append(r)
            finite = [r.mse for r in per_seed if not r.nonfinite]
            if len(finite) == len(per_seed):
                cells[(preset, degree)] = f"{np.mean(finite):.4g}"
            elif not finite:
                cells[(preset, degree)] = "NaN"
            else:
                cells[(preset, degree)] = f"NaN({len(per_seed) - len(finite)}/{len(per_seed)})"
    header = "preset".ljust(10) + "".join(f"d={d}".rjust(14) for d in degree_list)
    click.echo(header)
    for preset in preset_list:
        click.echo(preset.ljust(10) + "".join(cells[(preset, d)].rjust(14) for d in degree_list))
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "probe_report.jsonl", "w") as f:
            for r in reports:
                f.write(r.to_json() + "\n")
        click.echo(f"wrote {out_dir / 'probe_report.jsonl'}")


# -- train / finetune ------------------------------------------------------------


def _run_training(cfg: dict, initial_params=None):
    out = run_dir(cfg)
    write_effective_config(cfg, out)
    try:
        _, spec = build_specs(cfg)
        params = initial_params if initial_params is not None else init_parameters(spec, cfg["seed"])
        net = Network(spec, params)
        train_ds, val_ds = load_datasets(cfg)
        settings = train_settings_from(cfg)
    except (PolykervError, OSError) as e:
        _fail_config(str(e))
    t0 = time.perf_counter()
    result = train_model(net, train_ds, val_ds, settings)
    wall = time.perf_counter() - t0
    write_metrics(result.records, out / "metrics.jsonl")
    if result.best_state is not None:
        save_checkpoint(
            out / "checkpoint.npz",
            spec,
            result.best_state,
            meta={"run_id": cfg["run_id"], "best_epoch": result.best_epoch, "preset": cfg["model"]["preset"], "mode": cfg["model"]["mode"]},
        )
    write_summary(
        {
            "run_id": cfg["run_id"],
            "epochs": len(result.records),
            "best_val_acc": result.best_val_acc,
            "best_epoch": result.best_epoch,
            "diverged": result.diverged,
            "diverged_step": result.diverged_step,
            "diverged_location": result.diverged_location,
            "wall_seconds": wall,
        },
        out / "summary.json",
    )
    click.echo(summary_table(result.records, f"run {cfg['run_id']}"))
    if result.diverged:
        click.echo(
            f"diverged at step {result.diverged_step} ({result.diverged_location}); metrics in {out}", err=True
        )
        sys.exit(EXIT_DIVERGED)
    click.echo(f"best val acc {100 * result.best_val_acc:.2f}% at epoch {result.best_epoch}; artifacts in {out}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--set", "set_", multiple=True, help="override config fields: path.to.field=value")
def train(config_path, set_):
    """Train one model from scratch per the config."""
    cfg = _load(config_path, set_)
    _run_training(cfg)


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--set", "set_", multiple=True)
def finetune(config_path, set_, checkpoint_path):
    """Resume from a checkpoint: matching weights transplant, polynomial
    parameters start fresh."""
    cfg = _load(config_path, set_)
    try:
        _, src_params, _, _ = load_checkpoint(checkpoint_path)
        _, spec = build_specs(cfg)
        params = transplant(src_params, spec, cfg["seed"])
    except (PolykervError, OSError) as e:
        _fail_config(str(e))
    _run_training(cfg, initial_params=params)


# -- distill ---------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--set", "set_", multiple=True)
def distill(config_path, set_):
    """Concurrent teacher-student training; the student is the configured
    surgery mode of the teacher preset."""
    cfg = _load(config_path, set_)
    if cfg["model"]["mode"] == "vanilla":
        _fail_config("model.mode must be a surgery mode (pkn/rpkn/react) for distill")
    out = run_dir(cfg)
    write_effective_config(cfg, out)
    try:
        vanilla_spec, student_spec = build_specs(cfg)
        teacher = Network(vanilla_spec, init_parameters(vanilla_spec, cfg["seed"]))
        student = Network(student_spec, init_parameters(student_spec, cfg["seed"] + 1))
        train_ds, val_ds = load_datasets(cfg)
        kd = KDConfig(
            teacher_lr=float(cfg["kd"]["teacher_lr"]),
            student_lr=float(cfg["kd"]["student_lr"]),
            temperature=float(cfg["kd"]["temperature"]),
            mix=float(cfg["kd"]["mix"]),
            optimizer=cfg["train"]["optimizer"],
            teacher_optimizer=cfg["kd"]["teacher_optimizer"],
            student_optimizer=cfg["kd"]["student_optimizer"],
            teacher_plateau=dict(cfg["train"]["scheduler_args"]) if cfg["train"]["scheduler"] == "plateau" else None,
        )
        from .config import augment_policy_from

        policy = augment_policy_from(cfg)
    except PolykervError as e:
        _fail_config(str(e))
    result = train_distilled(
        teacher,
        student,
        train_ds,
        val_ds,
        kd,
        epochs=cfg["train"]["epochs"],
        batch_size=cfg["train"]["batch_size"],
        seed=cfg["seed"],
        augment_policy=policy,
        do_normalize=bool(cfg["data"]["normalize"]),
        run_id=cfg["run_id"],
    )
    write_metrics(result.teacher_records, out / "metrics_teacher.jsonl")
    write_metrics(result.student_records, out / "metrics_student.jsonl")
    if result.best_teacher_state is not None:
        save_checkpoint(out / "checkpoint_teacher.npz", vanilla_spec, result.best_teacher_state, meta={"role": "teacher"})
        save_checkpoint(out / "checkpoint_student.npz", student_spec, result.best_student_state, meta={"role": "student"})
    write_summary(
        {
            "run_id": cfg["run_id"],
            "best_student_val_acc": result.best_student_val_acc,
            "best_epoch": result.best_epoch,
            "diverged": result.diverged,
            "diverged_step": result.diverged_step,
            "diverged_location": result.diverged_location,
        },
        out / "summary.json",
    )
    click.echo(summary_table(result.teacher_records, "teacher"))
    click.echo(summary_table(result.student_records, "student"))
    if result.diverged:
        click.echo(f"diverged at step {result.diverged_step} ({result.diverged_location})", err=True)
        sys.exit(EXIT_DIVERGED)
    click.echo(f"best student val acc {100 * result.best_student_val_acc:.2f}% at epoch {result.best_epoch}")


# -- gradcheck ---------------------------------------------------------------------


GRADCHECK_MODES = ("vanilla", "pkn2", "pkn3", "rpkn", "react")


def gradcheck_spec(base, mode):
    if mode == "vanilla":
        return base
    if mode == "pkn2":
        return surgery(base, "pkn", degree=2, shift=0.5)
    if mode == "pkn3":
        return surgery(base, "pkn", degree=3, shift=0.5)
    if mode == "rpkn":
        return surgery(base, "rpkn", degree=2, shift=0.5, gain=0.5)
    return surgery(base, "react")


def gradcheck_one(preset: str, mode: str, tolerance: float = 1e-4, samples: int = 4, h: float = 1e-5, seed: int = 1):
    """Check one preset/mode pair on a tiny float64 instance.

    Kernel modes are verified at damped weights: the check point is arbitrary
    for correctness, and a deep polynomial stack at training init overflows
    before the comparison means anything.
    """
    with ag.precision("float64"):
        base = build(preset, width_multiplier=0.25, num_classes=3, input_shape=(3, 16, 16))
        spec = gradcheck_spec(base, mode)
        net = Network(spec, init_parameters(spec, seed=seed))
        if mode in ("pkn2", "pkn3", "rpkn"):
            # deep polynomial stacks overflow at training init; verify at a
            # contractive point (degree 3 amplifies tails hardest)
            damp = 0.12 if mode == "pkn3" else 0.4
            for name, p in net.param_items():
                if name.endswith(".weight"):
                    p.data = p.data * damp
        rng = np.random.default_rng(seed + 100)
        x = rng.standard_normal((2, 3, 16, 16))
        labels = rng.integers(0, 3, size=2)
        return gradcheck_network(net, x, labels, h=h, tolerance=tolerance, samples_per_param=samples)


@main.command()
@click.option("--presets", default="cnn3,lenet,resnet10", show_default=True)
@click.option("--modes", default=",".join(GRADCHECK_MODES), show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
@click.option("--samples", default=4, show_default=True, help="entries checked per parameter")
@click.option("--step", default=1e-5, show_default=True, help="central-difference step")
def gradcheck(presets, modes, tolerance, samples, step):
    """Finite-difference check of every parameter group on tiny instances,
    run at float64."""
    preset_list = [p.strip() for p in presets.split(",") if p.strip()]
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    bad_modes = [m for m in mode_list if m not in GRADCHECK_MODES]
    if bad_modes:
        _fail_config(f"unknown gradcheck modes {bad_modes}, available: {GRADCHECK_MODES}")
    unknown = [p for p in preset_list if p not in PRESETS]
    if unknown:
        _fail_config(f"unknown presets {unknown}, available: {sorted(PRESETS)}")
    failures = []
    for preset in preset_list:
        for mode in mode_list:
            report = gradcheck_one(preset, mode, tolerance=tolerance, samples=samples, h=step)
            status = "ok" if report.passed else "FAIL"
            click.echo(
                f"{preset:<10} {mode:<8} worst rel err {report.worst_rel_err:.3e} ({report.worst_param}) {status}"
            )
            if not report.passed:
                failures.append((preset, mode, report.worst_param, report.worst_rel_err))
    if failures:
        for preset, mode, param, err in failures:
            click.echo(f"verification failure: {preset}/{mode} parameter {param} rel err {err:.3e}", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo("all gradient checks passed")


# -- sweep -----------------------------------------------------------------------


@main.command()
@click.argument("configs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--jobs", default=1, show_default=True, help="parallel child processes")
def sweep(configs, jobs):
    """Run several training configs as independent child processes."""
    if jobs < 1:
        _fail_config("--jobs must be >= 1")
    pending = list(configs)
    running: list[tuple[str, subprocess.Popen]] = []
    exit_codes = {}
    while pending or running:
        while pending and len(running) < jobs:
            path = pending.pop(0)
            proc = subprocess.Popen([sys.executable, "-m", "polykerv.cli", "train", "--config", path])
            running.append((path, proc))
        path, proc = running.pop(0)
        exit_codes[path] = proc.wait()
    worst = 0
    for path, code in exit_codes.items():
        click.echo(f"{path}: exit {code}")
        worst = max(worst, code)
    sys.exit(worst)


if __name__ == "__main__":
    main()
