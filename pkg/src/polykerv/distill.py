"""Concurrent teacher-student distillation.

Both networks train in the same loop. Each step updates the teacher on the
hard labels first, re-runs the updated teacher to get soft labels (gradients
blocked), and then updates the student against those soft labels with a KL
loss, optionally mixed with hard-label cross-entropy:

    student loss = mix * T^2 * KL(student/T || teacher_soft) + (1-mix) * CE

With mix=1 the hard labels are never read on the student side.
"""

import time
from dataclasses import dataclass

import numpy as np

from .autograd import add, cross_entropy, kl_divergence, mul, no_grad, softmax
from .data import Dataset, augment, batches, channel_stats, normalize
from .diagnostics import nan_sentinel
from .errors import ConfigurationError, DivergenceError
from .network import Network
from .optim import MoMoAdam, ReduceLROnPlateau
from .train import MetricsRecord, TrainSettings, evaluate, make_optimizer, _lrs_in_effect


@dataclass
class KDConfig:
    teacher_lr: float = 3e-4
    student_lr: float = 3e-5
    temperature: float = 1.0
    mix: float = 1.0  # weight on the KL term; the rest goes to hard-label CE
    optimizer: str = "adam"
    # per-side overrides; deep teachers are often only trainable with the
    # adaptive step-size optimizer while the student stays on plain Adam
    teacher_optimizer: str | None = None
    student_optimizer: str | None = None
    # optional ReduceLROnPlateau on the teacher's validation accuracy, the
    # stable recipe for deep teachers; the student lr stays fixed
    teacher_plateau: dict | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if not (0.0 <= self.mix <= 1.0):
            raise ConfigurationError(f"mix must be in [0, 1], got {self.mix}")
        if self.teacher_lr <= 0 or self.student_lr <= 0:
            raise ConfigurationError("teacher_lr and student_lr must be positive")
        if self.teacher_optimizer is None:
            self.teacher_optimizer = self.optimizer
        if self.student_optimizer is None:
            self.student_optimizer = self.optimizer


def soft_labels(teacher: Network, x, temperature: float) -> np.ndarray:
    """Softened class distribution from the teacher, no gradient path."""
    with no_grad():
        logits = teacher.forward(x)
        scaled = mul(logits, 1.0 / temperature)
        return softmax(scaled).data


def kd_step(
    teacher: Network,
    student: Network,
    images,
    labels,
    cfg: KDConfig,
    teacher_opt,
    student_opt,
    step: int = 0,
):
    """One concurrent update; returns (teacher_loss, student_loss).

    Raises DivergenceError when either loss or any gradient goes non-finite.
    """
    t_logits = teacher.forward(images)
    t_out = t_logits.data.shape[-1]
    t_loss = cross_entropy(t_logits, labels)
    t_value = t_loss.item()
    loc = nan_sentinel(t_value, [])
    if loc is None:
        t_loss.backward()
        loc = nan_sentinel(t_value, [(f"teacher.{n}", p.grad) for n, p in teacher.param_items()])
    if loc is not None:
        teacher.zero_grad()
        raise DivergenceError(step, loc)
    if isinstance(teacher_opt, MoMoAdam):
        teacher_opt.step(t_value)
    else:
        teacher_opt.step()
    teacher.zero_grad()

    soft = soft_labels(teacher, images, cfg.temperature)

    s_logits = student.forward(images)
    if s_logits.data.shape[-1] != t_out:
        raise ConfigurationError(
            f"teacher outputs {t_out} classes but student outputs {s_logits.data.shape[-1]}"
        )
    if cfg.mix == 0.0:
        s_loss = cross_entropy(s_logits, labels)
    else:
        kl = kl_divergence(mul(s_logits, 1.0 / cfg.temperature), soft)
        kl = mul(kl, cfg.mix * cfg.temperature**2)
        if cfg.mix == 1.0:
            s_loss = kl
        else:
            s_loss = add(kl, mul(cross_entropy(s_logits, labels), 1.0 - cfg.mix))
    s_value = s_loss.item()
    loc = nan_sentinel(s_value, [])
    if loc is None:
        s_loss.backward()
        loc = nan_sentinel(s_value, [(f"student.{n}", p.grad) for n, p in student.param_items()])
    if loc is not None:
        student.zero_grad()
        raise DivergenceError(step, loc)
    if isinstance(student_opt, MoMoAdam):
        student_opt.step(s_value)
    else:
        student_opt.step()
    student.zero_grad()
    return t_value, s_value


@dataclass
class KDResult:
    teacher_records: list
    student_records: list
    best_student_val_acc: float
    best_epoch: int
    best_teacher_state: dict | None
    best_student_state: dict | None
    diverged: bool = False
    diverged_step: int | None = None
    diverged_location: str | None = None


def train_distilled(
    teacher: Network,
    student: Network,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: KDConfig,
    epochs: int,
    batch_size: int = 128,
    seed: int = 0,
    augment_policy=None,
    do_normalize: bool = True,
    run_id: str = "kd",
) -> KDResult:
    """Concurrent training; both networks see identical batch tensors (one
    augmentation draw per batch, shared)."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ConfigurationError(
            f"teacher has {teacher.spec.num_classes} classes, student {student.spec.num_classes}"
        )
    teacher_opt = make_optimizer(
        teacher.params,
        TrainSettings(optimizer=cfg.teacher_optimizer, lr=cfg.teacher_lr, seed=seed, batch_size=batch_size, epochs=epochs),
        teacher.spec,
    )
    student_opt = make_optimizer(
        student.params,
        TrainSettings(optimizer=cfg.student_optimizer, lr=cfg.student_lr, seed=seed, batch_size=batch_size, epochs=epochs),
        student.spec,
    )
    stats = channel_stats(train_ds.images) if do_normalize else None
    scheduler = None
    if cfg.teacher_plateau is not None:
        args = dict(cfg.teacher_plateau)
        scheduler = ReduceLROnPlateau(
            teacher_opt,
            mode=args.get("mode", "max"),
            factor=float(args.get("factor", 0.1)),
            patience=int(args.get("patience", 10)),
            min_lr=float(args.get("min_lr", 1e-7)),
        )
    t_records, s_records = [], []
    best_acc, best_epoch = -1.0, 0
    best_t, best_s = None, None
    global_step = 0

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1]))
        shuffle_seed = seed * 1_000_003 + epoch
        t_loss_sum, s_loss_sum, n_batches = 0.0, 0.0, 0
        try:
            for imgs, labels in batches(train_ds, batch_size, shuffle_seed=shuffle_seed):
                global_step += 1
                if augment_policy is not None:
                    imgs = augment(imgs, augment_policy, aug_rng)
                if stats is not None:
                    imgs = normalize(imgs, *stats)
                tl, sl = kd_step(teacher, student, imgs, labels, cfg, teacher_opt, student_opt, step=global_step)
                t_loss_sum += tl
                s_loss_sum += sl
                n_batches += 1
        except DivergenceError as e:
            for records, run in ((t_records, "teacher"), (s_records, "student")):
                records.append(
                    MetricsRecord(
                        run_id=f"{run_id}.{run}",
                        epoch=epoch,
                        train_loss=float("nan"),
                        train_acc=float("nan"),
                        val_acc=float("nan"),
                        lrs=_lrs_in_effect(teacher_opt if run == "teacher" else student_opt),
                        grad_norm_mean=float("nan"),
                        nan_flag=True,
                        wall_seconds=time.perf_counter() - t0,
                    )
                )
            return KDResult(
                teacher_records=t_records,
                student_records=s_records,
                best_student_val_acc=best_acc if best_acc >= 0 else float("nan"),
                best_epoch=best_epoch,
                best_teacher_state=best_t,
                best_student_state=best_s,
                diverged=True,
                diverged_step=e.step,
                diverged_location=e.location,
            )
        wall = time.perf_counter() - t0
        t_val = evaluate(teacher, val_ds, batch_size, stats)
        s_val = evaluate(student, val_ds, batch_size, stats)
        t_records.append(
            MetricsRecord(
                run_id=f"{run_id}.teacher",
                epoch=epoch,
                train_loss=t_loss_sum / max(1, n_batches),
                train_acc=float("nan"),
                val_acc=t_val,
                lrs=_lrs_in_effect(teacher_opt),
                grad_norm_mean=float("nan"),
                nan_flag=False,
                wall_seconds=wall,
            )
        )
        s_records.append(
            MetricsRecord(
                run_id=f"{run_id}.student",
                epoch=epoch,
                train_loss=s_loss_sum / max(1, n_batches),
                train_acc=float("nan"),
                val_acc=s_val,
                lrs=_lrs_in_effect(student_opt),
                grad_norm_mean=float("nan"),
                nan_flag=False,
                wall_seconds=wall,
            )
        )
        if s_val > best_acc:
            best_acc, best_epoch = s_val, epoch
            best_t, best_s = teacher.state_arrays(), student.state_arrays()
        if scheduler is not None:
            scheduler.step(t_val)

    return KDResult(
        teacher_records=t_records,
        student_records=s_records,
        best_student_val_acc=best_acc if best_acc >= 0 else float("nan"),
        best_epoch=best_epoch,
        best_teacher_state=best_t,
        best_student_state=best_s,
    )
