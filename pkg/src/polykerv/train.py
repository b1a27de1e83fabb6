"""Single-model training loop with divergence sentinels and per-epoch metrics.

Every source of randomness is derived from (seed, epoch), so a run replayed
with the same settings produces identical parameter trajectories and metrics.
Wall-clock time is kept on the record for display but left out of the
serialized metrics line, which must be byte-identical under replay.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import cross_entropy, no_grad
from .data import AugmentPolicy, Dataset, augment, batches, channel_stats, normalize
from .diagnostics import nan_sentinel
from .errors import ConfigurationError
from .netspec import NetworkSpec
from .network import Network
from .optim import SGD, Adam, MoMoAdam, ReduceLROnPlateau, StepLR, layerwise_lr

OPTIMIZERS = ("sgd", "adam", "momo_adam")
SCHEDULERS = ("none", "plateau", "step")


@dataclass
class TrainSettings:
    optimizer: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    momo_lower_bound: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    scheduler: str = "none"
    scheduler_args: dict = field(default_factory=dict)
    layerwise: object = None  # "constant" | ("linear_decay", r) | ("per_group", {...})
    augment_policy: AugmentPolicy | None = None
    normalize: bool = True
    run_id: str = "run"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigurationError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class MetricsRecord:
    run_id: str
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lrs: list
    grad_norm_mean: float
    nan_flag: bool
    tau_mean: float | None = None
    tau_min: float | None = None
    tau_max: float | None = None
    wall_seconds: float = 0.0

    def to_json_line(self) -> str:
        def clean(v):
            if v is None:
                return None
            v = float(v)
            return v if np.isfinite(v) else None

        doc = {
            "run_id": self.run_id,
            "epoch": self.epoch,
            "train_loss": clean(self.train_loss),
            "train_acc": clean(self.train_acc),
            "val_acc": clean(self.val_acc),
            "lrs": [float(x) for x in self.lrs],
            "grad_norm_mean": clean(self.grad_norm_mean),
            "nan_flag": self.nan_flag,
            "tau_mean": clean(self.tau_mean),
            "tau_min": clean(self.tau_min),
            "tau_max": clean(self.tau_max),
        }
        return json.dumps(doc, sort_keys=True)


@dataclass
class TrainResult:
    records: list
    best_val_acc: float
    best_epoch: int
    best_state: dict | None
    diverged: bool = False
    diverged_step: int | None = None
    diverged_location: str | None = None
    taus: list = field(default_factory=list)


def make_optimizer(params: dict, settings: TrainSettings, spec: NetworkSpec | None = None):
    lr_map = None
    if settings.layerwise is not None:
        if spec is None:
            raise ConfigurationError("layerwise lr needs the network spec")
        if settings.optimizer == "momo_adam":
            raise ConfigurationError("layerwise lr is not supported with momo_adam (single step size)")
        lr_map = layerwise_lr(spec, settings.lr, settings.layerwise)
    if settings.optimizer == "sgd":
        return SGD(params, settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay, lr_map=lr_map)
    if settings.optimizer == "adam":
        return Adam(
            params,
            settings.lr,
            betas=tuple(settings.betas),
            eps=settings.eps,
            weight_decay=settings.weight_decay,
            lr_map=lr_map,
        )
    return MoMoAdam(
        params,
        settings.lr,
        betas=tuple(settings.betas),
        eps=settings.eps,
        lower_bound=settings.momo_lower_bound,
    )


def make_scheduler(optimizer, settings: TrainSettings):
    if settings.scheduler == "none":
        return None
    if settings.scheduler == "plateau":
        args = dict(settings.scheduler_args)
        return ReduceLROnPlateau(
            optimizer,
            mode=args.get("mode", "max"),
            factor=float(args.get("factor", 0.1)),
            patience=int(args.get("patience", 10)),
            min_lr=float(args.get("min_lr", 1e-7)),
        )
    args = dict(settings.scheduler_args)
    return StepLR(optimizer, step_size=int(args.get("step_size", 80)), gamma=float(args.get("gamma", 0.1)))


def _lrs_in_effect(optimizer) -> list:
    lrs = {float(optimizer.lr)}
    lrs.update(float(v) for v in getattr(optimizer, "lr_map", {}).values())
    return sorted(lrs)


def evaluate(net: Network, dataset: Dataset, batch_size: int, stats=None) -> float:
    correct = 0
    with no_grad():
        for imgs, labels in batches(dataset, batch_size):
            if stats is not None:
                imgs = normalize(imgs, *stats)
            logits = net.forward(imgs)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / max(1, len(dataset))


def train_model(
    net: Network,
    train_ds: Dataset,
    val_ds: Dataset,
    settings: TrainSettings,
    optimizer=None,
    scheduler=None,
) -> TrainResult:
    stats = channel_stats(train_ds.images) if settings.normalize else None
    optimizer = optimizer or make_optimizer(net.params, settings, net.spec)
    scheduler = scheduler or make_scheduler(optimizer, settings)
    records: list[MetricsRecord] = []
    all_taus: list[float] = []
    best_acc, best_epoch, best_state = -1.0, 0, None
    global_step = 0

    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        lrs = _lrs_in_effect(optimizer)
        aug_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, epoch, 1]))
        shuffle_seed = settings.seed * 1_000_003 + epoch
        loss_sum, n_batches, correct, seen = 0.0, 0, 0, 0
        grad_norms: list[float] = []
        taus: list[float] = []
        diverged_at = None

        for imgs, labels in batches(train_ds, settings.batch_size, shuffle_seed=shuffle_seed):
            global_step += 1
            if settings.augment_policy is not None:
                imgs = augment(imgs, settings.augment_policy, aug_rng)
            if stats is not None:
                imgs = normalize(imgs, *stats)
            logits = net.forward(imgs)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
            loss = cross_entropy(logits, labels)
            loss_value = loss.item()
            location = nan_sentinel(loss_value, [])
            if location is None:
                loss.backward()
                location = nan_sentinel(loss_value, [(n, p.grad) for n, p in net.param_items()])
            if location is not None:
                diverged_at = (global_step, location)
                net.zero_grad()
                break
            loss_sum += loss_value
            n_batches += 1
            sq = 0.0
            for _, p in net.param_items():
                if p.grad is not None:
                    sq += float(np.vdot(p.grad.astype(np.float64), p.grad.astype(np.float64)))
            grad_norms.append(float(np.sqrt(sq)))
            if isinstance(optimizer, MoMoAdam):
                taus.append(optimizer.step(loss_value))
            else:
                optimizer.step()
            net.zero_grad()

        if diverged_at is not None:
            records.append(
                MetricsRecord(
                    run_id=settings.run_id,
                    epoch=epoch,
                    train_loss=float("nan"),
                    train_acc=correct / max(1, seen),
                    val_acc=float("nan"),
                    lrs=lrs,
                    grad_norm_mean=float(np.mean(grad_norms)) if grad_norms else float("nan"),
                    nan_flag=True,
                    tau_mean=float(np.mean(taus)) if taus else None,
                    tau_min=min(taus) if taus else None,
                    tau_max=max(taus) if taus else None,
                    wall_seconds=time.perf_counter() - t0,
                )
            )
            all_taus.extend(taus)
            return TrainResult(
                records=records,
                best_val_acc=best_acc if best_acc >= 0 else float("nan"),
                best_epoch=best_epoch,
                best_state=best_state,
                diverged=True,
                diverged_step=diverged_at[0],
                diverged_location=diverged_at[1],
                taus=all_taus,
            )

        val_acc = evaluate(net, val_ds, settings.batch_size, stats)
        records.append(
            MetricsRecord(
                run_id=settings.run_id,
                epoch=epoch,
                train_loss=loss_sum / max(1, n_batches),
                train_acc=correct / max(1, seen),
                val_acc=val_acc,
                lrs=lrs,
                grad_norm_mean=float(np.mean(grad_norms)) if grad_norms else 0.0,
                nan_flag=False,
                tau_mean=float(np.mean(taus)) if taus else None,
                tau_min=min(taus) if taus else None,
                tau_max=max(taus) if taus else None,
                wall_seconds=time.perf_counter() - t0,
            )
        )
        all_taus.extend(taus)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = net.state_arrays()
        if scheduler is not None:
            scheduler.step(val_acc)

    return TrainResult(
        records=records,
        best_val_acc=best_acc if best_acc >= 0 else float("nan"),
        best_epoch=best_epoch,
        best_state=best_state,
        taus=all_taus,
    )
