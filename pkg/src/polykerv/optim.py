"""Optimizers and learning-rate schedules.

SGD with momentum and bias-corrected Adam are the standard algorithms. The
adaptive-step optimizer (MoMoAdam) keeps exponential averages of batch
losses, gradients and gradient-parameter inner products, builds a linear
model of the loss from them, and moves by the step size that minimizes that
model under the Adam preconditioner, capped at the configured learning rate:

    num   = f_avg + <d, p> - gamma_avg - lower_bound
    tau   = min(lr_cap, max(0, num) / sum(d^2 / D))
    p    -= tau * d / D        with D = sqrt(v_hat) + eps

All moment estimates are bias-corrected the same way Adam's are. tau is
always in [0, lr_cap] by construction and is reported per step so training
logs can expose it.
"""

import numpy as np

from .errors import ConfigurationError, ShapeError


def _check_lr_map(params: dict, lr: float, lr_map: dict | None):
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if lr_map:
        unknown = sorted(set(lr_map) - set(params))
        if unknown:
            raise ConfigurationError(f"lr map names unknown parameters: {unknown}")
        bad = {k: v for k, v in lr_map.items() if v <= 0}
        if bad:
            raise ConfigurationError(f"lr map has nonpositive rates: {bad}")


class SGD:
    """v <- momentum*v + g;  p <- p - lr*v."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0, lr_map: dict | None = None):
        _check_lr_map(params, lr, lr_map)
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_map = dict(lr_map) if lr_map else {}
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def _lr_for(self, name):
        return self.lr_map.get(name, self.lr)

    def step(self) -> None:
        self.step_count += 1
        with np.errstate(over="ignore", invalid="ignore"):
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                g = p.grad
                if g.shape != p.data.shape:
                    raise ShapeError(f"{name}: grad shape {g.shape} vs param {p.data.shape}")
                if self.weight_decay:
                    g = g + self.weight_decay * p.data
                v = self.velocity[name]
                v *= self.momentum
                v += g
                p.data = p.data - p.data.dtype.type(self._lr_for(name)) * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def scale_lr(self, ratio: float) -> None:
        self.lr *= ratio
        for k in self.lr_map:
            self.lr_map[k] *= ratio

    def state_arrays(self) -> dict:
        return {f"velocity/{k}": v.copy() for k, v in self.velocity.items()} | {
            "step_count": np.array([self.step_count])
        }


class Adam:
    """Bias-corrected Adam (defaults beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(
        self,
        params: dict,
        lr: float,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_map: dict | None = None,
    ):
        _check_lr_map(params, lr, lr_map)
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_map = dict(lr_map) if lr_map else {}
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step_count = 0

    def _lr_for(self, name):
        return self.lr_map.get(name, self.lr)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            self._apply(c1, c2)

    def _apply(self, c1, c2) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"{name}: grad shape {g.shape} vs param {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data = p.data - self._lr_for(name) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def scale_lr(self, ratio: float) -> None:
        self.lr *= ratio
        for k in self.lr_map:
            self.lr_map[k] *= ratio

    def state_arrays(self) -> dict:
        out = {"step_count": np.array([self.step_count])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out


class MoMoAdam:
    """Adam-preconditioned optimizer with a model-based step size cap.

    step() needs the batch loss whose gradients are currently stored on the
    parameters. Returns the step size tau actually taken.
    """

    def __init__(
        self,
        params: dict,
        lr_cap: float,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        lower_bound: float = 0.0,
    ):
        if lr_cap <= 0:
            raise ConfigurationError(f"lr cap must be positive, got {lr_cap}")
        self.params = params
        self.lr = lr_cap
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lower_bound = lower_bound
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.loss_avg = 0.0
        self.inner_avg = 0.0
        self.step_count = 0
        self.last_tau = 0.0

    def step(self, batch_loss: float) -> float:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return self._apply(c1, c2, batch_loss)

    def _apply(self, c1, c2, batch_loss: float) -> float:
        inner = 0.0
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"{name}: grad shape {g.shape} vs param {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            inner += float(np.vdot(g, p.data))
        self.loss_avg = self.beta1 * self.loss_avg + (1.0 - self.beta1) * float(batch_loss)
        self.inner_avg = self.beta1 * self.inner_avg + (1.0 - self.beta1) * inner

        f_avg = self.loss_avg / c1
        gamma_avg = self.inner_avg / c1

        num = f_avg - gamma_avg - self.lower_bound
        denom = 0.0
        precond = {}
        for name, p in self.params.items():
            d = self.m[name] / c1
            D = np.sqrt(self.v[name] / c2) + self.eps
            precond[name] = d / D
            num += float(np.vdot(d, p.data))
            denom += float(np.vdot(d, precond[name]))

        if denom <= 0.0:
            tau = self.lr if num > 0 else 0.0
        else:
            tau = min(self.lr, max(0.0, num) / denom)
        self.last_tau = tau
        for name, p in self.params.items():
            p.data = p.data - p.data.dtype.type(tau) * precond[name]
        return tau

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def scale_lr(self, ratio: float) -> None:
        self.lr *= ratio

    def state_arrays(self) -> dict:
        out = {
            "step_count": np.array([self.step_count]),
            "loss_avg": np.array([self.loss_avg]),
            "inner_avg": np.array([self.inner_avg]),
        }
        for k in self.params:
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out


class ReduceLROnPlateau:
    """Cut the lr by `factor` once the metric stalls for more than `patience`
    epochs. The lr sequence is non-increasing and floored at min_lr."""

    def __init__(
        self,
        optimizer,
        mode: str = "max",
        factor: float = 0.1,
        patience: int = 10,
        min_lr: float = 1e-7,
    ):
        if mode not in ("max", "min"):
            raise ConfigurationError(f"plateau mode must be 'max' or 'min', got {mode!r}")
        if not (0.0 < factor < 1.0):
            raise ConfigurationError(f"plateau factor must be in (0, 1), got {factor}")
        if patience < 0:
            raise ConfigurationError(f"patience must be >= 0, got {patience}")
        self.optimizer = optimizer
        self.mode = mode
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = -np.inf if mode == "max" else np.inf
        self.stale = 0

    def step(self, metric: float) -> float:
        improved = metric > self.best if self.mode == "max" else metric < self.best
        if improved:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                old = self.optimizer.lr
                new = max(self.min_lr, old * self.factor)
                if new < old:
                    self.optimizer.scale_lr(new / old)
                self.stale = 0
        return self.optimizer.lr


class StepLR:
    """Multiply the lr by gamma every `step_size` epochs."""

    def __init__(self, optimizer, step_size: int, gamma: float = 0.1):
        if step_size < 1:
            raise ConfigurationError(f"step_size must be >= 1, got {step_size}")
        if not (0.0 < gamma <= 1.0):
            raise ConfigurationError(f"gamma must be in (0, 1], got {gamma}")
        self.optimizer = optimizer
        self.step_size = step_size
        self.gamma = gamma
        self.epoch = 0

    def step(self, metric: float | None = None) -> float:
        self.epoch += 1
        if self.epoch % self.step_size == 0:
            self.optimizer.scale_lr(self.gamma)
        return self.optimizer.lr


def layerwise_lr(spec, base_lr: float, schedule) -> dict:
    """Assign a learning rate to every parameter.

    schedule is one of:
        "constant"
        ("linear_decay", ratio)   top-level parameter groups interpolate
                                  from base_lr down to ratio*base_lr
        ("per_group", {prefix: lr})
    """
    from .network import layer_parameter_names, parameter_names

    if base_lr <= 0:
        raise ConfigurationError(f"base lr must be positive, got {base_lr}")
    names = parameter_names(spec)
    if schedule == "constant":
        return {n: base_lr for n in names}
    kind = schedule[0]
    if kind == "linear_decay":
        ratio = float(schedule[1])
        if not (0.0 < ratio <= 1.0):
            raise ConfigurationError(f"linear_decay ratio must be in (0, 1], got {ratio}")
        groups = [l.name for l in spec.layers if layer_parameter_names(l)]
        out = {}
        g = len(groups)
        for i, gname in enumerate(groups):
            frac = 0.0 if g == 1 else i / (g - 1)
            lr = base_lr * (1.0 - (1.0 - ratio) * frac)
            for n in names:
                if n == gname or n.startswith(gname + "."):
                    out[n] = lr
        for n in names:
            out.setdefault(n, base_lr)
        return out
    if kind == "per_group":
        overrides = dict(schedule[1])
        for prefix, lr in overrides.items():
            if lr <= 0:
                raise ConfigurationError(f"per_group lr for {prefix!r} must be positive, got {lr}")
        out = {}
        for n in names:
            out[n] = base_lr
            for prefix, lr in overrides.items():
                if n == prefix or n.startswith(prefix + "."):
                    out[n] = lr
        return out
    raise ConfigurationError(f"unknown layerwise schedule {schedule!r}")
