"""Finite-difference verification of the backward pass.

Runs at whatever precision the tensors carry; callers wanting meaningful
tolerances should build the network under float64. For every parameter a
deterministic sample of entries is perturbed both ways (central differences,
h=1e-4) and compared against the analytic gradient with the relative error

    |analytic - fd| / max(1, |fd|)
"""

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, cross_entropy
from .network import Network


@dataclass
class GradCheckReport:
    worst_rel_err: float
    worst_param: str
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


def _loss_value(net: Network, x: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy(net.forward(x), labels).item()


def gradcheck_network(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    samples_per_param: int = 6,
    seed: int = 0,
) -> GradCheckReport:
    loss = cross_entropy(net.forward(Tensor(x)), labels)
    if not np.isfinite(loss.item()):
        # a non-finite forward makes every comparison vacuous; fail loudly
        return GradCheckReport(worst_rel_err=float("inf"), worst_param="loss(non-finite)", tolerance=tolerance)
    net.zero_grad()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in net.param_items()}
    net.zero_grad()

    rng = np.random.default_rng(seed)
    worst, worst_param = 0.0, ""
    per_param = {}
    for name, p in net.param_items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_param else np.sort(rng.choice(n, size=samples_per_param, replace=False))
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = _loss_value(net, x, labels)
            flat[i] = orig - h
            down = _loss_value(net, x, labels)
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - fd) / max(1.0, abs(fd))
            if not np.isfinite(rel):
                rel = float("inf")
            worst_here = max(worst_here, rel)
        per_param[name] = worst_here
        if worst_here > worst:
            worst, worst_param = worst_here, name
    return GradCheckReport(worst_rel_err=worst, worst_param=worst_param, tolerance=tolerance, per_param=per_param)
