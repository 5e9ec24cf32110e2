"""Adam with L2 weight decay and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError


@dataclass
class OneCycleConfig:
    steps: int
    base_lr: float
    pct_start: float = 0.3
    div_factor: float = 10.0
    final_div: float = 100.0


def onecycle_lr(step: int, cfg: OneCycleConfig) -> float:
    """Linear warm-up to base_lr, then cosine decay to the final floor."""
    if not (0 <= step <= cfg.steps):
        raise ContractError(f"step {step} outside [0, {cfg.steps}]")
    warm = cfg.pct_start * cfg.steps
    lo = cfg.base_lr / cfg.div_factor
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return lo + (cfg.base_lr - lo) * frac
    floor = cfg.base_lr / (cfg.div_factor * cfg.final_div)
    frac = (step - warm) / (cfg.steps - warm)
    return floor + (cfg.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class Adam:
    params: dict[str, T.Tensor]
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
