"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .autodiff import ParamGroup
from .exceptions import NumericError, ParameterError


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_affinity: bool = False
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ParameterError("eps must be positive and weight_decay non-negative")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    step: int = 0
    m: Dict[tuple, np.ndarray] = field(default_factory=dict)
    v: Dict[tuple, np.ndarray] = field(default_factory=dict)
    count: Dict[tuple, int] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam; weight decay is applied to the parameters directly.

    Frozen groups are skipped entirely, as are tensors without a gradient
    (they were not reached by the loss). Groups named ``affinity`` are not
    decayed unless ``decay_affinity`` is set.
    """

    def __init__(self, groups: Sequence[ParamGroup], cfg: OptimConfig):
        self.groups = list(groups)
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        cfg = self.cfg
        active: List[ParamGroup] = [g for g in self.groups if not g.frozen]
        for g in active:
            for t in g.tensors:
                if t.grad is not None and not np.isfinite(t.grad).all():
                    raise NumericError(f"non-finite gradient in parameter group {g.name!r} ({t.name})")
        self.state.step += 1
        for g in active:
            decay = cfg.weight_decay if (g.name != "affinity" or cfg.decay_affinity) else 0.0
            for i, t in enumerate(g.tensors):
                if t.grad is None:
                    continue
                key = (g.name, i)
                grad = t.grad
                k = self.state.count.get(key, 0) + 1
                m = self.state.m.get(key, 0.0)
                v = self.state.v.get(key, 0.0)
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
                self.state.m[key], self.state.v[key], self.state.count[key] = m, v, k
                data = t.data
                if decay:
                    data = data - cfg.lr * decay * data
                m_hat = m / (1.0 - cfg.beta1 ** k)
                v_hat = v / (1.0 - cfg.beta2 ** k)
                t.data = data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def zero_grad(self) -> None:
        for g in self.groups:
            g.zero_grad()


def adam_step(groups: Sequence[ParamGroup], state: AdamState, cfg: OptimConfig) -> AdamState:
    """One functional Adam update of ``groups`` using and returning ``state``."""
    opt = Adam(groups, cfg)
    opt.state = state
    opt.step()
    return opt.state

