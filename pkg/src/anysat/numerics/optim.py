"""AdamW and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("AdamW: lr and eps must be positive, weight_decay non-negative")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"AdamW: betas must lie in [0, 1), got {self.betas}")


def adamw_step(params: Sequence[Parameter], state: OptimizerState, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Gradients are read, never modified. ``lr`` overrides ``state.lr`` for this
    step only (schedules feed it in).
    """
    lr = state.lr if lr is None else lr
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p in params:
        m = state.exp_avg.get(p.name)
        v = state.exp_avg_sq.get(p.name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        g = p.grad
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.exp_avg[p.name] = m
        state.exp_avg_sq[p.name] = v
        value = p.data * (1.0 - lr * state.weight_decay)
        p.data = value - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- schedules


@dataclass
class WarmupCosine:
    base_lr: float
    total_steps: int
    warmup_steps: int | None = None
    min_lr: float = 1e-6
    kind: str = "warmup-cosine"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("warmup-cosine: total_steps must be >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.05 * self.total_steps))
        if not 0 < self.min_lr <= self.base_lr:
            raise ValueError("warmup-cosine: need 0 < min_lr <= base_lr")

    def lr_at(self, step: int, monitored_loss: float | None = None) -> float:
        w = self.warmup_steps
        if step < w:
            return self.min_lr + (self.base_lr - self.min_lr) * step / w
        span = max(1, self.total_steps - w)
        progress = min(1.0, (step - w) / span)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class ReduceOnPlateau:
    base_lr: float
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-8
    threshold: float = 1e-4
    kind: str = "reduce-on-plateau"
    current_lr: float = field(init=False)
    best: float = field(init=False, default=math.inf)
    bad_evals: int = field(init=False, default=0)

    def __post_init__(self):
        if not 0 < self.factor < 1 or self.patience < 0 or self.base_lr <= 0:
            raise ValueError("reduce-on-plateau: need 0 < factor < 1, patience >= 0, base_lr > 0")
        self.current_lr = self.base_lr

    def lr_at(self, step: int, monitored_loss: float | None = None) -> float:
        if monitored_loss is None:
            raise ValueError("reduce-on-plateau needs a monitored loss")
        improved = math.isinf(self.best) or monitored_loss < self.best - self.threshold * abs(self.best)
        if improved:
            self.best = monitored_loss
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.current_lr = max(self.min_lr, self.current_lr * self.factor)
                self.bad_evals = 0
        return self.current_lr

    def state_dict(self) -> dict:
        return {"current_lr": self.current_lr, "best": self.best, "bad_evals": self.bad_evals}

    def load_state_dict(self, state: dict) -> None:
        self.current_lr = float(state["current_lr"])
        self.best = float(state["best"])
        self.bad_evals = int(state["bad_evals"])


@dataclass
class Constant:
    base_lr: float
    kind: str = "constant"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("constant schedule: base_lr must be > 0")

    def lr_at(self, step: int, monitored_loss: float | None = None) -> float:
        return self.base_lr


LrSchedule = WarmupCosine | ReduceOnPlateau | Constant


def make_schedule(kind: str, base_lr: float, total_steps: int = 1, **kwargs) -> LrSchedule:
    if kind == "warmup-cosine":
        return WarmupCosine(base_lr, total_steps, **kwargs)
    if kind == "reduce-on-plateau":
        return ReduceOnPlateau(base_lr, **kwargs)
    if kind == "constant":
        return Constant(base_lr)
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_lr(sched: LrSchedule, step: int, monitored_loss: float | None = None) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return sched.lr_at(step, monitored_loss)
