"""AdamW with decoupled weight decay and the warmup-then-linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    peak_lr: float
    total_steps: int
    warmup_ratio: float = 0.1

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_ratio * self.total_steps


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 to peak over the warmup, then linear decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    warm = schedule.warmup_steps
    if warm > 0 and step < warm:
        return schedule.peak_lr * step / warm
    remaining = schedule.total_steps - warm
    if remaining <= 0:
        return schedule.peak_lr if step < schedule.total_steps else 0.0
    return schedule.peak_lr * max(0.0, (schedule.total_steps - step) / remaining)


@dataclass
class AdamWState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    schedule: LrSchedule | None = None


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    ``step`` takes one learning rate per group (usually from ``lr_at``).
    """

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        names = [n for g in groups for n in g.params]
        if len(names) != len(set(names)):
            raise ValueError("a parameter appears in more than one group")
        self.groups = groups
        self.state = AdamWState(beta1=betas[0], beta2=betas[1], epsilon=eps, weight_decay=weight_decay)
        for g in groups:
            for name, p in g.params.items():
                self.state.first_moment[name] = np.zeros_like(p.data)
                self.state.second_moment[name] = np.zeros_like(p.data)

    def parameters(self):
        for g in self.groups:
            yield from g.params.items()

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def current_lrs(self, step: int) -> dict[str, float]:
        return {g.name: lr_at(g.schedule, step) for g in self.groups}

    def step(self, lrs: dict[str, float] | float) -> None:
        st = self.state
        for g in self.groups:
            lr = lrs if isinstance(lrs, (int, float)) else lrs[g.name]
            if lr < 0:
                raise ValueError("learning rate must be non-negative")
            for name, p in g.params.items():
                if p.grad is None:
                    raise RuntimeError(f"parameter {name!r} has no gradient; zero grads before backward")
        st.step_count += 1
        t = st.step_count
        b1, b2 = st.beta1, st.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for g in self.groups:
            lr = lrs if isinstance(lrs, (int, float)) else lrs[g.name]
            for name, p in g.params.items():
                grad = p.grad
                m = st.first_moment[name]
                v = st.second_moment[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                m_hat = m / bc1
                v_hat = v / bc2
                update = m_hat / (np.sqrt(v_hat) + st.epsilon) + st.weight_decay * p.data
                p.data -= (lr * update).astype(p.data.dtype, copy=False)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """Functional single step over a flat name->tensor mapping.

    Missing moment buffers are created (zero) on first use.
    """
    opt = AdamW.__new__(AdamW)
    opt.groups = [ParamGroup("all", params)]
    opt.state = state
    for name, p in params.items():
        state.first_moment.setdefault(name, np.zeros_like(p.data))
        state.second_moment.setdefault(name, np.zeros_like(p.data))
    opt.step(lr)

