"""Adam with decoupled weight decay and the warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, param: Tensor, **kw) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kw)


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place on ``param.data`` and ``state``."""
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1**state.t)
    vhat = state.v / (1.0 - b2**state.t)
    step = mhat / (np.sqrt(vhat) + state.eps)
    if state.weight_decay:
        step = step + state.weight_decay * param.data
    param.data = param.data - lr * step


@dataclass
class Adam:
    """Adam over a named parameter dict.

    Weight decay applies to matrices and kernels only (ndim >= 2); biases,
    norm gains and embeddings of rank 1 are not decayed.
    """

    params: dict[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            if name not in self.states:
                wd = self.weight_decay if p.ndim >= 2 else 0.0
                self.states[name] = AdamState.zeros_like(
                    p, beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=wd
                )

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_update(p, g, self.states[name], lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, s in self.states.items():
            out[f"opt.m/{name}"] = s.m
            out[f"opt.v/{name}"] = s.v
            out[f"opt.t/{name}"] = np.asarray(float(s.t))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, s in self.states.items():
            s.m = np.array(arrays[f"opt.m/{name}"], dtype=np.float64)
            s.v = np.array(arrays[f"opt.v/{name}"], dtype=np.float64)
            s.t = int(arrays[f"opt.t/{name}"])


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 1.5e-4
    warmup_steps: int = 40
    total_steps: int = 1600
    min_lr: float = 0.0


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine down to ``min_lr``."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if s.warmup_steps >= s.total_steps:
        raise ValueError("warmup_steps must be < total_steps")
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))
