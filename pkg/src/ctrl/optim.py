"""AdamW with decoupled weight decay, plus the linear warm-up schedule.

Plain Adam is AdamW with weight_decay=0; the fine-tuning stage uses it
that way. Parameters are replaced with successor tensors on each step,
never mutated, and the update order is the sorted name order so runs are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import DTensor
from .exceptions import UsageError
from .params import ParamStore


@dataclass(frozen=True)
class WarmupSchedule:
    """Linear ramp from start_lr to peak_lr over warmup_steps, then flat."""

    start_lr: float
    peak_lr: float
    warmup_steps: int

    def __post_init__(self):
        if self.start_lr < 0 or self.peak_lr < 0:
            raise UsageError("learning rates must be non-negative")
        if self.peak_lr < self.start_lr:
            raise UsageError("peak_lr must be at least start_lr")
        if self.warmup_steps < 0:
            raise UsageError("warmup_steps must be non-negative")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise UsageError(f"step must be non-negative, got {step}")
        if self.warmup_steps == 0 or step >= self.warmup_steps:
            return self.peak_lr
        frac = step / self.warmup_steps
        return self.start_lr + (self.peak_lr - self.start_lr) * frac


def lr_at(schedule: WarmupSchedule, step: int) -> float:
    return schedule.lr_at(step)


class AdamW:
    """Bias-corrected AdamW over a subset of a ParamStore.

    The step counter is shared across parameters and increases by exactly
    one per :meth:`step` call.
    """

    def __init__(self, store: ParamStore, names: Optional[Sequence[str]] = None,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.store = store
        self.names = sorted(names) if names is not None else store.names()
        for n in self.names:
            store[n]  # raises for unknown names
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros(store[n].shape) for n in self.names}
        self._v = {n: np.zeros(store[n].shape) for n in self.names}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.names:
            p = self.store[name]
            g = p.grad
            if g is None:
                raise UsageError(f"adamw step: parameter '{name}' has no gradient")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            new = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps))
            if self.weight_decay:
                new = new - lr * self.weight_decay * p.data
            self.store.replace(name, DTensor(new, requires_grad=True))

    def state_arrays(self) -> dict:
        out = {"step": np.array([float(self.t)])}
        for n in self.names:
            out[f"m.{n}"] = self._m[n].copy()
            out[f"v.{n}"] = self._v[n].copy()
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.t = int(state["step"][0])
        for n in self.names:
            self._m[n][...] = state[f"m.{n}"]
            self._v[n][...] = state[f"v.{n}"]
