"""AdamW with decoupled weight decay, triangular cyclical learning rates,
and the moving-average convergence monitor used to stop fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffkernel import Tensor2


class NumericalError(RuntimeError):
    """A non-finite gradient or objective was encountered."""


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of leaf tensors.

    Update per step with learning rate lr:
        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g^2
        mhat = m / (1 - b1^t),  vhat = v / (1 - b2^t)
        w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * lam * w
    """

    def __init__(self, params: list[Tensor2], beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        if lr < 0.0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps) - lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class ClrSchedule:
    """Triangular cyclical learning rate: base at t=0, peak at t=step_size."""

    base_lr: float
    max_lr: float | None = None
    step_size: int = 2000

    def __post_init__(self):
        if self.max_lr is None:
            self.max_lr = 5.0 * self.base_lr
        if self.max_lr < self.base_lr:
            raise ValueError("max_lr must be >= base_lr")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")

    def lr(self, t: int) -> float:
        if t < 0:
            raise ValueError("t must be >= 0")
        cycle_pos = t % (2 * self.step_size)
        frac = cycle_pos / self.step_size
        if frac > 1.0:
            frac = 2.0 - frac
        return self.base_lr + (self.max_lr - self.base_lr) * frac


def clr_lr(t: int, schedule: ClrSchedule) -> float:
    return schedule.lr(t)


@dataclass
class ConvergenceMonitor:
    """Stop when the windowed objective average has not improved for
    `patience` consecutive windows (improvement = best + min_delta)."""

    patience: int = 500
    min_delta: float = 1e-3
    window: int = 100
    best_avg: float | None = None
    windows_since_improvement: int = field(default=0)

    def update(self, window_avg: float) -> str:
        """Feed one window average; returns "continue" or "converged"."""
        if self.best_avg is None or window_avg > self.best_avg + self.min_delta:
            self.best_avg = window_avg if self.best_avg is None else max(self.best_avg, window_avg)
            self.windows_since_improvement = 0
            return "continue"
        self.windows_since_improvement += 1
        if self.windows_since_improvement >= self.patience:
            return "converged"
        return "continue"
