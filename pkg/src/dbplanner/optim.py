"""AdamW with decoupled weight decay, and the warmup+cosine LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class AdamW:
    """Decoupled weight decay: params are shrunk multiplicatively by
    (1 - lr*wd) before the bias-corrected adaptive update."""

    def __init__(self, named_params, lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 500) -> float:
    """Linear ramp 0 -> base_lr over warmup_steps, then cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step >= total_steps:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
