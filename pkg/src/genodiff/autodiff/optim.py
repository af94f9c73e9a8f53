"""Adam and SGD, as pure array updates and as stateful wrappers over Parameters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, state: AdamState | None = None):
    """One Adam update. Returns (new_params, new_state); inputs are not mutated."""
    state = state or AdamState()
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("adam_step: optimizer state does not match parameter shapes")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    velocity = velocity or [np.zeros_like(p) for p in params]
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    return [p - lr * v for p, v in zip(params, new_v)], new_v


def _finite(grads) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads)


class Optimizer:
    def __init__(self, params, clip_norm: float | None = None):
        self.params = list(params)
        self.clip_norm = clip_norm
        self.skipped_steps = 0

    def _grads(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if not _finite(grads):
            self.skipped_steps += 1
            log.warning("non-finite gradient, skipping optimizer step (%d skipped so far)", self.skipped_steps)
            return None
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        return grads

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam(Optimizer):
    """Adam with decoupled weight decay; parameters listed in ``no_decay`` are never decayed."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, clip_norm=None,
                 no_decay=()):
        super().__init__(params, clip_norm)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        skip = {id(p) for p in no_decay}
        self._decay = [id(p) not in skip for p in self.params]
        self.state = AdamState()

    def step(self) -> bool:
        grads = self._grads()
        if grads is None:
            return False
        data = [p.data for p in self.params]
        new, self.state = adam_step(data, grads, self.lr, *self.betas, self.eps, self.state)
        shrink = self.lr * self.weight_decay
        for p, d, old, decay in zip(self.params, new, data, self._decay):
            p.data = d - shrink * old if (shrink and decay) else d
        return True


class SGD(Optimizer):
    def __init__(self, params, lr=1e-2, momentum=0.0, clip_norm=None):
        super().__init__(params, clip_norm)
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self) -> bool:
        grads = self._grads()
        if grads is None:
            return False
        new, self.velocity = sgd_step([p.data for p in self.params], grads, self.lr, self.momentum, self.velocity)
        for p, d in zip(self.params, new):
            p.data = d
        return True
