"""Adam with linear warmup and global-norm gradient clipping.

Only parameters that received a gradient this step are touched, so
frozen or unrouted components keep bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor


@dataclass
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup: int = 0
    clip: float = 0.0       # 0 disables clipping


@dataclass
class StepStats:
    lr: float
    grad_norm: float
    clipped: bool


@dataclass
class Adam:
    cfg: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> StepStats:
        self.t += 1
        lr = self.cfg.lr
        if self.cfg.warmup > 0:
            lr = lr * min(1.0, self.t / self.cfg.warmup)

        names = sorted(grads)
        sq = 0.0
        for n in names:
            g = grads[n].astype(np.float64)
            sq += float(np.sum(g * g))
        norm = float(np.sqrt(sq))
        clipped = False
        scale = 1.0
        if self.cfg.clip > 0.0 and norm > self.cfg.clip:
            scale = self.cfg.clip / norm
            clipped = True

        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n in names:
            g = grads[n].astype(np.float32) * np.float32(scale)
            if n not in self.m:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * (g * g)
            m_hat = self.m[n] / c1
            v_hat = self.v[n] / c2
            update = (np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))).astype(np.float32)
            params[n] = Tensor(params[n].data - update, requires_grad=True)
        return StepStats(lr=lr, grad_norm=norm, clipped=clipped)


def grads_by_name(tape, params: dict[str, Tensor], grad_map) -> dict[str, np.ndarray]:
    """Translate a tape gradient map into parameter-name keys."""
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = tape.grad_for(grad_map, p)
        if g is not None:
            out[name] = g
    return out
