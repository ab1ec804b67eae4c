"""AdamW with decoupled weight decay, plus the training schedules.

The learning rate warms up linearly from a fraction of the peak and then
decays exponentially per epoch; weight decay ramps linearly to a cap.
Schedules are functions of the epoch index so a resumed run lands on the
same values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Schedule:
    warmup_start_factor: float = 0.3
    max_lr: float = 0.000625
    warmup_epochs: int = 30
    lr_decay_per_epoch: float = 0.995
    wd_start: float = 0.1
    wd_end: float = 0.4
    wd_ramp_epochs: int = 1000

    def lr_at(self, epoch):
        """Linear warmup to max_lr, then exponential decay."""
        if epoch < self.warmup_epochs:
            frac = epoch / self.warmup_epochs
            start = self.warmup_start_factor * self.max_lr
            return start + frac * (self.max_lr - start)
        return self.max_lr * self.lr_decay_per_epoch ** (epoch - self.warmup_epochs)

    def wd_at(self, epoch):
        """Linear ramp from wd_start to wd_end, clamped at the cap."""
        if epoch >= self.wd_ramp_epochs:
            return self.wd_end
        frac = epoch / self.wd_ramp_epochs
        return self.wd_start + frac * (self.wd_end - self.wd_start)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a dict of named parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, lr, weight_decay=0.0, no_decay=()):
        """Apply one update in place.

        params: dict name -> Tensor; grads: dict name -> ndarray. Names in
        no_decay (or containing any of its substrings) skip weight decay,
        which is how biases, norms and embeddings opt out. Raises on
        non-finite gradients so a diverging run stops loudly.
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if weight_decay and not any(tag in name for tag in no_decay):
                update = update + weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
