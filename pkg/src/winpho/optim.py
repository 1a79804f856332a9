"""Decoupled-weight-decay Adam with a one-cycle schedule.

The schedule rises over the warmup fraction to the configured peak and
anneals back down, with the first-moment coefficient cycling inversely
inside [momentum_low, momentum_high]. Parameter groups scale the shared
schedule by their own peak rate (hierarchical learning rates).
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class OneCycle:
    total_steps: int
    warmup_frac: float = 0.15
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    momentum_low: float = 0.8
    momentum_high: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in (0,1), got {self.warmup_frac}")
        self.warmup_steps = max(1, int(round(self.warmup_frac * self.total_steps)))

    def lr_factor(self, step):
        """Multiplier of the peak rate at ``step``; exactly 1.0 at the
        end of warmup."""
        start = 1.0 / self.div_factor
        if step <= self.warmup_steps:
            t = step / self.warmup_steps
            return start + (1.0 - start) * 0.5 * (1.0 - np.cos(np.pi * t))
        floor = start / self.final_div_factor
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * t))

    def momentum(self, step):
        """First-moment coefficient, moving opposite to the rate."""
        lo, hi = self.momentum_low, self.momentum_high
        if step <= self.warmup_steps:
            t = step / self.warmup_steps
            return hi - (hi - lo) * 0.5 * (1.0 - np.cos(np.pi * t))
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return lo + (hi - lo) * 0.5 * (1.0 - np.cos(np.pi * t))


def global_grad_norm(tensors):
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return np.sqrt(total)


def clip_global_norm(tensors, max_norm):
    """Scale all gradients so the global norm is at most ``max_norm``.
    Returns (pre_clip_norm, post_clip_norm)."""
    norm = global_grad_norm(tensors)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
        return norm, max_norm
    return norm, norm


class AdamW:
    """Moments are kept per parameter name; ``group_lrs`` maps a group
    label to its peak rate and ``group_of`` assigns labels to names."""

    def __init__(self, named_params, group_lrs, group_of=None,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [(name, t) for name, t in named_params if t.requires_grad]
        self.group_of = group_of or (lambda name: "default")
        self.group_lrs = dict(group_lrs)
        for name, _ in self.params:
            if self.group_of(name) not in self.group_lrs:
                raise KeyError(f"no learning rate for group {self.group_of(name)!r}")
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.t = 0

    def group_rates(self, lr_factor=1.0):
        return {g: lr * lr_factor for g, lr in self.group_lrs.items()}

    def step(self, lr_factor=1.0, beta1=None):
        """One update; ``lr_factor`` scales every group's peak rate and
        ``beta1`` overrides the cycled first-moment coefficient."""
        b1 = self.betas[0] if beta1 is None else beta1
        b2 = self.betas[1]
        self.t += 1
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            lr = self.group_lrs[self.group_of(name)] * lr_factor
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def tensors(self):
        return [t for _, t in self.params]

    def state_arrays(self):
        """Moment buffers for checkpointing, keyed by parameter name."""
        return self.m, self.v

    def load_state(self, m, v, t):
        for name, _ in self.params:
            if name in m:
                self.m[name] = np.array(m[name])
            if name in v:
                self.v[name] = np.array(v[name])
        self.t = t
