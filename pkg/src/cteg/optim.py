"""Adam with the inverse-square-root warmup schedule."""

import numpy as np

from .tensor import ContractError


def lr_at(step, d_model, warmup):
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step counts from 1."""
    if step < 1:
        raise ContractError(f"lr_at: step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def global_norm_clip(params, max_norm):
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    if max_norm <= 0:
        return 1.0
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values()))
    if total <= max_norm:
        return 1.0
    scale = max_norm / total
    for p in params.values():
        p.grad *= scale
    return scale


class Adam:
    """Bias-corrected Adam (beta1=0.9, beta2=0.98, eps=1e-9)."""

    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self):
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
            "master": {k: p.data.copy() for k, p in self.params.items()},
        }

    def load_state(self, state):
        self.t = state["t"]
        for k in self.params:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()
            # float64 master copies make a resumed run bit-identical even
            # though checkpointed tensors are stored as float32
            self.params[k].data[...] = state["master"][k]
