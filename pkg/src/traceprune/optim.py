"""AdamW (Adam with decoupled weight decay) over a :class:`ParamStore`."""
from __future__ import annotations

import numpy as np

from .model import ParamStore


class AdamW:
    def __init__(self, params: ParamStore, lr: float = 3e-4, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step_size = self.lr / c1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            denom = np.sqrt(v)
            denom /= np.sqrt(c2)
            denom += self.eps
            p.data -= step_size * (m / denom)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"optim.m/{k}"] = self.m[k]
            out[f"optim.v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"optim.m/{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(arrays[f"optim.v/{k}"], dtype=self.v[k].dtype)
        self.t = int(t)
