"""Adam with bias correction, operating on Parameter objects in place."""

from __future__ import annotations

import numpy as np

from .core import Parameter


class Adam:
    def __init__(self, params: list[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise ValueError("optimizer needs at least one parameter")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.m) or set(state["v"]) != set(self.v):
            raise ValueError("optimizer state does not match the parameter set")
        self.t = int(state["t"])
        for k, a in state["m"].items():
            if a.shape != self.m[k].shape:
                raise ValueError(f"moment shape mismatch for {k}")
            self.m[k] = a.astype(self.m[k].dtype, copy=True)
        for k, a in state["v"].items():
            if a.shape != self.v[k].shape:
                raise ValueError(f"moment shape mismatch for {k}")
            self.v[k] = a.astype(self.v[k].dtype, copy=True)
