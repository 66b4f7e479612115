"""Stateful layers over the functional kernels, channels-last throughout.

Each layer caches whatever its backward pass needs during forward (training
mode only) and accumulates parameter gradients in place.
"""

from __future__ import annotations

import numpy as np

from . import core
from .core import Parameter


class Embedding:
    """Token-id lookup table.  Rows start life as N(0, 1/sqrt(E))."""

    def __init__(self, name: str, vocab_size: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        scale = 1.0 / np.sqrt(dim)
        init = rng.normal(0.0, scale, size=(vocab_size, dim)).astype(dtype)
        self.table = Parameter(f"{name}.table", init)
        self.vocab_size = vocab_size
        self._ids: np.ndarray | None = None

    def params(self) -> list[Parameter]:
        return [self.table]

    def forward(self, ids: np.ndarray, training: bool) -> np.ndarray:
        if training:
            self._ids = ids
        return core.embed_fwd(ids, self.table.data)

    def backward(self, dout: np.ndarray) -> None:
        e = dout.shape[-1]
        np.add.at(self.table.grad, self._ids.reshape(-1), dout.reshape(-1, e))
        self._ids = None


class Conv2d:
    """Same-padded dilated conv, He-uniform init over the fan-in."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kh: int, kw: int,
                 rate: int, rng: np.random.Generator, dtype=np.float32):
        fan_in = in_ch * kh * kw
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(kh, kw, in_ch, out_ch)).astype(dtype)
        self.w = Parameter(f"{name}.w", w)
        self.b = Parameter(f"{name}.b", np.zeros(out_ch, dtype=dtype))
        self.rate = rate
        self._x: np.ndarray | None = None

    def params(self) -> list[Parameter]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y = core.conv_fwd(x, self.w.data, self.b.data, self.rate)
        if training:
            self._x = x
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dw, db = core.conv_bwd(self._x, self.w.data, self.rate, dout)
        self.w.grad += dw
        self.b.grad += db
        self._x = None
        return dx


class InstanceNorm:
    """Per-sample, per-channel spatial normalisation with affine output."""

    def __init__(self, name: str, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.eps = eps
        self._cache = None

    def params(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y, cache = core.inorm_fwd(x, self.gamma.data, self.beta.data, self.eps)
        if training:
            self._cache = cache
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx, dgamma, dbeta = core.inorm_bwd(self._cache, dout)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self._cache = None
        return dx


class ReLU:
    def __init__(self):
        self._y: np.ndarray | None = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y = core.relu_fwd(x)
        if training:
            self._y = y
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx = core.relu_bwd(self._y, dout)
        self._y = None
        return dx


class Dropout:
    def __init__(self, keep_prob: float):
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self._mask: np.ndarray | None = None

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, training: bool,
                rng: np.random.Generator | None = None) -> np.ndarray:
        y, mask = core.dropout_fwd(x, self.keep_prob, rng, training)
        self._mask = mask
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dx = core.dropout_bwd(self._mask, dout)
        self._mask = None
        return dx
