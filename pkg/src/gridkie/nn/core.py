"""Forward and backward kernels for every operation the network uses.

Everything is plain numpy.  Internally activations are kept channels-last
([N, H, W, C]) so the convolution's column gather copies contiguous channel
runs and the heavy lifting becomes one GEMM; the public entry points at the
bottom of the module speak the channels-first [N, C, H, W] convention.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided

# Reusable per-thread buffers for the convolution's padded input and column
# matrix.  These would otherwise be tens of MB of fresh mmap'd pages on every
# call, and the page faults dominate the actual copy.
_TLS = threading.local()


def _scratch(tag: str, shape: tuple[int, ...], dtype) -> np.ndarray:
    pools = getattr(_TLS, "pools", None)
    if pools is None:
        pools = _TLS.pools = {}
    dt = np.dtype(dtype)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    buf = pools.get(tag)
    if buf is None or buf.nbytes < nbytes:
        buf = pools[tag] = np.empty(nbytes + (nbytes >> 2) + 64, dtype=np.uint8)
    return buf[:nbytes].view(dt).reshape(shape)


class Parameter:
    """A named tensor with an accumulated gradient."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# ---------------------------------------------------------------------------
# convolution (channels-last internals)
# ---------------------------------------------------------------------------


def _same_pad(kh: int, kw: int, rate: int) -> tuple[int, int]:
    # 'same' output size requires odd kernels once dilation is folded in.
    eff_h = (kh - 1) * rate + 1
    eff_w = (kw - 1) * rate + 1
    if eff_h % 2 == 0 or eff_w % 2 == 0:
        raise ValueError(f"effective kernel {eff_h}x{eff_w} must be odd for same padding")
    return eff_h // 2, eff_w // 2


def _im2col(x: np.ndarray, kh: int, kw: int, rate: int) -> np.ndarray:
    """Gather kh*kw dilated taps for every output cell.

    x is [N, H, W, C]; the result is [N*H*W, kh*kw*C], contiguous, ready to
    be multiplied against a [kh*kw*C, O] weight matrix.  The result lives in
    per-thread scratch and is only valid until the next conv call on the
    same thread.
    """
    n, h, w, c = x.shape
    ph, pw = _same_pad(kh, kw, rate)
    xp = _scratch("pad", (n, h + 2 * ph, w + 2 * pw, c), x.dtype)
    xp[:, :ph] = 0
    xp[:, ph + h :] = 0
    xp[:, :, :pw] = 0
    xp[:, :, pw + w :] = 0
    xp[:, ph : ph + h, pw : pw + w, :] = x
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, h, w, kh, kw, c),
        strides=(sn, sh, sw, sh * rate, sw * rate, sc),
    )
    col = _scratch("col", (n, h, w, kh, kw, c), x.dtype)
    np.copyto(col, view)
    return col.reshape(n * h * w, kh * kw * c)


def conv_fwd(
    x: np.ndarray, w: np.ndarray, b: np.ndarray | None, rate: int
) -> np.ndarray:
    """Same-padded dilated convolution, channels last.

    x: [N, H, W, C]; w: [kh, kw, C, O] -> [N, H, W, O].
    """
    n, h, wd, c = x.shape
    kh, kw, wc, o = w.shape
    if wc != c:
        raise ValueError(f"input has {c} channels but kernel expects {wc}")
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    if kh == 1 and kw == 1:
        y = x.reshape(n * h * wd, c) @ w.reshape(c, o)
    else:
        col = _im2col(x, kh, kw, rate)
        y = col @ w.reshape(kh * kw * c, o)
    if b is not None:
        y += b
    return y.reshape(n, h, wd, o)


def conv_bwd(
    x: np.ndarray, w: np.ndarray, rate: int, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv_fwd.  Returns (dx, dw, db).

    dx is computed as a same-padded convolution of dout with the kernel
    flipped along both spatial axes and its channel axes swapped.
    """
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    dout_mat = dout.reshape(n * h * wd, o)
    db = dout_mat.sum(axis=0)
    if kh == 1 and kw == 1:
        dw = (x.reshape(n * h * wd, c).T @ dout_mat).reshape(kh, kw, c, o)
        dx = (dout_mat @ w.reshape(c, o).T).reshape(x.shape)
        return dx, dw, db
    col = _im2col(x, kh, kw, rate)
    dw = (col.T @ dout_mat).reshape(kh, kw, c, o)
    w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    dx = conv_fwd(dout, w_flip, None, rate)
    return dx, dw, db


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def embed_fwd(ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Look up rows of table for an id grid.  ids [N, H, W] -> [N, H, W, E]."""
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"token ids must lie in [0, {table.shape[0]}), "
            f"found range [{ids.min()}, {ids.max()}]"
        )
    return table[ids]


def embed_bwd(ids: np.ndarray, dout: np.ndarray, vocab_size: int) -> np.ndarray:
    """Scatter-add the upstream gradient into a dense table gradient."""
    e = dout.shape[-1]
    dtable = np.zeros((vocab_size, e), dtype=dout.dtype)
    np.add.at(dtable, ids.reshape(-1), dout.reshape(-1, e))
    return dtable


# ---------------------------------------------------------------------------
# instance norm (per sample, per channel, over the spatial extent)
# ---------------------------------------------------------------------------


def inorm_fwd(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, tuple]:
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    n, h, w, c = x.shape
    if h * w == 0:
        raise ValueError("cannot normalise over an empty spatial extent")
    mu = x.mean(axis=(1, 2), keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma + beta
    return y, (xhat, inv, gamma)


def inorm_bwd(cache: tuple, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    m1 = dxhat.mean(axis=(1, 2), keepdims=True)
    m2 = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise / pooling
# ---------------------------------------------------------------------------


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(y: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # y is the forward output; its positive support equals the input's.
    return np.where(y > 0, dout, 0)


def dropout_fwd(
    x: np.ndarray,
    keep_prob: float,
    rng: np.random.Generator | None,
    training: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: identity at inference, scaled mask while training."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype)
    mask /= keep_prob
    return x * mask, mask


def dropout_bwd(mask: np.ndarray | None, dout: np.ndarray) -> np.ndarray:
    return dout if mask is None else dout * mask


def gap_fwd(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial extent.  [N, H, W, C] -> [N, 1, 1, C]."""
    return x.mean(axis=(1, 2), keepdims=True)


def gap_bwd(dout: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.broadcast_to(dout / (h * w), (dout.shape[0], h, w, dout.shape[3])).copy()


def upcast_fwd(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Tile a [N, 1, 1, C] tensor across a full spatial extent."""
    return np.broadcast_to(x, (x.shape[0], h, w, x.shape[3])).copy()


def upcast_bwd(dout: np.ndarray) -> np.ndarray:
    return dout.sum(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax_xent_fwd_bwd(
    logits: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted softmax cross-entropy over grid cells.

    logits [N, H, W, K], labels [N, H, W] ints, weights [N, H, W] >= 0.
    Loss is the weight-normalised sum; the returned gradient already folds
    the normalisation in.  Also returns the softmax probabilities.
    """
    if np.any(weights < 0):
        raise ValueError("cell weights must be non-negative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("at least one cell must carry positive loss weight")
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    probs = ez / denom
    logp = z - np.log(denom)
    n, h, w, _ = logits.shape
    nll = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = float((nll * weights).sum() / total)
    dlogits = probs.copy()
    # each (n, h, w, label) index is unique, so plain fancy indexing is safe
    flat = dlogits.reshape(-1, k)
    flat[np.arange(flat.shape[0]), labels.reshape(-1)] -= 1.0
    dlogits *= (weights / total)[..., None]
    return loss, dlogits, probs


def per_cell_nll(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Unweighted per-cell negative log-likelihood, [N, H, W]."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    return lse - picked


# ---------------------------------------------------------------------------
# public channels-first wrappers
# ---------------------------------------------------------------------------


def _to_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_first(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None, rate: int = 1
) -> np.ndarray:
    """Same-padded dilated conv.  x [N, C, H, W], weights [O, C, kh, kw]."""
    w = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))
    y = conv_fwd(_to_last(x), w, bias, rate)
    return _to_first(y)


def conv2d_grads(
    x: np.ndarray,
    weights: np.ndarray,
    rate: int,
    dout: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for conv2d: (dx, dweights, dbias), channels-first layout."""
    w = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))
    dx, dw, db = conv_bwd(_to_last(x), w, rate, _to_last(dout))
    return _to_first(dx), np.ascontiguousarray(dw.transpose(3, 2, 0, 1)), db


def embedding_forward(ids: np.ndarray, table: np.ndarray) -> np.ndarray:
    """ids [N, H, W] -> embeddings [N, E, H, W]."""
    return _to_first(embed_fwd(ids, table))


def embedding_grad(ids: np.ndarray, dout: np.ndarray, vocab_size: int) -> np.ndarray:
    return embed_bwd(ids, _to_last(dout), vocab_size)


def instance_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    y, _ = inorm_fwd(_to_last(x), gamma, beta, eps)
    return _to_first(y)


def instance_norm_grads(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, cache = inorm_fwd(_to_last(x), gamma, beta, eps)
    dx, dgamma, dbeta = inorm_bwd(cache, _to_last(dout))
    return _to_first(dx), dgamma, dbeta


def dropout(
    x: np.ndarray,
    keep_prob: float,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> np.ndarray:
    y, _ = dropout_fwd(x, keep_prob, rng, training)
    return y


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, C, 1, 1]."""
    return x.mean(axis=(2, 3), keepdims=True)


def broadcast_up(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """[N, C, 1, 1] -> [N, C, H, W]."""
    return np.broadcast_to(x, (x.shape[0], x.shape[1], h, w)).copy()


def masked_softmax_xent(
    logits: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Channels-first weighted cross-entropy.  logits [N, K, H, W]."""
    loss, dl, _ = softmax_xent_fwd_bwd(_to_last(logits), labels, weights)
    return loss, _to_first(dl)
