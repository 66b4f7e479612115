import numpy as np
import pytest
from scipy.signal import correlate2d

from gridkie.nn import (
    Adam,
    Parameter,
    broadcast_up,
    conv2d,
    conv2d_grads,
    dropout,
    embedding_forward,
    embedding_grad,
    global_avg_pool,
    instance_norm,
    instance_norm_grads,
    masked_softmax_xent,
)
from gridkie.nn import core


def dense_conv_oracle(x, w, b, rate):
    """Reference convolution: scipy correlate2d on an explicitly dilated kernel.

    x is [N, C, H, W]; w is [O, C, kh, kw].
    """
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    wd = np.zeros((cout, cin, (kh - 1) * rate + 1, (kw - 1) * rate + 1), dtype=w.dtype)
    wd[:, :, ::rate, ::rate] = w
    y = np.zeros((n, cout, h, wid), dtype=x.dtype)
    for ni in range(n):
        for o in range(cout):
            acc = np.zeros((h, wid), dtype=x.dtype)
            for c in range(cin):
                acc += correlate2d(x[ni, c], wd[o, c], mode="same")
            y[ni, o] = acc + (0.0 if b is None else b[o])
    return y


# --- convolution ------------------------------------------------------------

def test_conv_matches_scipy_dense():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 5))
    b = rng.normal(size=4)
    got = conv2d(x, w, b, rate=1)
    want = dense_conv_oracle(x, w, b, rate=1)
    assert np.max(np.abs(got - want)) < 1e-12


@pytest.mark.parametrize("rate", [2, 3, 4])
def test_conv_matches_scipy_dilated(rate):
    rng = np.random.default_rng(rate)
    x = rng.normal(size=(1, 2, 9, 11))
    w = rng.normal(size=(2, 2, 3, 3))
    got = conv2d(x, w, None, rate=rate)
    want = dense_conv_oracle(x, w, None, rate=rate)
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_dilated_hand_case():
    # 1-D: [1,2,3,4,5] * kernel [1,0,-1] at rate 2 -> [-3,-4,-4,2,3]
    x = np.array([1, 2, 3, 4, 5], dtype=np.float64).reshape(1, 1, 1, 5)
    w = np.array([1, 0, -1], dtype=np.float64).reshape(1, 1, 1, 3)
    y = conv2d(x, w, None, rate=2)
    np.testing.assert_array_equal(y.ravel(), [-3, -4, -4, 2, 3])


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    np.testing.assert_allclose(conv2d(x, w, None, 1), x, atol=1e-14)


def test_conv_1x1_is_channel_mix():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    w = rng.normal(size=(5, 3, 1, 1))
    y = conv2d(x, w, None, 1)
    want = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0])
    np.testing.assert_allclose(y, want, atol=1e-12)


def test_conv_rejects_bad_rate_and_shapes():
    x = np.zeros((1, 2, 4, 4))
    w = np.zeros((1, 2, 3, 3))
    with pytest.raises(ValueError):
        conv2d(x, w, None, rate=0)
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 3, 4, 4)), w, None, rate=1)  # channel mismatch


def test_conv_even_effective_kernel_rejected():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 3)), None, rate=1)


def test_conv_grads_against_numeric():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    dout = rng.normal(size=(1, 3, 4, 5))
    for rate in (1, 3):
        dx, dw, db = conv2d_grads(x, w, rate, dout)

        def loss_x():
            return float((conv2d(x, w, None, rate) * dout).sum())

        assert core and np.isfinite(dx).all()
        from gridkie.nn import grad_check

        assert grad_check(loss_x, x, dx) < 1e-6
        assert grad_check(loss_x, w, dw) < 1e-6
        np.testing.assert_allclose(db, dout.sum(axis=(0, 2, 3)), atol=1e-12)


# --- embedding --------------------------------------------------------------

def test_embedding_lookup():
    table = np.arange(12, dtype=np.float64).reshape(4, 3)
    ids = np.array([[[0, 3], [1, 1]]])
    out = embedding_forward(ids, table)
    assert out.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(out[0, :, 0, 1], table[3])
    np.testing.assert_array_equal(out[0, :, 1, 0], table[1])


def test_embedding_rejects_out_of_range():
    table = np.zeros((4, 3))
    with pytest.raises(ValueError):
        embedding_forward(np.array([[[4]]]), table)
    with pytest.raises(ValueError):
        embedding_forward(np.array([[[-1]]]), table)


def test_embedding_grad_accumulates_duplicates():
    ids = np.array([[[2, 2], [0, 2]]])
    dout = np.ones((1, 3, 2, 2))
    g = embedding_grad(ids, dout, vocab_size=5)
    assert g.shape == (5, 3)
    np.testing.assert_array_equal(g[2], [3, 3, 3])
    np.testing.assert_array_equal(g[0], [1, 1, 1])
    np.testing.assert_array_equal(g[1], [0, 0, 0])


# --- instance norm ----------------------------------------------------------

def test_instance_norm_standardizes_per_sample_channel():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 2.0, size=(2, 3, 8, 9))
    gamma = np.ones(3)
    beta = np.zeros(3)
    y = instance_norm(x, gamma, beta)
    for n in range(2):
        for c in range(3):
            assert abs(y[n, c].mean()) < 1e-10
            assert abs(y[n, c].std() - 1.0) < 1e-4  # eps shifts it slightly


def test_instance_norm_constant_input_gives_beta():
    x = np.full((1, 2, 4, 4), 7.5)
    y = instance_norm(x, np.array([3.0, 4.0]), np.array([1.0, -2.0]))
    np.testing.assert_allclose(y[0, 0], 1.0)
    np.testing.assert_allclose(y[0, 1], -2.0)


def test_instance_norm_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 3, 4))
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)
    eps = 1e-5
    y = instance_norm(x, gamma, beta, eps)
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    want = (x - mu) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[None, :, None, None]
    np.testing.assert_allclose(y, want, atol=1e-12)


def test_instance_norm_grads_numeric():
    from gridkie.nn import grad_check

    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2, 4, 5))
    gamma = rng.normal(size=2)
    beta = rng.normal(size=2)
    dout = rng.normal(size=x.shape)
    dx, dgamma, dbeta = instance_norm_grads(x, gamma, beta, 1e-5, dout)

    def loss():
        return float((instance_norm(x, gamma, beta) * dout).sum())

    assert grad_check(loss, x, dx) < 1e-5
    assert grad_check(loss, gamma, dgamma) < 1e-6
    assert grad_check(loss, beta, dbeta) < 1e-6


def test_instance_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        instance_norm(np.zeros((1, 1, 2, 2)), np.ones(1), np.zeros(1), eps=0.0)


# --- dropout ----------------------------------------------------------------

def test_dropout_inference_is_identity():
    x = np.random.default_rng(7).normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(dropout(x, 0.9, training=False), x)


def test_dropout_keep_fraction():
    rng = np.random.default_rng(8)
    x = np.ones((100, 100, 100))  # 10^6 elements
    y = dropout(x, 0.9, rng=rng, training=True)
    kept = float((y != 0).mean())
    assert abs(kept - 0.9) < 0.003
    # inverted scaling: surviving entries are 1/keep
    assert np.allclose(y[y != 0], 1 / 0.9)


def test_dropout_requires_rng_when_training():
    with pytest.raises(ValueError):
        dropout(np.ones((2, 2)), 0.9, rng=None, training=True)


def test_dropout_rejects_bad_keep():
    with pytest.raises(ValueError):
        dropout(np.ones((2, 2)), 0.0, rng=np.random.default_rng(0), training=True)
    with pytest.raises(ValueError):
        dropout(np.ones((2, 2)), 1.5, rng=np.random.default_rng(0), training=True)


# --- pooling ----------------------------------------------------------------

def test_global_avg_pool_hand_case():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    assert global_avg_pool(x).ravel()[0] == 4.0


def test_pool_broadcast_round_trip():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 5, 6))
    pooled = global_avg_pool(x)
    assert pooled.shape == (2, 3, 1, 1)
    up = broadcast_up(pooled, 5, 6)
    assert up.shape == (2, 3, 5, 6)
    np.testing.assert_allclose(up.mean(axis=(2, 3)), x.mean(axis=(2, 3)))
    np.testing.assert_allclose(up.std(axis=(2, 3)), 0, atol=1e-15)


# --- masked cross-entropy ---------------------------------------------------

def test_xent_uniform_logits_is_log_k():
    logits = np.zeros((1, 9, 3, 3))
    labels = np.zeros((1, 3, 3), dtype=np.int64)
    weights = np.ones((1, 3, 3))
    loss, _ = masked_softmax_xent(logits, labels, weights)
    assert loss == pytest.approx(np.log(9), rel=1e-12)


def test_xent_hand_case():
    # one cell, two classes, logits (2, 0), label 0
    logits = np.array([2.0, 0.0]).reshape(1, 2, 1, 1)
    labels = np.zeros((1, 1, 1), dtype=np.int64)
    weights = np.ones((1, 1, 1))
    loss, dlogits = masked_softmax_xent(logits, labels, weights)
    p0 = np.exp(2) / (np.exp(2) + 1)
    assert loss == pytest.approx(-np.log(p0), rel=1e-12)
    np.testing.assert_allclose(dlogits.ravel(), [p0 - 1, 1 - p0], atol=1e-12)


def test_xent_masked_cells_get_zero_grad():
    rng = np.random.default_rng(10)
    logits = rng.normal(size=(1, 4, 2, 3))
    labels = rng.integers(0, 4, size=(1, 2, 3))
    weights = np.zeros((1, 2, 3))
    weights[0, 0, 1] = 1.0
    weights[0, 1, 2] = 2.0
    loss, dlogits = masked_softmax_xent(logits, labels, weights)
    assert np.all(dlogits[0, :, 0, 0] == 0)
    assert np.all(dlogits[0, :, 1, 0] == 0)
    # weighted mean over the two live cells
    nll = core.per_cell_nll(np.moveaxis(logits, 1, -1), labels)
    want = (nll[0, 0, 1] * 1.0 + nll[0, 1, 2] * 2.0) / 3.0
    assert loss == pytest.approx(want, rel=1e-12)


def test_xent_grad_sums_to_zero_per_cell():
    rng = np.random.default_rng(11)
    logits = rng.normal(size=(2, 5, 3, 4))
    labels = rng.integers(0, 5, size=(2, 3, 4))
    weights = rng.uniform(0.5, 2.0, size=(2, 3, 4))
    _, dlogits = masked_softmax_xent(logits, labels, weights)
    np.testing.assert_allclose(dlogits.sum(axis=1), 0, atol=1e-12)


def test_xent_numeric_grad():
    from gridkie.nn import grad_check

    rng = np.random.default_rng(12)
    logits = rng.normal(size=(1, 4, 3, 3))
    labels = rng.integers(0, 4, size=(1, 3, 3))
    weights = rng.uniform(0, 1.5, size=(1, 3, 3))

    def loss():
        return masked_softmax_xent(logits, labels, weights)[0]

    _, dlogits = masked_softmax_xent(logits, labels, weights)
    assert grad_check(loss, logits, dlogits) < 1e-7


def test_xent_validation():
    logits = np.zeros((1, 3, 2, 2))
    labels = np.zeros((1, 2, 2), dtype=np.int64)
    with pytest.raises(ValueError):
        masked_softmax_xent(logits, labels, np.zeros((1, 2, 2)))  # all-zero mask
    with pytest.raises(ValueError):
        masked_softmax_xent(logits, labels, -np.ones((1, 2, 2)))
    bad = labels.copy()
    bad[0, 0, 0] = 3
    with pytest.raises(ValueError):
        masked_softmax_xent(logits, bad, np.ones((1, 2, 2)))


# --- Adam -------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Parameter("w", np.array([1.0, -2.0]))
    opt = Adam([p])
    opt.step(lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Parameter("w", np.array([1.0]))
    opt = Adam([p])
    p.grad[...] = 0.5
    opt.step(lr=0.01)
    # bias-corrected first step: -lr * g / (|g| + eps)
    want = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8)
    assert p.data[0] == pytest.approx(want, rel=1e-12)


def test_adam_state_round_trip():
    rng = np.random.default_rng(13)

    def fresh():
        return [Parameter("a", np.array([1.0, 2.0])), Parameter("b", np.array([[3.0]]))]

    grads = [rng.normal(size=2) for _ in range(5)]

    pa = fresh()
    oa = Adam(pa)
    for g in grads[:3]:
        pa[0].grad[...] = g
        pa[1].grad[...] = g[0]
        oa.step(0.05)
    snap_params = [p.data.copy() for p in pa]
    snap_state = oa.state_dict()

    for g in grads[3:]:
        pa[0].grad[...] = g
        pa[1].grad[...] = g[0]
        oa.step(0.05)

    pb = fresh()
    for p, d in zip(pb, snap_params):
        p.data[...] = d
    ob = Adam(pb)
    ob.load_state_dict(snap_state)
    for g in grads[3:]:
        pb[0].grad[...] = g
        pb[1].grad[...] = g[0]
        ob.step(0.05)

    for x, y in zip(pa, pb):
        np.testing.assert_array_equal(x.data, y.data)


def test_adam_rejects_duplicate_names():
    with pytest.raises(ValueError):
        Adam([Parameter("w", np.zeros(2)), Parameter("w", np.zeros(3))])


def test_adam_load_rejects_mismatched_state():
    p = [Parameter("w", np.zeros(2))]
    opt = Adam(p)
    state = opt.state_dict()
    state["m"]["w"] = np.zeros(3)
    fresh = Adam([Parameter("w", np.zeros(2))])
    with pytest.raises(ValueError):
        fresh.load_state_dict(state)
