import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condepth import tapecore as tc
from condepth.tapecore import ConfigError, OptimConfig, ParamStore, PartitionError, Tensor, UsageError


def _num_grad(f, x, h=1e-6):
    """Central differences of scalar ``f(x)`` over every coordinate of ``x``."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _tape_grad(build, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with tc.Tape() as tape:
        out = build(*ts)
    grads = tc.backward(tape, out, {str(i): t for i, t in enumerate(ts)})
    return [grads[str(i)] for i in range(len(ts))]


UNARY = {
    "sigmoid": (tc.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "silu": (tc.silu, lambda x: x / (1 + np.exp(-x))),
    "softplus": (tc.softplus, lambda x: np.log1p(np.exp(x))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_values_and_grads(name):
    op, ref = UNARY[name]
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(op(Tensor(x)).data, ref(x), rtol=1e-12)
    weights = rng.normal(size=x.shape)
    (g,) = _tape_grad(lambda t: tc.tsum(tc.mul(op(t), weights)), x)
    num = _num_grad(lambda a: float(np.sum(ref(a) * weights)), x.copy())
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_relu_grad_masks_negatives():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    (g,) = _tape_grad(lambda t: tc.tsum(tc.relu(t)), x)
    np.testing.assert_array_equal(g, [0, 0, 1, 1])


def test_huber_matches_piecewise_definition():
    e = np.array([-3.0, -1.0, -0.2, 0.0, 0.7, 2.5])
    out = tc.huber(Tensor(e), np.zeros_like(e), delta=1.0).data
    expected = [2.5, 0.5, 0.02, 0.0, 0.245, 2.0]
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    (g,) = _tape_grad(lambda t: tc.tsum(tc.huber(t, 0.0, 1.0)), e)
    np.testing.assert_allclose(g, np.clip(e, -1, 1))


def test_matmul_and_layer_norm_grads():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    lw, lb = rng.normal(size=4), rng.normal(size=4)
    c = rng.normal(size=(2, 3, 5))

    def f_np(x_, w_):
        mu = x_.mean(-1, keepdims=True)
        var = ((x_ - mu) ** 2).mean(-1, keepdims=True)
        z = (x_ - mu) / np.sqrt(var + 1e-5) * lw + lb
        return float(np.sum((z @ w_) * c))

    gx, gw = _tape_grad(lambda a, b: tc.tsum(tc.mul(tc.matmul(
        tc.layer_norm(a, Tensor(lw), Tensor(lb)), b), c)), x, w)
    np.testing.assert_allclose(gx, _num_grad(lambda a: f_np(a, w), x.copy()), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gw, _num_grad(lambda b: f_np(x, b), w.copy()), rtol=1e-5, atol=1e-8)


def test_masked_softmax_zeroes_masked_entries():
    x = Tensor(np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]))
    mask = np.array([[True, True, False], [True, False, False]])
    y = tc.softmax(x, mask=mask).data
    np.testing.assert_allclose(y[0], [1 / (1 + math.e), math.e / (1 + math.e), 0.0])
    np.testing.assert_array_equal(y[1], [1.0, 0.0, 0.0])


def test_cross_entropy_against_log_softmax():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 5, 7))
    targets = rng.integers(0, 7, (2, 5))
    ls = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -np.take_along_axis(ls, targets[..., None], -1)[..., 0]
    np.testing.assert_allclose(tc.cross_entropy(Tensor(logits), targets).data, expected, rtol=1e-12)
    (g,) = _tape_grad(lambda t: tc.mean(tc.cross_entropy(t, targets)), logits)
    num = _num_grad(lambda a: float(np.mean(
        -np.take_along_axis(a - np.log(np.exp(a).sum(-1, keepdims=True)), targets[..., None], -1))),
        logits.copy())
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


def test_cosine_similarity_values_and_eps_branch():
    x = Tensor(np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))
    y = Tensor(np.array([[0.0, 1.0], [-1.0, -1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(tc.cosine_similarity(x, y).data, [0.0, -1.0, 0.0], atol=1e-15)
    # zero-norm row: denominator clamped, gradient finite
    (gx, gy) = _tape_grad(lambda a, b: tc.tsum(tc.cosine_similarity(a, b)), x.data, y.data)
    assert np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))
    np.testing.assert_allclose(gx[2], y.data[2] / 1e-8)


def test_cosine_grad_matches_fd():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    ga, _ = _tape_grad(lambda p, q: tc.tsum(tc.cosine_similarity(p, q)), a, b)

    def f(p):
        return float(np.sum((p * b).sum(-1) / (np.linalg.norm(p, axis=-1) * np.linalg.norm(b, axis=-1))))

    np.testing.assert_allclose(ga, _num_grad(f, a.copy()), rtol=1e-6, atol=1e-9)


def test_straight_through_forward_is_exact_and_backward_is_identity():
    p = np.array([0.3, 0.9999999999999999, 0.1])
    m = np.array([1.0, 1.0, 0.0])
    out = tc.straight_through(m, Tensor(p))
    np.testing.assert_array_equal(out.data, m)
    w = np.array([2.0, -1.0, 5.0])
    (g,) = _tape_grad(lambda t: tc.tsum(tc.mul(tc.straight_through(m, t), w)), p)
    np.testing.assert_array_equal(g, w)


def test_stop_gradient_blocks_adjoint():
    (g,) = _tape_grad(lambda t: tc.add(tc.tsum(tc.stop_gradient(t)), tc.tsum(tc.mul(t, 0.0))),
                      np.ones(3))
    np.testing.assert_array_equal(g, 0.0)


def test_no_tape_records_nothing():
    t = Tensor(np.ones(3), requires_grad=True)
    with tc.Tape() as tape:
        with tc.no_tape():
            tc.mul(t, 2.0)
        assert len(tape) == 0
        tc.mul(t, 2.0)
    assert len(tape) == 1


def test_backward_rejects_non_scalar_and_zero_fills_unreached():
    t = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(2), requires_grad=True)
    with tc.Tape() as tape:
        y = tc.mul(t, 2.0)
    with pytest.raises(UsageError):
        tc.backward(tape, y, {"t": t})
    with tc.Tape() as tape:
        s = tc.tsum(t)
    g = tc.backward(tape, s, {"t": t, "u": u})
    np.testing.assert_array_equal(g["u"], np.zeros(2))


def test_shape_errors():
    with pytest.raises(ConfigError):
        tc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ConfigError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_add_mul_grads(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rows, cols))
    b = rng.normal(size=(1, cols))
    ga, gb = _tape_grad(lambda x, y: tc.tsum(tc.mul(tc.add(x, y), y)), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(gb, (a + 2 * b).sum(0, keepdims=True), rtol=1e-12)


def test_getitem_and_embedding_accumulate_repeats():
    w = np.arange(6.0).reshape(3, 2)
    ids = np.array([[0, 2, 0]])
    (g,) = _tape_grad(lambda t: tc.tsum(tc.embedding(t, ids)), w)
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])
    (g,) = _tape_grad(lambda t: tc.tsum(t[np.array([1, 1, 2])]), np.arange(4.0))
    np.testing.assert_array_equal(g, [0, 2, 1, 0])


# ------------------------------------------------------------------ AdamW

def test_lr_schedule_endpoints():
    cfg = OptimConfig(lr=1e-3, warmup_steps=10, total_steps=110, final_lr_fraction=0.01)
    assert tc.lr_at(5, cfg) == pytest.approx(5e-4)
    assert tc.lr_at(10, cfg) == pytest.approx(1e-3)
    assert tc.lr_at(60, cfg) == pytest.approx(1e-5 + (1e-3 - 1e-5) * 0.5)
    assert tc.lr_at(110, cfg) == pytest.approx(1e-5)
    assert tc.lr_at(500, cfg) == pytest.approx(1e-5)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = tc.clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6])
    same, _ = tc.clip_global_norm(grads, 10.0)
    np.testing.assert_array_equal(same["b"], [4.0])


def test_adamw_matches_reference_recursion():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=5)
    store = ParamStore({"w": Tensor(w0.copy()), "f": Tensor(np.ones(2))}, ["w"])
    cfg = OptimConfig(lr=0.01, weight_decay=0.1, warmup_steps=1, total_steps=100)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for step in range(1, 6):
        g = rng.normal(size=5)
        lr = tc.adamw_step(store, {"w": g}, step, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w * (1 - lr * 0.1) - lr * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
        np.testing.assert_allclose(store["w"].data, w, rtol=1e-12)
    np.testing.assert_array_equal(store["f"].data, np.ones(2))


def test_adamw_partition_errors():
    store = ParamStore({"w": Tensor(np.ones(2)), "f": Tensor(np.ones(2))}, ["w"])
    cfg = OptimConfig(warmup_steps=1, total_steps=10)
    with pytest.raises(PartitionError):
        tc.adamw_step(store, {"w": np.ones(2), "f": np.ones(2)}, 1, cfg)
    with pytest.raises(PartitionError):
        tc.adamw_step(store, {}, 1, cfg)
    with pytest.raises(ConfigError):
        ParamStore({"w": Tensor(np.ones(2))}, ["nope"])


def test_fingerprint_tracks_frozen_data():
    store = ParamStore({"w": Tensor(np.ones(2)), "f": Tensor(np.ones(2))}, ["w"])
    before = store.fingerprint()
    store["w"].data = np.zeros(2)
    assert store.fingerprint() == before
    store["f"].data = np.zeros(2)
    assert store.fingerprint() != before


def test_finite_difference_check_detects_wrong_gradient():
    w = Tensor(np.array([1.0, 2.0]))

    def bad():
        # value is sum(w^2) but the recorded adjoint is halved
        return tc.mul(tc.tsum(tc.mul(w, tc.stop_gradient(w))), 1.0)

    good = tc.finite_difference_check(lambda: tc.tsum(tc.mul(w, w)), {"w": w})
    assert good.ok(1e-6)
    assert not tc.finite_difference_check(bad, {"w": w}).ok(1e-2)
