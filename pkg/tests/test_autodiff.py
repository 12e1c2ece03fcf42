from __future__ import annotations

import math

import numpy as np
import pytest

import qroute.autodiff as ad
from qroute.autodiff import AdamState, ParameterStore, Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = f(*arrays)
            arr[i] = old - h
            dn = f(*arrays)
            arr[i] = old
            g[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def check(op, *shapes, rng=None, positive=False, weight=None, atol=1e-6):
    """Gradient of ``sum(op(*xs) * w)`` vs central differences."""
    rng = rng or np.random.default_rng(0)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]

    def value(*arrs):
        with ad.no_grad():
            y = op(*[Tensor(a) for a in arrs]).data
        return float(np.sum(y * w))

    leaves = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*leaves)
    w = weight if weight is not None else rng.normal(size=y.shape)
    ad.backward(ad.sum(y * w))
    fd = numeric_grad(value, arrays)
    for leaf, g in zip(leaves, fd):
        assert np.allclose(leaf.grad, g, atol=atol), (leaf.grad, g)


# -- elementwise and reductions ------------------------------------------------------------


@pytest.mark.parametrize(
    "op,shapes",
    [
        (ad.add, [(3, 4), (4,)]),
        (ad.sub, [(2, 1, 3), (4, 3)]),
        (ad.mul, [(3, 4), (3, 1)]),
        (ad.neg, [(5,)]),
        (ad.sin, [(3, 3)]),
        (ad.cos, [(3, 3)]),
        (ad.tanh, [(4, 2)]),
        (ad.exp, [(2, 5)]),
    ],
)
def test_elementwise_gradients(op, shapes):
    check(op, *shapes)


def test_div_and_log_gradients():
    check(ad.div, (3, 4), (4,), positive=True)
    check(ad.log, (6,), positive=True)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(4)
    x = rng.normal(size=20)
    x[np.abs(x) < 0.05] = 0.3
    leaf = ad.tensor(x, requires_grad=True)
    ad.backward(ad.sum(ad.relu(leaf)))
    assert np.array_equal(leaf.grad, (x > 0).astype(float))


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (-1, True), ((0, 2), False)])
def test_sum_mean_gradients(axis, keepdims):
    check(lambda a: ad.sum(a, axis=axis, keepdims=keepdims), (2, 3, 4))
    check(lambda a: ad.mean(a, axis=axis, keepdims=keepdims), (2, 3, 4))


def test_shape_ops_gradients():
    check(lambda a: ad.reshape(a, (6, 2)), (3, 4))
    check(lambda a: ad.swapaxes(a, 0, 2), (2, 3, 4))
    check(lambda a, b: ad.concat([a, b], axis=-1), (2, 3), (2, 5))
    check(lambda a, b: ad.stack([a, b], axis=0), (2, 3), (2, 3))
    check(lambda a: a[1:, ::2], (4, 5))


def test_getitem_with_repeated_indices_accumulates():
    leaf = ad.tensor(np.arange(4.0), requires_grad=True)
    ad.backward(ad.sum(leaf[np.array([0, 0, 2])]))
    assert np.array_equal(leaf.grad, [2.0, 0.0, 1.0, 0.0])


# -- matmul ------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "sa,sb",
    [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 1, 3, 4), (5, 4, 2))],
)
def test_matmul_gradients_with_broadcasting(sa, sb):
    check(ad.matmul, sa, sb)


def test_matmul_shape_error_message():
    with pytest.raises(ValueError, match="incompatible shapes"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    # vectors must be lifted to matrices explicitly
    with pytest.raises(ValueError, match="incompatible shapes"):
        ad.matmul(Tensor(np.ones(4)), Tensor(np.ones((4, 3))))


def test_gather_rows():
    rng = np.random.default_rng(1)
    idx = np.array([[0, 2], [1, 1]])
    check(lambda a: ad.gather_rows(a, idx), (2, 2, 3, 4), rng=rng)
    a = rng.normal(size=(2, 3, 4))
    got = ad.gather_rows(Tensor(a), np.array([2, 0])).data
    assert np.array_equal(got, np.stack([a[0, 2], a[1, 0]]))


# -- softmax / masking -------------------------------------------------------------------------


def test_masked_softmax_examples():
    assert np.allclose(ad.masked_softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
    out = ad.masked_softmax(Tensor(np.array([5.0, -np.inf, 5.0]))).data
    assert np.allclose(out, [0.5, 0.0, 0.5])
    out = ad.masked_softmax(Tensor(np.array([1.0, 7.0, 1.0])), mask=np.array([False, True, False])).data
    assert np.allclose(out, [0.5, 0.0, 0.5])


def test_masked_softmax_all_masked_row_raises():
    with pytest.raises(ValueError, match="entirely masked"):
        ad.masked_softmax(Tensor(np.zeros((2, 3))), mask=np.array([[False, True, True], [True, True, True]]))


def test_masked_softmax_gradient_and_zero_grad_at_mask():
    mask = np.array([[False, True, False, False], [True, False, False, True]])
    check(lambda a: ad.masked_softmax(ad.masked_fill(a, mask), mask), (2, 4))
    leaf = ad.tensor(np.random.default_rng(0).normal(size=(2, 4)), requires_grad=True)
    y = ad.masked_softmax(ad.masked_fill(leaf, mask), mask)
    ad.backward(ad.sum(y * np.arange(8.0).reshape(2, 4)))
    assert np.all(leaf.grad[mask] == 0)
    assert np.allclose(y.data.sum(axis=-1), 1.0)


def test_softmax_extreme_logits_are_stable():
    y = ad.masked_softmax(Tensor(np.array([1000.0, 0.0, -1000.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == pytest.approx(1.0)


# -- batch norm / dropout ------------------------------------------------------------------------


def test_batchnorm_train_gradient():
    rng = np.random.default_rng(2)
    rm, rv = np.zeros(3), np.ones(3)
    check(lambda x, w, b: ad.batchnorm(x, w, b, rm.copy(), rv.copy(), train=True), (4, 5, 3), (3,), (3,), rng=rng, atol=1e-5)
    check(lambda x, w, b: ad.batchnorm(x, w, b, rm.copy(), rv.copy(), train=False), (4, 3), (3,), (3,), rng=rng)


def test_batchnorm_normalizes_and_tracks_running_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 5.0, size=(64, 10, 4))
    rm, rv = np.zeros(4), np.ones(4)
    y = ad.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, train=True).data
    flat = y.reshape(-1, 4)
    assert np.allclose(flat.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(flat.std(axis=0), 1.0, atol=1e-6)
    xf = x.reshape(-1, 4)
    assert np.allclose(rm, 0.1 * xf.mean(axis=0))
    assert np.allclose(rv, 0.9 + 0.1 * xf.var(axis=0, ddof=1))
    # eval mode uses the buffers and leaves them alone
    before = rm.copy()
    ad.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, train=False)
    assert np.array_equal(rm, before)


def test_batchnorm_shape_check():
    with pytest.raises(ValueError):
        ad.batchnorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(3)), np.zeros(3), np.ones(3), True)


def test_dropout_behaviour():
    x = Tensor(np.ones((1000,)))
    assert ad.dropout(x, 0.3, None, train=False) is x
    y = ad.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.1
    with pytest.raises(ValueError):
        ad.dropout(x, 0.5, None, train=True)
    leaf = ad.tensor(np.ones(50), requires_grad=True)
    out = ad.dropout(leaf, 0.5, np.random.default_rng(1), train=True)
    ad.backward(ad.sum(out))
    assert np.array_equal(leaf.grad, out.data)


# -- engine ------------------------------------------------------------------------------------


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.tensor(np.ones(3), requires_grad=True) * 2.0)


def test_gradients_accumulate_until_cleared():
    store = ParameterStore()
    w = store.register("w", np.array([1.0, 2.0]))
    ad.backward(ad.sum(w * 3.0))
    ad.backward(ad.sum(w * 3.0))
    assert np.array_equal(w.grad, [6.0, 6.0])
    store.zero_grad()
    assert w.grad is None


def test_shared_subexpression_gradient():
    x = ad.tensor(np.array(0.7), requires_grad=True)
    y = ad.sin(x)
    ad.backward(y * y + y)
    assert x.grad == pytest.approx(2 * math.sin(0.7) * math.cos(0.7) + math.cos(0.7))


def test_deep_graph_does_not_recurse():
    x = ad.tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == 1.0


def test_no_grad_builds_no_graph():
    x = ad.tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


# -- parameter store / adam ---------------------------------------------------------------------


def test_store_copy_is_detached_and_load_validates():
    s = ParameterStore()
    s.register("a", np.zeros((2, 2)))
    s.register_buffer("bn.running_mean", np.zeros(2))
    c = s.copy()
    c["a"].data += 1
    c.buffers["bn.running_mean"] += 1
    assert np.all(s["a"].data == 0) and np.all(s.buffers["bn.running_mean"] == 0)
    with pytest.raises(ValueError, match="shape"):
        s.load_arrays({"a": np.zeros(3)})
    with pytest.raises(ValueError, match="names differ"):
        s.load_arrays({"b": np.zeros((2, 2))})
    with pytest.raises(KeyError):
        s.register("a", np.zeros(1))


def test_adam_first_step_moves_by_lr_times_sign():
    s = ParameterStore()
    p = s.register("p", np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e-3])
    st = AdamState()
    ad.adam_step(s, st, lr=0.01)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g) (up to eps)
    assert np.allclose(p.data, [0.99, -1.99, 2.99], atol=1e-7)
    assert p.grad is None and st.step == 1


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    s = ParameterStore()
    p = s.register("p", rng.normal(size=4))
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    st = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=4)
        p.grad = g.copy()
        ad.adam_step(s, st, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-13)


def test_adam_minimizes_quadratic():
    s = ParameterStore()
    p = s.register("p", np.array([3.0, -2.0]))
    st = AdamState()
    for _ in range(2000):
        ad.backward(ad.sum(p * p))
        ad.adam_step(s, st, lr=0.05)
    assert np.allclose(p.data, 0.0, atol=1e-2)


def test_adam_rejects_non_finite_gradient():
    s = ParameterStore()
    p = s.register("enc.w", np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="enc.w"):
        ad.adam_step(s, AdamState(), 0.1)
