import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ignoreattn import autograd, gradcheck, ops
from ignoreattn.attention import Inversion, SEBlock
from ignoreattn.autograd import Variable, no_grad, numeric_grad, record
from ignoreattn.nn import Linear


def leaf(x):
    return Variable(np.asarray(x, dtype=float), requires_grad=True)


def test_product_rule_scalar():
    a, b = leaf(3.0), leaf(-2.0)
    ops.mul(a, b).backward()
    assert a.grad == -2.0 and b.grad == 3.0


def test_sigmoid_at_zero():
    x = leaf(0.0)
    ops.sigmoid(x).backward()
    assert x.grad == 0.25


def test_broadcast_mul_sums_over_stretched_axes(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(3, 1)))
    ops.sum(ops.mul(a, b)).backward()
    np.testing.assert_allclose(b.grad, a.value.sum(axis=(0, 2))[:, None], rtol=1e-14)

    def f(bv):
        return ops.sum(ops.mul(a.value, bv))
    np.testing.assert_allclose(b.grad, numeric_grad(f, b.value), rtol=1e-8)


def test_sum_and_square():
    x = leaf([1.0, 2.0, 3.0])
    ops.sum(x).backward()
    assert x.grad.tolist() == [1, 1, 1]
    x.zero_grad()
    ops.sum(ops.mul(x, x)).backward()
    assert x.grad.tolist() == [2, 4, 6]


def test_unregistered_primitive():
    with pytest.raises(KeyError):
        record("no-such-op", [leaf(1.0)], np.array(1.0))


def test_seed_shape_and_root_errors():
    x = leaf(np.ones(3))
    y = ops.scale(x, 2.0)
    with pytest.raises(ValueError):
        y.backward()
    with pytest.raises(ValueError):
        y.backward(np.ones(2))
    with pytest.raises(ValueError):
        Variable(np.ones(())).backward()
    y.backward(np.array([1.0, 0.0, 2.0]))
    assert x.grad.tolist() == [2.0, 0.0, 4.0]


def test_backward_twice_doubles_exactly(rng):
    x = leaf(rng.normal(size=(3, 4)))
    w = leaf(rng.normal(size=(4, 2)))
    loss = ops.sum(ops.sigmoid(ops.matmul(x, w)))
    loss.backward()
    g1 = x.grad.copy(), w.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2 * g1[0]) and np.array_equal(w.grad, 2 * g1[1])


def test_unreached_variables_keep_zero_grad():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    _ = ops.mul(b, 2.0)
    ops.sum(ops.exp(a)).backward()
    assert not b.has_grad and np.array_equal(b.grad, np.zeros(2))


def test_reduce_sum_and_broadcast_are_adjoint(rng):
    # <sum(x), u> == <x, broadcast(u)> and backward of each matches the other's forward
    x = rng.normal(size=(2, 3, 4))
    u = rng.normal(size=(3, 1))
    xv = leaf(x)
    ops.sum(ops.mul(ops.reshape(ops.sum(xv, axes=(0, 2), keepdims=True), (3, 1)), u)).backward()
    np.testing.assert_array_equal(xv.grad, np.broadcast_to(u.reshape(1, 3, 1), x.shape))
    uv = leaf(u)
    ops.sum(ops.mul(ops.add(uv, np.zeros(x.shape)), x)).backward()
    np.testing.assert_allclose(uv.grad, x.sum(axis=(0, 2))[:, None], rtol=1e-14)


def test_max_routes_to_first_argmax():
    x = leaf([[1.0, 5.0, 5.0, 2.0]])
    ops.max(x, axes=1).backward(np.array([1.0]))
    assert x.grad.tolist() == [[0, 1, 0, 0]]


def test_intermediates_only_keep_grads_when_retained():
    x = leaf([1.0, 2.0])
    h = ops.scale(x, 3.0)
    k = ops.scale(x, 2.0).retain_grad()
    ops.sum(ops.add(ops.mul(h, h), k)).backward()
    assert not h.has_grad
    assert k.grad.tolist() == [1.0, 1.0]
    assert x.grad.tolist() == [2 * 9 * 1 + 2, 2 * 9 * 2 + 2]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = ops.exp(x)
    assert y.node is None and not y.requires_grad


def test_graph_is_freed(rng):
    import gc
    import weakref
    x = leaf(rng.normal(size=3))
    y = ops.exp(ops.sigmoid(x))
    ref = weakref.ref(y)
    del y
    gc.collect()
    assert ref() is None


def test_numeric_grad_examples():
    assert numeric_grad(lambda v: ops.sum(ops.mul(v, v)), [3.0])[0] == pytest.approx(6.0, abs=1e-6)
    assert numeric_grad(lambda v: ops.sum(ops.sigmoid(v)), [0.0])[0] == pytest.approx(0.25, abs=1e-10)
    with pytest.raises(ValueError):
        numeric_grad(lambda v: Variable(np.ones(2)), [0.0])
    with pytest.raises(ArithmeticError):
        numeric_grad(lambda v: Variable(np.array(np.inf)), [0.0])
    with pytest.raises(ValueError):
        numeric_grad(lambda v: ops.sum(v), [0.0], eps=0)


def test_two_layer_mlp_matches_numeric(rng):
    l1, l2 = Linear(5, 7, "l1", 3), Linear(7, 2, "l2", 3)
    x = rng.normal(size=(4, 5))

    def loss():
        return ops.softmax_cross_entropy(l2(ops.relu(l1(x))), [0, 1, 1, 0])

    loss().backward()
    for p in l1.parameters() + l2.parameters():
        orig = p.value

        def f(arr, p=p):
            p.value = arr
            return loss()
        num = numeric_grad(f, orig)
        p.value = orig
        assert gradcheck.relative_error(p.grad, num) < 1e-4


def test_se_ign3_block_gradient(rng):
    block = SEBlock(8, 16, Inversion("t3"), "se", 5)
    x = leaf(rng.normal(size=(2, 8, 4, 4)))
    err = gradcheck.check(lambda: block(x), [x] + block.parameters(), rng)
    assert err < 1e-4


def test_every_registered_primitive_has_a_gradcheck_case():
    assert set(autograd.registered_primitives()) <= set(gradcheck.PRIMITIVES)


def test_corrupted_backward_rule_is_caught(monkeypatch):
    good = autograd.backward_rule("sigmoid")

    def bad(g, a, out):
        (ga,) = good(g, a, out)
        return (ga * 1.01,)
    monkeypatch.setitem(autograd._RULES, "sigmoid", bad)
    res = gradcheck.run_case("sigmoid", trials=2)
    assert not res.passed and res.max_rel_error > 1e-3


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
@settings(max_examples=40, deadline=None)
def test_property_tanh_like_chain_matches_numeric(x):
    def f(v):
        return ops.sum(ops.mul(ops.sigmoid(v), ops.exp(ops.scale(v, 0.3))))
    xv = leaf(x)
    f(xv).backward()
    assert gradcheck.relative_error(xv.grad, numeric_grad(f, x)) < 1e-6


def test_dropped_graph_freed_without_cycle_collector():
    import gc
    import weakref

    w = Variable(np.ones((4, 4)), requires_grad=True)
    gc.disable()
    try:
        h = ops.sigmoid(ops.matmul(w, w))
        loss = ops.sum(ops.mul(h, h))
        loss.backward()
        probe = weakref.ref(h)
        del h, loss
        assert probe() is None
    finally:
        gc.enable()
    assert w.has_grad
