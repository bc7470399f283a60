"""Graph mechanics: topological order, accumulation, repeated calls."""

import numpy as np
import pytest

from fruitgrade import tensor as T
from fruitgrade.errors import DimensionError, NumericalError
from fruitgrade.tensor import Tensor


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3), np.float32))


def test_square_gradient():
    x = Tensor(np.array([[1.0, -2.0, 0.5]], np.float32), requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2.0 * x.data)


def test_shared_parent_accumulates():
    # z = x*x + x*x: both branches feed the same leaf
    x = Tensor(np.array([3.0], np.float32), requires_grad=True)
    y1 = T.mul(x, x)
    y2 = T.mul(x, x)
    T.backward(T.sum_all(T.add(y1, y2)))
    assert np.allclose(x.grad, 4.0 * 3.0)


def test_diamond_graph():
    x = Tensor(np.array([2.0], np.float32), requires_grad=True)
    a = T.mul(x, 3.0)
    b = T.mul(x, 5.0)
    out = T.sum_all(T.mul(a, b))  # 15 x^2 -> d/dx = 30 x
    T.backward(out)
    assert np.allclose(x.grad, 60.0)


def test_backward_twice_sums_exactly():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
    loss = T.sum_all(T.mul(x, x))
    T.backward(loss)
    once = x.grad.copy()
    T.backward(loss)
    assert np.array_equal(x.grad, once * 2)


def test_no_grad_leaf_stays_none():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    c = Tensor(np.ones((2, 2), np.float32))  # requires_grad defaults False
    T.backward(T.sum_all(T.mul(x, c)))
    assert x.grad is not None
    assert c.grad is None


def test_detach_blocks_gradient():
    x = Tensor(np.array([1.5], np.float32), requires_grad=True)
    d = T.mul(x, 2.0).detach()
    y = Tensor(np.array([1.0], np.float32), requires_grad=True)
    T.backward(T.sum_all(T.mul(d, y)))
    assert x.grad is None
    assert np.allclose(y.grad, 3.0)


def test_topo_order_parents_before_children():
    x = Tensor(np.ones(2, np.float32), requires_grad=True)
    a = T.mul(x, 2.0)
    b = T.add(a, 1.0)
    out = T.sum_all(T.mul(a, b))
    order = T.topo_order(out)
    pos = {id(t): i for i, t in enumerate(order)}
    # every parent appears before the node that consumes it
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert order[-1] is out


def test_deep_chain_no_recursion_limit():
    x = Tensor(np.array([1.0], np.float32), requires_grad=True)
    y = x
    for _ in range(5000):
        y = T.add(y, 0.001)
    T.backward(T.sum_all(y))
    assert np.allclose(x.grad, 1.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    with pytest.raises(DimensionError):
        T.backward(T.mul(x, 2.0))


def test_operator_sugar_matches_functions():
    a = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0], np.float32))
    assert np.array_equal((a + b).data, T.add(a, b).data)
    assert np.array_equal((a * b).data, T.mul(a, b).data)
    assert np.array_equal((a - b).data, np.array([-2.0, -2.0], np.float32))
    assert np.array_equal((-a).data, np.array([-1.0, -2.0], np.float32))


def test_assert_finite_raises_on_nan():
    x = Tensor(np.array([1.0, np.nan], np.float32))
    with pytest.raises(NumericalError):
        x.assert_finite("unit test")


def test_grad_check_linear_function_is_exact():
    # for f(x) = sum(x) at 0 the quotient is (h - (-h)) / (h - (-h)): exact
    x = Tensor(np.zeros(8, np.float32), requires_grad=True)
    assert T.grad_check(T.sum_all, x) < 1e-6


def test_grad_check_square_at_three():
    x = Tensor(np.array([3.0], np.float32), requires_grad=True)
    err = T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x)
    # analytic 6; central difference of x^2 is exact up to rounding
    assert err < 1e-4
    assert np.allclose(x.grad, 6.0)


def test_grad_check_central_difference_value():
    # read the numeric slope directly: (f(3+h) - f(3-h)) / (2h eff.) ~ 6
    h = 1e-3
    xp = np.float32(3.0) + np.float32(h)
    xm = np.float32(3.0) - np.float32(h)
    numeric = (float(xp) ** 2 - float(xm) ** 2) / (float(xp) - float(xm))
    assert abs(numeric - 6.0) < 1e-4


def test_grad_check_flags_wrong_gradient():
    def bad(t):
        # forward of x^2 but a backward that claims d/dx = x
        return T._node(np.float32((t.data ** 2).sum()), (t,),
                       lambda g: (g * t.data,))

    x = Tensor(np.array([2.0, -1.0], np.float32), requires_grad=True)
    assert T.grad_check(bad, x) > 0.3


def test_grad_check_restores_point():
    x = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    before = x.data.copy()
    T.grad_check(lambda t: T.sum_all(T.mul(t, t)), x)
    assert np.array_equal(x.data, before)


def test_grad_check_coords_subset():
    x = Tensor(np.zeros(10, np.float32), requires_grad=True)
    calls = []

    def f(t):
        calls.append(1)
        return T.sum_all(t)

    T.grad_check(f, x, coords=[0, 5])
    # 1 base eval + 2 per coordinate
    assert len(calls) == 1 + 2 * 2


def test_grad_check_rejects_vector_output():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(DimensionError):
        T.grad_check(lambda t: T.mul(t, 2.0), x)


def test_routing_capture_detects_branch_flip():
    x = Tensor(np.array([[0.5, -0.5]], np.float32))
    with T.capture_routing() as base:
        T.relu(x)
    with T.capture_routing() as same:
        T.relu(x)
    flipped = Tensor(np.array([[0.5, 0.5]], np.float32))
    with T.capture_routing() as other:
        T.relu(flipped)
    assert base.matches(same)
    assert not base.matches(other)


def test_precise_mode_restores_flag():
    assert not T._PRECISE
    with T.precise_mode():
        assert T._PRECISE
    assert not T._PRECISE
