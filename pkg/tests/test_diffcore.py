import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slideagg import diffcore as dc
from slideagg.errors import ShapeError


def small_matrix(rng, shape, low=-1.5, high=1.5):
    return rng.uniform(low, high, size=shape)


class TestForward:
    def test_matmul_identity(self, rng):
        a = rng.standard_normal((2, 5))
        np.testing.assert_array_equal((dc.const(np.eye(2)) @ dc.const(a)).value, a)

    def test_relu(self):
        np.testing.assert_array_equal(dc.relu(dc.const([-3.0, 3.0])).value, [0.0, 3.0])

    def test_cross_entropy_uniform(self):
        assert dc.softmax_cross_entropy(dc.const([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_cross_entropy_stable(self):
        ce = dc.softmax_cross_entropy(dc.const([[1000.0, 0.0]]), [1]).item()
        assert ce == pytest.approx(1000.0)

    def test_reductions(self, rng):
        a = rng.standard_normal((3, 4))
        t = dc.const(a)
        np.testing.assert_allclose(dc.sum(t, axis=0).value, a.sum(0))
        np.testing.assert_allclose(dc.mean(t, axis=1).value, a.mean(1))
        np.testing.assert_allclose(dc.max(t, axis=0).value, a.max(0))
        assert dc.l2_squared(t).item() == pytest.approx(np.sum(a * a))
        assert dc.l1_norm(t).item() == pytest.approx(np.abs(a).sum())
        np.testing.assert_allclose(dc.softmax(t, axis=1).value.sum(1), 1.0)

    @pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.div])
    def test_shape_mismatch_names_both_shapes(self, op):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            op(dc.const(np.ones((2, 3))), dc.const(np.ones((3, 2))))

    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            dc.const(np.ones((2, 3))) @ dc.const(np.ones((2, 3)))

    def test_bias_is_the_only_broadcast(self):
        out = dc.add_bias(dc.const(np.zeros((2, 3))), dc.const([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.value, [[1, 2, 3], [1, 2, 3]])
        with pytest.raises(ShapeError):
            dc.add(dc.const(np.zeros((2, 3))), dc.const([1.0, 2.0, 3.0]))


class TestGrad:
    def test_square(self):
        x = dc.param(3.0)
        (g,) = dc.grad(x * x, [x])
        assert g.value == pytest.approx(6.0)

    def test_second_order_abs(self):
        theta = dc.param(1.5)
        (g,) = dc.grad(dc.square(theta), [theta], create_graph=True)
        (gg,) = dc.grad(dc.l1_norm(g), [theta])
        assert gg.value == pytest.approx(2.0)

    def test_second_order_fd(self):
        def f(ts):
            (g,) = dc.grad(dc.square(ts[0]), ts, create_graph=True)
            return dc.l1_norm(g)

        assert dc.fd_check(f, [np.array(1.5)]) < 1e-8

    def test_matmul_outer_product(self, rng):
        w = rng.standard_normal((3, 4))
        x = rng.standard_normal((4, 1))
        wt = dc.param(w)
        (g,) = dc.grad(dc.sum(wt @ dc.const(x)), [wt])
        np.testing.assert_allclose(g.value, np.ones((3, 1)) @ x.T)
        assert dc.fd_check(lambda ts: dc.sum(ts[0] @ dc.const(x)), [w]) < 1e-4

    def test_non_scalar_output(self):
        x = dc.param(np.ones(3))
        with pytest.raises(ShapeError):
            dc.grad(x * x, [x])

    def test_param_not_in_graph(self):
        x, y = dc.param(1.0), dc.param(2.0)
        with pytest.raises(ValueError, match="not in the graph"):
            dc.grad(x * x, [y])
        (gy,) = dc.grad(x * x, [y], allow_unused=True)
        assert gy.value == 0.0

    def test_constant_function(self):
        theta = [np.array([1.0, -2.0])]
        leaves = [dc.param(t) for t in theta]
        out = dc.sum(dc.const([3.0, 4.0]))
        (g,) = dc.grad(out, leaves, allow_unused=True)
        np.testing.assert_array_equal(g.value, 0.0)
        assert dc.fd_check(lambda ts: dc.sum(dc.const([3.0, 4.0])), theta) == 0.0

    def test_quadratic_form(self, rng):
        a = rng.standard_normal((4, 4))
        q = a @ a.T + np.eye(4)

        def f(ts):
            x = ts[0]
            return dc.sum(x * (dc.const(q) @ x))

        x0 = rng.standard_normal((4, 1))
        leaf = dc.param(x0)
        (g,) = dc.grad(f([leaf]), [leaf])
        np.testing.assert_allclose(g.value, 2 * q @ x0)
        assert dc.fd_check(f, [x0]) < 1e-6

    def test_tanh_network_20_params(self, rng):
        x = rng.standard_normal((5, 3))
        y = rng.standard_normal((5, 1))
        theta = [rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal((4, 1)), rng.standard_normal(1)]
        assert sum(t.size for t in theta) == 21

        def f(ts):
            w1, b1, w2, b2 = ts
            h = dc.tanh(dc.add_bias(dc.const(x) @ w1, b1))
            return dc.mean(dc.square(dc.add_bias(h @ w2, b2) - dc.const(y)))

        assert dc.fd_check(f, theta, h=1e-4) < 1e-4

    def test_graph_topological(self):
        x = dc.param(2.0)
        y = dc.tanh(x * x) + x
        graph = dc.Graph(y)
        position = {id(n): i for i, n in enumerate(graph.order)}
        for node in graph.order:
            for parent in node.parents:
                assert position[id(parent)] < position[id(node)]
        assert x in graph

    def test_no_grad(self):
        x = dc.param(2.0)
        with dc.no_grad():
            y = x * x
        assert not y.requires_grad

    def test_deterministic(self, rng):
        w = rng.standard_normal((3, 3))

        def run():
            leaf = dc.param(w)
            return dc.grad(dc.sum(dc.tanh(leaf @ leaf)), [leaf])[0].value

        assert np.array_equal(run(), run())


UNARY = {
    "tanh": dc.tanh,
    "sigmoid": dc.sigmoid,
    "exp": dc.exp,
    "log": lambda t: dc.log(dc.shift(dc.square(t), 0.5)),
    "square": dc.square,
    "abs": dc.abs,
    "relu": dc.relu,
    "softplus": dc.softplus,
    "softmax": lambda t: dc.softmax(t, axis=1),
    "max0": lambda t: dc.broadcast_to(dc.max(t, axis=0), (3, 3), axis=0),
    "mean": lambda t: dc.broadcast_to(dc.mean(t, axis=1), (3, 3), axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_first_order_ops(name, rng):
    fn = UNARY[name]
    w = dc.const(rng.standard_normal((3, 3)))
    for _ in range(5):
        theta = [small_matrix(rng, (3, 3))]
        err = dc.fd_check(lambda ts: dc.sum(fn(ts[0]) * w), theta)
        assert err < 1e-4, name


@pytest.mark.parametrize("name", ["tanh", "sigmoid", "exp", "log", "square", "softplus", "softmax"])
def test_second_order_ops(name, rng):
    fn = UNARY[name]
    w = dc.const(rng.standard_normal((3, 3)))

    def f(ts):
        (g,) = dc.grad(dc.sum(fn(ts[0]) * w), ts, create_graph=True)
        return dc.sum(dc.square(g)) + dc.l1_norm(g)

    for _ in range(3):
        assert dc.fd_check(f, [small_matrix(rng, (3, 3))]) < 1e-3, name


def test_binary_ops_first_and_second_order(rng):
    def f(ts):
        a, b = ts
        out = dc.sum((a * b + a / dc.shift(dc.square(b), 1.0) - b) @ a.T)
        return out

    def f2(ts):
        return dc.l2_squared(dc.add(*dc.grad(f(ts), ts, create_graph=True)))

    for _ in range(5):
        theta = [small_matrix(rng, (2, 3)), small_matrix(rng, (2, 3))]
        assert dc.fd_check(f, theta) < 1e-4
        assert dc.fd_check(f2, theta) < 1e-3


def test_cross_entropy_grad(rng):
    targets = [0, 2, 1]
    for _ in range(5):
        assert dc.fd_check(lambda ts: dc.softmax_cross_entropy(ts[0], targets), [rng.standard_normal((3, 4))]) < 1e-4


@given(st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_product_rule_property(a, b):
    x, y = dc.param(a), dc.param(b)
    gx, gy = dc.grad(x * y + dc.tanh(x), [x, y])
    assert gx.value == pytest.approx(b + 1 - math.tanh(a) ** 2, abs=1e-12)
    assert gy.value == pytest.approx(a, abs=1e-12)
