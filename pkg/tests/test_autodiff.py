import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starbench import autodiff as ad
from starbench.nets import MLP


def test_affine_identity():
    out = ad.affine(ad.Var(np.array([1.0, 2.0])), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, [1.0, 2.0])


def test_tanh_fixed_point():
    assert ad.tanh(ad.Var(np.array(0.0))).data == 0.0


def test_zero_weight_mlp_returns_last_bias():
    net = MLP([3, 5, 2])
    for k in net.params:
        net.params[k][...] = 0.0
    net.params["l1.b"][...] = [0.25, -1.5]
    out = net.forward(np.array([[4.0, -2.0, 9.0]]))
    np.testing.assert_array_equal(out.data, [[0.25, -1.5]])


def test_square_gradient():
    g = ad.ComputeGraph(lambda x: ad.sum(ad.mul(x, x)), leaves=["x"])
    g.evaluate({"x": np.array([3.0])})
    assert g.backward(np.array(1.0))["x"][0] == 6.0


def test_tanh_sum_gradient_is_ones():
    _, (g,) = ad.grad(lambda x: ad.sum(ad.tanh(x)), np.zeros(4))
    np.testing.assert_array_equal(g, np.ones(4))


def test_backward_before_evaluate_raises():
    with pytest.raises(ad.AutodiffError):
        ad.ComputeGraph(lambda x: ad.sum(x), ["x"]).backward()


def test_unbound_leaf_raises():
    with pytest.raises(ad.AutodiffError):
        ad.ComputeGraph(lambda x, y: ad.sum(ad.add(x, y)), ["x", "y"]).evaluate({"x": np.ones(2)})


def test_shape_error_names_node():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.leaf(np.ones((2, 3))), ad.leaf(np.ones((2, 3))))


def test_non_finite_raises_with_node_id():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.leaf(np.array([-1.0])))


def test_check_gradients_linear_is_exact():
    assert ad.check_gradients(lambda x: ad.sum(x), np.array([0.3, -7.0, 2.0])) < 1e-10


def test_check_gradients_quadratic():
    _, (g,) = ad.grad(lambda x: ad.sum(ad.square(x)), np.ones(2))
    np.testing.assert_array_equal(g, [2.0, 2.0])
    assert ad.check_gradients(lambda x: ad.sum(ad.square(x)), np.ones(2)) < 1e-8


def test_check_gradients_rejects_non_finite_probe():
    with pytest.raises(ad.NonFiniteError):
        ad.check_gradients(lambda x: ad.sum(ad.log(x)), np.array([1e-6]), h=1e-5)


def test_gradient_has_leaf_shape():
    w = np.ones((3, 2))
    _, (gw,) = ad.grad(lambda w_: ad.sum(ad.matmul(np.ones((4, 3)), w_)), w)
    assert gw.shape == w.shape


def test_gaussian_log_prob_matches_closed_form():
    x, mu, ls = np.array([0.3, -1.0]), np.array([0.0, 0.5]), np.array([-0.2, 0.4])
    expected = np.sum(-0.5 * ((x - mu) / np.exp(ls)) ** 2 - ls - 0.5 * math.log(2 * math.pi))
    assert ad.gaussian_log_prob(x, mu, ls).data == pytest.approx(expected, abs=1e-14)


def _random_loss(rng):
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(1, 17)) for _ in range(depth + 1)]
    net = MLP(sizes, rng)
    target = rng.normal(size=sizes[-1])
    kind = rng.integers(3)
    if kind == 0:
        f = lambda x: ad.squared_error(net.forward(x), target)
    elif kind == 1:
        f = lambda x: ad.sum(ad.gaussian_log_prob(target, net.forward(x), np.full(sizes[-1], -0.3)))
    else:
        f = lambda x: ad.mean(ad.mul(ad.sigmoid(net.forward(x)), ad.exp(ad.tanh(net.forward(x)))))
    return f, sizes[0]


def test_random_mlp_losses_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(30):
        f, n_in = _random_loss(rng)
        worst = max(worst, ad.check_gradients(f, rng.normal(size=n_in)))
    assert worst < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
def test_gradient_of_sum_is_sum_of_gradients(xs, seed):
    x = np.array(xs)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=x.shape), rng.normal(size=x.shape)
    f1 = lambda v: ad.sum(ad.mul(ad.tanh(v), a))
    f2 = lambda v: ad.sum(ad.mul(ad.square(v), b))
    _, (g1,) = ad.grad(f1, x)
    _, (g2,) = ad.grad(f2, x)
    _, (g12,) = ad.grad(lambda v: ad.add(f1(v), f2(v)), x)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12, atol=1e-12)


def test_repeated_backward_is_bit_identical():
    rng = np.random.default_rng(0)
    net = MLP([4, 8, 2], rng)
    x = rng.normal(size=4)
    g = ad.ComputeGraph(lambda x: ad.sum(ad.tanh(net.forward(x))), ["x"])
    runs = []
    for _ in range(3):
        g.evaluate({"x": x})
        runs.append(g.backward()["x"])
    assert all(np.array_equal(runs[0], r) for r in runs[1:])


def test_shared_subexpression_visited_once():
    # y = x*x feeds both operands: d/dx (y + y) = 4x = 8 at x = 2 (16 if y were visited twice)
    _, (g,) = ad.grad(lambda x: (lambda y: ad.sum(ad.add(y, y)))(ad.mul(x, x)), np.array([2.0]))
    assert g[0] == 8.0


def test_broadcast_gradient_is_reduced():
    _, (gb,) = ad.grad(lambda b: ad.sum(ad.add(np.ones((5, 3)), b)), np.zeros(3))
    np.testing.assert_array_equal(gb, [5.0, 5.0, 5.0])


def test_stop_gradient_blocks_flow():
    _, (g,) = ad.grad(lambda x: ad.sum(ad.mul(ad.stop_gradient(x), x)), np.array([3.0]))
    assert g[0] == 3.0
