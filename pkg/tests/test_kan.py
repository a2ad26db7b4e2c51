"""Spline basis and KAN layers against interpolation oracles."""

import numpy as np
import pytest

from panorec.diffops import fd_gradcheck
from panorec.kan import SplineGrid, bspline_basis, KanLayer, KanStack


def test_degree0_one_hot():
    g = SplineGrid(order=0)
    B = bspline_basis(np.array(0.1), g)
    assert B.shape == (g.n_basis,)
    assert B.sum() == 1.0
    # interval containing 0.1: knots -3 + 1.2*m, m=2 gives [-0.6, 0.6)
    assert B[2] == 1.0


def test_partition_of_unity_interiors():
    g = SplineGrid()
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, size=500)
    B = bspline_basis(x, g)
    np.testing.assert_allclose(B.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_partition_of_unity_any_degree(degree):
    g = SplineGrid(order=degree)
    x = np.linspace(-2.99, 2.99, 101)
    B = bspline_basis(x, g)
    np.testing.assert_allclose(B.sum(-1), 1.0, atol=1e-12)


def test_partition_at_clamped_boundary():
    g = SplineGrid()
    B = bspline_basis(np.array([3.0, 5.0, -3.0, -10.0]), g)
    np.testing.assert_allclose(B.sum(-1), 1.0, atol=1e-12)


def test_local_support():
    g = SplineGrid()
    x = np.array(-2.8)  # deep in the first interior interval
    B = bspline_basis(x, g)
    # cubic basis spans order+1 knot intervals; far bases must be 0
    assert np.count_nonzero(B) <= g.order + 1
    assert B[-1] == 0.0


def test_basis_derivative_matches_fd():
    g = SplineGrid()
    rng = np.random.default_rng(1)
    x = rng.uniform(-2.5, 2.5, size=40)
    B, D = bspline_basis(x, g, with_deriv=True)
    h = 1e-6
    Bp = bspline_basis(x + h, g)
    Bm = bspline_basis(x - h, g)
    fd = (Bp - Bm) / (2 * h)
    err = np.abs(D - fd) / np.maximum(1.0, np.abs(fd))
    assert err.max() <= 1e-6


def test_basis_continuity_at_knots():
    g = SplineGrid()
    knots = g.grid_min + g.h * np.arange(1, g.grid_size)
    eps = 1e-10
    left = bspline_basis(knots - eps, g)
    right = bspline_basis(knots + eps, g)
    assert np.abs(left - right).max() <= 1e-9


def test_rejects_negative_order():
    with pytest.raises(ValueError):
        SplineGrid(order=-1)


def test_layer_bias_only():
    layer = KanLayer(3, 2)
    layer.coeff.data[:] = 0.0
    layer.base_weight.data[:] = 0.0
    layer.bias.data[:] = [1.5, -2.0]
    out = layer.forward(np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(out, [1.5, -2.0], atol=1e-15)


def test_layer_learns_identity_by_lstsq():
    # fit coefficients so the spline reproduces f(x) = x, then check
    # the layer output on interior points
    g = SplineGrid()
    xs = np.linspace(-3, 3, 200)
    B = bspline_basis(xs, g)
    c, *_ = np.linalg.lstsq(B, xs, rcond=None)
    layer = KanLayer(1, 1, grid=g)
    layer.coeff.data[0, 0] = c
    layer.base_weight.data[:] = 0.0
    layer.bias.data[:] = 0.0
    probe = np.linspace(-2.5, 2.5, 50)[:, None]
    out = layer.forward(probe)
    np.testing.assert_allclose(out[:, 0], probe[:, 0], atol=1e-6)


def test_layer_batched_equals_loop():
    rng = np.random.default_rng(2)
    layer = KanLayer(4, 3, rng=rng)
    X = rng.standard_normal((6, 4))
    batched = layer.forward(X)
    for i in range(6):
        np.testing.assert_allclose(layer.forward(X[i]), batched[i],
                                   atol=1e-12)


def test_layer_rejects_wrong_dim():
    with pytest.raises(ValueError):
        KanLayer(4, 3).forward(np.zeros(5))


def test_layer_gradient():
    rng = np.random.default_rng(3)
    layer = KanLayer(4, 3, rng=rng)
    x = rng.uniform(-2.5, 2.5, size=(5, 4))
    arrays = [x, layer.coeff.data, layer.base_weight.data, layer.bias.data]

    def grads(G):
        layer.zero_grad()
        layer.forward(x)
        gx = layer.backward(G)
        return [gx, layer.coeff.grad, layer.base_weight.grad,
                layer.bias.grad]

    worst = fd_gradcheck(lambda: layer.forward(x), grads, arrays,
                         n_probes=200, seed=4)
    assert worst <= 1e-4


def test_stack_single_layer_identity():
    rng = np.random.default_rng(4)
    stack = KanStack([3, 2], rng=rng)
    x = rng.standard_normal((4, 3))
    lone = stack.layers[0]
    np.testing.assert_array_equal(stack.forward(x), lone.forward(x))


def test_stack_two_bias_only_layers():
    stack = KanStack([2, 3, 2])
    for layer in stack.layers:
        layer.coeff.data[:] = 0.0
        layer.base_weight.data[:] = 0.0
    stack.layers[0].bias.data[:] = [0.7, -0.7, 0.2]
    stack.layers[1].bias.data[:] = [1.0, 2.0]
    x = np.zeros((1, 2))
    # inner output is its bias; outer sees zero coeff/base, so output
    # is exactly the outer bias
    np.testing.assert_allclose(stack.forward(x), [[1.0, 2.0]], atol=1e-15)
    # now give the outer layer nonzero base weights: the inner bias
    # must flow through SiLU exactly as a direct evaluation says
    rng = np.random.default_rng(5)
    stack.layers[1].base_weight.data[:] = rng.standard_normal((2, 3))
    inner = stack.layers[0].bias.data
    silu = inner / (1 + np.exp(-inner))
    want = stack.layers[1].bias.data + stack.layers[1].base_weight.data @ silu
    np.testing.assert_allclose(stack.forward(x)[0], want, atol=1e-12)


def test_stack_gradient():
    rng = np.random.default_rng(6)
    stack = KanStack([3, 4, 3], rng=rng)
    x = rng.uniform(-2, 2, size=(4, 3))
    params = [p.data for p in stack.params()]

    def grads(G):
        stack.zero_grad()
        stack.forward(x)
        gx = stack.backward(G)
        return [gx] + [p.grad for p in stack.params()]

    worst = fd_gradcheck(lambda: stack.forward(x), grads, [x] + params,
                         n_probes=220, seed=7)
    assert worst <= 1e-4


def test_stack_rejects_dim_mismatch():
    stack = KanStack([3, 4, 2])
    with pytest.raises(ValueError):
        stack.forward(np.zeros((2, 5)))
