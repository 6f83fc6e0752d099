from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aeroinr.tensorcore import (AdamState, AutodiffError, NonFiniteError, ShapeError, Tape, Tensor,
                                UnsupportedPrimitiveError, adam_update, concat, const,
                                grad_through_inner_loop, value_and_grad)

from conftest import central_diff, rel_err


def _mlp_loss(W1, b1, W2, x, y):
    h = (const(x) @ W1 + b1).silu()
    return (h @ W2 - y).sum_sq().scale(0.5)


def _np_mlp_loss(W1, b1, W2, x, y):
    a = x @ W1 + b1
    h = a / (1 + np.exp(-a))
    return 0.5 * np.sum((h @ W2 - y) ** 2)


def test_small_mlp_gradient_matches_finite_differences(rng):
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    params = [rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2))]
    val, grads = value_and_grad(lambda *p: _mlp_loss(*p, x, y), params)
    assert val == pytest.approx(_np_mlp_loss(*params, x, y), rel=1e-14)
    fd = central_diff(lambda *p: _np_mlp_loss(*p, x, y), [p.copy() for p in params])
    for g, f in zip(grads, fd):
        assert rel_err(g, f) < 1e-7


@pytest.mark.parametrize("op,np_op", [
    (lambda t: t.sin().sum(), lambda a: np.sin(a).sum()),
    (lambda t: t.cos().sum(), lambda a: np.cos(a).sum()),
    (lambda t: t.sigmoid().sum(), lambda a: (1 / (1 + np.exp(-a))).sum()),
    (lambda t: t.mean(), lambda a: a.mean()),
    (lambda t: (t * t).sum(axis=0).sum_sq(), lambda a: ((a * a).sum(0) ** 2).sum()),
    (lambda t: t.T.reshape(-1).slice(0, 1, 5).sum_sq(), lambda a: (a.T.reshape(-1)[1:5] ** 2).sum()),
    (lambda t: concat([t, t.scale(2.0)], axis=0).sum_sq(), lambda a: 5 * (a ** 2).sum()),
    (lambda t: (t.broadcast_to((2, 3, 4)) * t).sum(), lambda a: 2 * (a * a).sum()),
])
def test_primitive_gradients(op, np_op, rng):
    a = rng.normal(size=(3, 4))
    _, (g,) = value_and_grad(op, [a])
    (fd,) = central_diff(np_op, [a.copy()])
    assert rel_err(g, fd) < 1e-7


def test_second_derivative_of_cubic():
    # d/dx of (d/dx x^3) = 6x, computed by differentiating a recorded gradient
    x0 = np.array([0.7, -1.3])
    with Tape() as tape:
        x = tape.watch(x0)
        y = (x * x * x).sum()
        (g,) = tape.grad(y, [x], create_graph=True)
        (h,) = tape.grad(g.sum(), [x])
    np.testing.assert_allclose(g.data, 3 * x0 ** 2, rtol=1e-14)
    np.testing.assert_allclose(h.data, 6 * x0, rtol=1e-14)


def test_inner_loop_matches_finite_differences_of_unrolled_objective():
    rng = np.random.default_rng(3)
    A, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 1))

    def loss(W, z):
        return (const(A) @ (W * z) - b).sum_sq()

    def unrolled(W):
        z = np.zeros((3, 1))
        for _ in range(3):
            z = z - 0.05 * (2 * W * (A.T @ (A @ (W * z) - b)))
        return np.sum((A @ (W * z) - b) ** 2)

    W = rng.normal(size=(3, 1))
    val, (g,), z = grad_through_inner_loop(loss, 3, 0.05, [W], np.zeros((3, 1)))
    assert val == pytest.approx(unrolled(W), rel=1e-12)
    (fd,) = central_diff(unrolled, [W.copy()])
    assert rel_err(g, fd) < 1e-7
    _, (g1,), _ = grad_through_inner_loop(loss, 3, 0.05, [W], np.zeros((3, 1)), first_order=True)
    assert rel_err(g1, fd) > 1e-3


def test_first_order_on_frozen_quadratic_is_plain_gradient_descent():
    c = np.array([1.0, -2.0, 0.5])

    def loss(w, z):
        return (z - const(c)).sum_sq() + w.sum_sq().scale(0.0)

    z = np.zeros(3)
    for _ in range(4):
        z = z - 0.1 * 2 * (z - c)
    _, _, z_ad = grad_through_inner_loop(loss, 4, 0.1, [np.ones(1)], np.zeros(3), first_order=True)
    np.testing.assert_allclose(z_ad, z, rtol=0, atol=1e-15)


def test_adam_matches_reference_update():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    st_ = AdamState.zeros_like([p])
    (p1,), st1 = adam_update([p], [g], st_, lr=0.1)
    m = 0.1 * g
    v = 0.001 * g * g
    ref = p - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    np.testing.assert_allclose(p1, ref, rtol=1e-15)
    assert st1.step == 1 and st_.step == 0


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -4.0])]
    s = AdamState.zeros_like(p)
    for _ in range(2000):
        _, g = value_and_grad(lambda w: w.sum_sq(), p)
        p, s = adam_update(p, g, s, 0.05)
    assert np.abs(p[0]).max() < 1e-3


def test_nonfinite_value_reports_node_and_op():
    with pytest.raises(NonFiniteError) as ei, np.errstate(over="ignore"):
        value_and_grad(lambda w: (w.scale(1e308) * w.scale(1e308)).sum(), [np.ones(2)])
    assert ei.value.op == "mul"
    assert isinstance(ei.value.node_id, int)


def test_unsupported_primitives_raise():
    t = Tensor(np.ones(2))
    with pytest.raises(UnsupportedPrimitiveError):
        np.exp(t)
    with pytest.raises(UnsupportedPrimitiveError):
        t ** 2
    with pytest.raises(UnsupportedPrimitiveError):
        t / t


def test_grad_requires_scalar_and_recorded_output():
    with Tape() as tape:
        x = tape.watch(np.ones(3))
        y = x * x
        with pytest.raises(ShapeError):
            tape.grad(y, [x])
    with pytest.raises(AutodiffError):
        tape.grad(Tensor(1.0), [x])


def test_replay_is_bitwise():
    with Tape() as tape:
        x = tape.watch(np.linspace(-1, 1, 6).reshape(2, 3))
        y = (x @ const(np.ones((3, 2)))).silu().sum_sq()
    vals = tape.replay()
    assert np.array_equal(vals[-1], y.data)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(-2, 2))
def test_gradient_is_linear_in_loss_scale(xs, c):
    x = np.array(xs)
    _, (g1,) = value_and_grad(lambda t: t.sin().sum(), [x])
    _, (g2,) = value_and_grad(lambda t: t.sin().sum().scale(c), [x])
    np.testing.assert_allclose(g2, c * g1, rtol=1e-12, atol=1e-15)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_sum_rule(n, m, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(n, m))
    _, (gs,) = value_and_grad(lambda t: t.sin().sum() + t.sum_sq(), [a])
    _, (g1,) = value_and_grad(lambda t: t.sin().sum(), [a])
    _, (g2,) = value_and_grad(lambda t: t.sum_sq(), [a])
    np.testing.assert_allclose(gs, g1 + g2, rtol=1e-13, atol=1e-15)


@given(st.integers(0, 2 ** 31 - 1))
def test_matmul_broadcast_gradient(seed):
    r = np.random.default_rng(seed)
    X, W = r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))
    _, (gW,) = value_and_grad(lambda w: (const(X) @ w).sum_sq(), [W])
    ref = sum(2 * X[i].T @ (X[i] @ W) for i in range(2))
    np.testing.assert_allclose(gW, ref, rtol=1e-12)
