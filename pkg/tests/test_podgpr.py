from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroinr.podgpr import (GprError, GprModel, PodBasis, PodError, PodGprModel, _neg_lml,
                            fit_gpr, fit_pod, fit_pod_gpr, matern52, pod_gpr_predict, project,
                            reconstruct)


def _low_rank(rng, M=12, N=80, k=4):
    return rng.normal(size=(M, k)) @ rng.normal(size=(k, N)) + rng.normal(size=N)


def test_exact_rank_reconstruction(rng):
    S = _low_rank(rng)
    basis = fit_pod(S, r=4)
    rec = reconstruct(basis, project(basis, S))
    assert np.max(np.abs(rec - S)) < 1e-10


def test_snapshot_method_matches_dense_svd(rng):
    S = rng.normal(size=(15, 60))
    basis = fit_pod(S, r=6)
    X = S - S.mean(0)
    U, s, _ = np.linalg.svd(X.T, full_matrices=False)
    np.testing.assert_allclose(basis.singular_values, s[:6], rtol=1e-10)
    # compare subspaces via the projector, which is sign-free
    P1 = basis.modes @ basis.modes.T
    P2 = U[:, :6] @ U[:, :6].T
    assert np.max(np.abs(P1 - P2)) < 1e-9


def test_modes_orthonormal_and_sign_fixed(rng):
    basis = fit_pod(rng.normal(size=(20, 50)), r=10)
    np.testing.assert_allclose(basis.modes.T @ basis.modes, np.eye(10), atol=1e-12)
    piv = np.argmax(np.abs(basis.modes), axis=0)
    assert np.all(basis.modes[piv, np.arange(10)] > 0)
    assert np.all(np.diff(basis.singular_values) <= 0)


def test_rank_truncation_warns(rng):
    with pytest.warns(UserWarning, match="numerical rank"):
        basis = fit_pod(_low_rank(rng, k=3), r=8)
    assert basis.r == 3


def test_pod_errors(rng):
    with pytest.raises(PodError):
        fit_pod(np.ones((4, 5)), r=2)
    with pytest.raises(PodError):
        fit_pod(rng.normal(size=(4, 5)), r=5)
    b = fit_pod(rng.normal(size=(4, 5)), r=2)
    with pytest.raises(PodError):
        project(b, np.zeros(6))
    with pytest.raises(PodError):
        reconstruct(b, np.zeros(3))


def test_matern_kernel_closed_form():
    X1, X2 = np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])
    k = matern52(X1, X2, np.array([1.0, 2.0]), 2.0)[0, 0]
    r = np.sqrt(9 + 4)
    assert k == pytest.approx(2.0 * (1 + np.sqrt(5) * r + 5 * r * r / 3) * np.exp(-np.sqrt(5) * r))


def _direct_nll(theta, X, y):
    d = X.shape[1]
    K = matern52(X, X, np.exp(theta[:d]), np.exp(theta[d])) + np.exp(theta[d + 1]) * np.eye(len(y))
    _, logdet = np.linalg.slogdet(K)
    return 0.5 * y @ np.linalg.solve(K, y) + 0.5 * logdet + 0.5 * len(y) * np.log(2 * np.pi)


def test_lml_value_and_gradient(rng):
    X, y = rng.normal(size=(10, 2)), rng.normal(size=10)
    theta = np.array([0.3, -0.2, 0.1, np.log(0.05)])
    val, g = _neg_lml(theta, X, y, None)
    assert val == pytest.approx(_direct_nll(theta, X, y), rel=1e-10)
    eps = 1e-6
    fd = np.array([(_direct_nll(theta + eps * e, X, y) - _direct_nll(theta - eps * e, X, y)) / (2 * eps)
                   for e in np.eye(4)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_gp_interpolates_training_points(rng):
    mu = rng.uniform(-1, 1, size=(15, 2))
    y = np.sin(3 * mu[:, 0]) + mu[:, 1] ** 2
    gp = fit_gpr(mu, y, restarts=3, noise=1e-10)
    assert np.max(np.abs(gp.predict(mu)[:, 0] - y)) < 1e-6
    _, var = gp.predict(mu, return_var=True)
    assert np.all(var < 1e-6)
    assert np.isfinite(gp.log_marginal_likelihood())


def test_gp_is_deterministic_and_restores_from_state(rng):
    mu = rng.uniform(size=(10, 3))
    Y = np.column_stack([mu.sum(1), np.cos(mu[:, 0])])
    a, b = fit_gpr(mu, Y, seed=7), fit_gpr(mu, Y, seed=7)
    q = rng.uniform(size=(4, 3))
    assert np.array_equal(a.predict(q), b.predict(q))
    back = GprModel.from_state(*a.state())
    assert np.array_equal(back.predict(q), a.predict(q))


def test_gp_errors():
    with pytest.raises(GprError):
        fit_gpr(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(GprError):
        fit_gpr(np.zeros((3, 2)), np.zeros(3), noise=0.0)


def test_pod_gpr_end_to_end(rng):
    mu = np.linspace(0, 1, 12)[:, None]
    x = np.linspace(0, 1, 50)
    S = np.sin(np.pi * (x[None, :] + 0.3 * mu))
    model = fit_pod_gpr(mu, S, r=2, restarts=2)  # a shifted sine spans two modes
    pred, var = pod_gpr_predict(model.basis, model.gpr, [[0.55]], return_var=True)
    np.testing.assert_allclose(pred[0], np.sin(np.pi * (x + 0.165)), atol=1e-3)
    assert var.shape == (1, 50) and np.all(var >= 0)
    back = PodGprModel.from_state(*model.state())
    assert np.array_equal(pod_gpr_predict(back.basis, back.gpr, [[0.4]]),
                          pod_gpr_predict(model.basis, model.gpr, [[0.4]]))
    with pytest.warns(UserWarning, match="outside"):
        pod_gpr_predict(model.basis, model.gpr, [[50.0]])


@settings(max_examples=15)
@given(st.integers(2, 8), st.integers(0, 10 ** 6))
def test_projection_is_idempotent(r, seed):
    S = np.random.default_rng(seed).normal(size=(10, 30))
    b = fit_pod(S, r=r)
    c = project(b, S)
    np.testing.assert_allclose(project(b, reconstruct(b, c)), c, atol=1e-10)


@settings(max_examples=15)
@given(st.floats(0.1, 10.0), st.integers(0, 10 ** 6))
def test_pod_scale_equivariance(a, seed):
    S = np.random.default_rng(seed).normal(size=(8, 20))
    b1, b2 = fit_pod(S, r=4), fit_pod(a * S, r=4)
    np.testing.assert_allclose(b2.singular_values, a * b1.singular_values, rtol=1e-9)
    assert isinstance(b1, PodBasis)
