from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroinr import kernels
from aeroinr.encoding import MultiscaleEncoder
from aeroinr.neuralfield import (Hypernetwork, NeuralField, ResidualMLP, WidthError, forward,
                                 modulations, query_field, vanilla_forward)
from aeroinr.tensorcore import const, value_and_grad

from conftest import central_diff, rel_err


def _field(d=2, widths=(8, 8), sigmas=(1.0, 5.0), d_u=2, seed=0):
    enc = MultiscaleEncoder.from_sigmas(4, d, sigmas, seed)
    return NeuralField.init(enc, widths, d_u, seed=seed)


def _rand_params(nf, rng):
    # non-zero biases so every code path contributes
    return nf.with_params([rng.normal(scale=0.5, size=a.shape) for a in nf.param_list()])


def test_apply_matches_query_field(rng):
    nf = _rand_params(_field(), rng)
    X = rng.uniform(-1, 1, size=(9, 2))
    phi = [rng.normal(size=8), rng.normal(size=8)]
    ref = nf.apply(nf.const_tensors(), nf.encode(X), [const(p[None, :]) for p in phi]).data
    np.testing.assert_allclose(query_field(nf, X, phi), ref, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(forward(nf, X[3], phi), ref[3], rtol=1e-12, atol=1e-13)


def test_zero_modulation_equals_unmodulated(rng):
    nf = _rand_params(_field(), rng)
    X = rng.uniform(-1, 1, size=(5, 2))
    assert np.array_equal(query_field(nf, X), query_field(nf, X, [np.zeros(8), np.zeros(8)]))


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="extension not built")
def test_backends_agree(rng):
    nf = _rand_params(_field(d=3, widths=(6, 5, 7), sigmas=(0.0, 1.0, 5.0)), rng)
    X = rng.uniform(-1, 1, size=(40, 3))
    phi = [rng.normal(size=w) for w in nf.widths]
    out = {}
    for name in ("python", "compiled"):
        kernels.use_backend(name)
        try:
            out[name] = query_field(nf, X, phi)
        finally:
            kernels.use_backend("compiled")
    np.testing.assert_allclose(out["python"], out["compiled"], rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_query_is_batch_independent(backend, rng):
    nf = _rand_params(_field(), rng)
    X = rng.uniform(-1, 1, size=(64, 2))
    prev = kernels.BACKEND
    kernels.use_backend(backend)
    try:
        full = query_field(nf, X)
        sub = query_field(nf, X[10:13])
        perm = rng.permutation(64)
        shuffled = query_field(nf, X[perm])
    finally:
        kernels.use_backend(prev)
    assert np.array_equal(full[10:13], sub)
    assert np.array_equal(full[perm], shuffled)


def test_input_validation():
    nf = _field()
    with pytest.raises(WidthError):
        query_field(nf, np.zeros((3, 3)))
    with pytest.raises(WidthError):
        query_field(nf, np.zeros((3, 2)), [np.zeros(8)])
    with pytest.raises(WidthError):
        forward(nf, np.zeros((1, 2)))
    assert query_field(nf, np.zeros((0, 2))).shape == (0, 2)
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


def test_hypernetwork_splits_per_layer(rng):
    h = Hypernetwork.init(3, (4, 6), hidden=(5,), seed=1)
    phis = modulations(h, rng.normal(size=3))
    assert [p.shape for p in phis] == [(4,), (6,)]
    batched = h.apply(h.const_tensors(), const(rng.normal(size=(2, 3))))
    assert [p.shape for p in batched] == [(2, 1, 4), (2, 1, 6)]
    with pytest.raises(WidthError):
        modulations(h, np.zeros(2))


def test_residual_mlp_structure(rng):
    m = ResidualMLP.init((3, 5, 5, 2), seed=0)
    m = m.with_params([rng.normal(size=a.shape) for a in m.param_list()])
    x = rng.normal(size=(4, 3))
    p = m.params
    h = np.maximum(x @ p["W0"] + p["b0"], 0)
    h = h + np.maximum(h @ p["W1"] + p["b1"], 0)
    np.testing.assert_allclose(m(x), h @ p["W2"] + p["b2"], rtol=1e-13)
    np.testing.assert_array_equal(vanilla_forward(m, x), m(x))
    with pytest.raises(WidthError):
        ResidualMLP.init((3, 5, 6, 2))


def test_state_roundtrip(rng):
    nf = _rand_params(_field(), rng)
    back = NeuralField.from_state(*nf.state())
    X = rng.uniform(-1, 1, size=(6, 2))
    assert np.array_equal(query_field(nf, X), query_field(back, X))
    h = Hypernetwork.init(3, (8, 8), hidden=(4,), activation="silu", seed=2)
    hb = Hypernetwork.from_state(*h.state())
    z = rng.normal(size=3)
    for a, b in zip(modulations(h, z), modulations(hb, z)):
        assert np.array_equal(a, b)


def _np_modulated(nf_widths, B, Ws, bs, W_out, b_out, psi, z, X):
    """Plain-numpy reference: hypernetwork (one relu hidden layer) then field."""
    h = np.maximum(z @ psi[0] + psi[1], 0)
    out = h @ psi[2] + psi[3]
    phis = np.split(out, np.cumsum(nf_widths)[:-1])
    feats = []
    for Bm in B:
        proj = 2 * np.pi * X @ Bm.T
        a = np.concatenate([np.sin(proj), np.cos(proj)], axis=1)
        for l in range(len(Ws)):
            a = np.maximum(a @ Ws[l] + bs[l] + phis[l], 0)
        feats.append(a)
    return np.sum((np.concatenate(feats, axis=1) @ W_out + b_out) ** 2)


@settings(max_examples=10)
@given(st.integers(1, 3), st.integers(2, 8), st.integers(1, 2), st.integers(0, 2 ** 31 - 1))
def test_modulated_field_gradients(L, h, M, seed):
    r = np.random.default_rng(seed)
    enc = MultiscaleEncoder.from_sigmas(3, 2, [1.0, 2.0][:M], seed)
    nf = NeuralField.init(enc, (h,) * L, d_u=1, seed=seed)
    nf = nf.with_params([r.normal(scale=0.7, size=a.shape) for a in nf.param_list()])
    hyper = Hypernetwork.init(2, nf.widths, hidden=(3,), seed=seed + 1)
    hyper = hyper.with_params([r.normal(scale=0.7, size=a.shape) for a in hyper.param_list()])
    X = r.uniform(-1, 1, size=(5, 2))
    z = r.normal(size=(1, 2))
    enc_x = nf.encode(X)
    n_t = len(nf.params)

    def loss(*ts):
        pt, ph = nf.tensors(ts[:n_t]), hyper.tensors(ts[n_t:-1])
        return nf.apply(pt, enc_x, hyper.apply(ph, ts[-1])).sum_sq()

    arrays = nf.param_list() + hyper.param_list() + [z]
    _, grads = value_and_grad(loss, arrays)
    B = [s.B for s in enc.scales]

    def ref(*a):
        Ws = [a[2 * l] for l in range(L)]
        bs = [a[2 * l + 1] for l in range(L)]
        return _np_modulated(nf.widths, B, Ws, bs, a[2 * L], a[2 * L + 1],
                             a[n_t:-1], a[-1][0], X)

    fd = central_diff(ref, [a.copy() for a in arrays])
    for g, f in zip(grads, fd):
        assert rel_err(g, f, floor=1e-3) < 1e-6
