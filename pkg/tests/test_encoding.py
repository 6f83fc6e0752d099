from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aeroinr.encoding import (EncodingError, MultiscaleEncoder, encode, encode_multiscale,
                              encoder_from_state, encoder_state, identity_scale,
                              sample_freq_matrix)


def test_encode_matches_explicit_formula(rng):
    fm = sample_freq_matrix(5, 2, 3.0, seed=11)
    x = rng.uniform(-1, 1, size=(7, 2))
    out = encode(x, fm)
    assert out.shape == (7, 10)
    proj = 2 * np.pi * np.einsum("nd,pd->pn", fm.B, x)
    np.testing.assert_allclose(out[:, :5], np.sin(proj), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(out[:, 5:], np.cos(proj), rtol=1e-14, atol=1e-15)


def test_freq_matrix_is_seeded_and_read_only():
    a = sample_freq_matrix(4, 3, 2.0, seed=5)
    b = sample_freq_matrix(4, 3, 2.0, seed=5)
    assert np.array_equal(a.B, b.B)
    with pytest.raises(ValueError):
        a.B[0, 0] = 1.0


def test_freq_matrix_scale_follows_sigma():
    fm = sample_freq_matrix(4000, 1, 5.0, seed=0)
    assert fm.B.std() == pytest.approx(5.0, rel=0.05)


@pytest.mark.parametrize("n,d,sigma", [(0, 1, 1.0), (1, 0, 1.0), (2, 1, 0.0), (2, 1, -1.0)])
def test_invalid_freq_args(n, d, sigma):
    with pytest.raises(EncodingError):
        sample_freq_matrix(n, d, sigma, 0)


def test_identity_scale_passthrough_zero_padded():
    x = np.array([[0.1, -0.2, 0.3]])
    out = encode(x, identity_scale(4, 3))
    np.testing.assert_array_equal(out, [[0.1, -0.2, 0.3, 0, 0, 0, 0, 0]])
    with pytest.raises(EncodingError):
        identity_scale(1, 3)


def test_dimension_mismatch_rejected():
    with pytest.raises(EncodingError):
        encode(np.zeros((2, 3)), sample_freq_matrix(2, 2, 1.0, 0))


def test_multiscale_scales_use_distinct_seeds():
    enc = MultiscaleEncoder.from_sigmas(8, 2, [1.0, 5.0], seed=3)
    assert enc.M == 2 and enc.sigmas == [1.0, 5.0]
    assert [s.seed for s in enc.scales] == [3, 3 + 7919]
    with pytest.raises(EncodingError):
        MultiscaleEncoder(())


def test_state_roundtrip_is_bitwise():
    enc = MultiscaleEncoder.from_sigmas(6, 3, [0.0, 1.0, 5.0], seed=2)
    cfg, arrays = encoder_state(enc)
    back = encoder_from_state(cfg, arrays)
    x = np.random.default_rng(0).normal(size=(4, 3))
    for a, b in zip(encode_multiscale(x, enc), encode_multiscale(x, back)):
        assert np.array_equal(a, b)


@given(st.floats(-5, 5), st.integers(0, 1000))
def test_features_lie_on_unit_circles(t, seed):
    fm = sample_freq_matrix(6, 1, 2.0, seed)
    out = encode(np.array([[t]]), fm)
    np.testing.assert_allclose(out[0, :6] ** 2 + out[0, 6:] ** 2, 1.0, rtol=1e-12)


@given(st.integers(1, 6), st.integers(0, 1000))
def test_encoding_is_rowwise(n_rows, seed):
    # the numpy path may block its matmul differently per batch size, so this
    # is a tolerance check; the bitwise guarantee lives in the field kernels
    r = np.random.default_rng(seed)
    fm = sample_freq_matrix(3, 2, 1.5, seed)
    X = r.uniform(-1, 1, size=(n_rows, 2))
    full = encode(X, fm)
    for i in range(n_rows):
        np.testing.assert_allclose(full[i], encode(X[i:i + 1], fm)[0], rtol=0, atol=1e-13)
