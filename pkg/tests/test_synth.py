from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroinr import synth
from aeroinr.geometry import MeshQuery, signed_volume


def test_broadband_closed_form():
    cfg = synth.Broadband1DConfig(n_points=256)
    ds = synth.gen_broadband_1d(cfg)
    s = ds.samples[0]
    x = s.coords[:, 0]
    np.testing.assert_array_equal(s.values[:, 0], synth.broadband_signal(x, cfg, s.extras["phases"]))
    assert s.extras["train_mask"].sum() == round(0.25 * 256)
    spec = np.abs(np.fft.rfft(s.values[:, 0])) / 128
    peaks = np.argsort(spec)[-len(cfg.freqs):]
    assert sorted(peaks.tolist()) == [int(f) for f in cfg.freqs]
    np.testing.assert_allclose(spec[[int(f) for f in cfg.freqs]], cfg.amps, rtol=1e-10)


def test_airfoil_front_moves_with_mach():
    cfg = synth.Airfoil2DConfig(n_nodes=100, n_samples=4)
    lo = synth.front_position([4.0, 0.3], cfg)
    hi = synth.front_position([4.0, 0.9], cfg)
    assert hi - lo == pytest.approx(0.4)
    # the field drops across the front by roughly the front amplitude on the chord line
    mu = [0.0, 0.6]
    xs = synth.front_position(mu, cfg)
    before = synth.airfoil_field(np.array([[xs - 0.1, 0.5]]), mu, cfg)
    after = synth.airfoil_field(np.array([[xs + 0.1, 0.5]]), mu, cfg)
    assert before[0] - after[0] > 0.8
    with pytest.raises(synth.SynthError):
        synth.gen_airfoil_2d(synth.Airfoil2DConfig(shock_width=0.2))


def test_airfoil_dataset_deterministic():
    cfg = synth.Airfoil2DConfig(n_nodes=300, n_samples=5, seed=2)
    a, b = synth.gen_airfoil_2d(cfg), synth.gen_airfoil_2d(cfg)
    for s, t in zip(a, b):
        assert np.array_equal(s.values, t.values) and np.array_equal(s.mu, t.mu)
    assert a.samples[0].mesh is a.samples[1].mesh


@pytest.fixture(scope="module")
def wings():
    return synth.gen_wing_3d(synth.Wing3DConfig(n_shapes=8, n_conditions=2, sdf_points=400,
                                                n_section=16, n_span=4))


def test_wing_dataset_layout(wings):
    assert len(wings) == 16 and len(wings.shape_ids()) == 8
    s = wings.samples[0]
    assert s.values.shape == (s.coords.shape[0], 1)
    assert np.linalg.norm(s.coords, axis=1).max() == pytest.approx(0.95)
    assert s.mesh.normals.shape == s.coords.shape
    assert np.all(s.mu[3] == 3.0e7)
    assert signed_volume(s.mesh) > 0


def test_wing_sdf_matches_mesh(wings):
    s = wings.samples[0]
    sd = MeshQuery(s.mesh).signed(s.sdf.points[:50])
    np.testing.assert_array_equal(sd, s.sdf.sdf[:50])


def test_wing_mesh_rejects_degenerate_shape():
    with pytest.raises(synth.SynthError):
        synth.wing_mesh(synth.WingShape(span=0.0, thickness=0.1, sweep=20.0))
    with pytest.raises(synth.SynthError):
        synth.wing_shapes(synth.Wing3DConfig(n_shapes=4))


@settings(max_examples=15)
@given(st.floats(1.0, 5.0), st.floats(0.05, 0.2), st.floats(0.0, 40.0))
def test_wing_mesh_is_closed_and_outward(span, t, sweep):
    m = synth.wing_mesh(synth.WingShape(span, t, sweep), n_section=12, n_span=3)
    assert signed_volume(m) > 0
    # every edge is shared by exactly two triangles
    e = np.sort(np.concatenate([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]],
                                m.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)


@settings(max_examples=20)
@given(st.floats(0.0, 9.0), st.floats(0.3, 0.9))
def test_airfoil_front_inside_chord(alpha, mach):
    xs = synth.front_position([alpha, mach], synth.Airfoil2DConfig())
    assert 0.3 <= xs <= 0.75
