from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeroinr import kernels
from aeroinr.geometry import (GeometryError, Mesh, MeshQuery, box_mesh, flip_winding, icosphere,
                              load_obj, normalize_to_unit_sphere, sample_sdf_cloud,
                              sample_surface, save_obj, signed_distance, signed_volume,
                              vertex_normals)


def _box_sdf(p, lo, hi):
    c, h = (lo + hi) / 2, (hi - lo) / 2
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return outside + inside


def test_box_sdf_matches_closed_form(rng):
    lo, hi = np.array([-0.3, -0.2, -0.5]), np.array([0.4, 0.6, 0.1])
    q = MeshQuery(box_mesh(lo, hi))
    p = rng.uniform(-1, 1, size=(500, 3))
    np.testing.assert_allclose(q.signed(p), _box_sdf(p, lo, hi), atol=1e-12)


def test_sphere_sdf_and_sign():
    mesh = icosphere(4, radius=0.8)
    r = np.random.default_rng(0)
    p = r.uniform(-1, 1, size=(2000, 3))
    sd = MeshQuery(mesh).signed(p)
    assert np.max(np.abs(sd - (np.linalg.norm(p, axis=1) - 0.8))) < 2e-3
    assert signed_distance(mesh, [0.0, 0.0, 0.0]) < 0
    assert signed_distance(mesh, [0.0, 0.0, 0.95]) > 0


def test_winding_number_values():
    q = MeshQuery(icosphere(2))
    w = q.winding(np.array([[0.0, 0.0, 0.0], [0.1, -0.2, 0.3], [2.0, 0.0, 0.0]]))
    np.testing.assert_allclose(w, [1.0, 1.0, 0.0], atol=1e-10)
    wf = MeshQuery(flip_winding(icosphere(2))).winding(np.zeros((1, 3)))
    np.testing.assert_allclose(wf, [-1.0], atol=1e-10)


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="extension not built")
def test_geometry_backends_agree(rng):
    tris = icosphere(1).soup()
    p = rng.normal(size=(300, 3))
    res = {}
    for name in ("python", "compiled"):
        kernels.use_backend(name)
        try:
            res[name] = (kernels.closest_sqdist(p, tris)[0], kernels.winding_number(p, tris))
        finally:
            kernels.use_backend("compiled")
    np.testing.assert_allclose(res["python"][0], res["compiled"][0], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(res["python"][1], res["compiled"][1], rtol=1e-10, atol=1e-12)


def test_degenerate_triangles_dropped():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], float)
    m = Mesh.from_arrays(v, [[0, 1, 2], [0, 1, 3]])
    assert m.dropped == 1 and len(m.triangles) == 1
    with pytest.raises(GeometryError):
        Mesh.from_arrays(v, [[0, 1, 9]])
    with pytest.raises(GeometryError):
        MeshQuery(Mesh.from_arrays(v))


def test_isolated_vertex_gets_zero_normal():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], float)
    with pytest.warns(UserWarning):
        n, iso = vertex_normals(Mesh.from_arrays(v, [[0, 1, 2]]))
    assert iso == [3]
    np.testing.assert_allclose(n[0], [0, 0, 1])
    np.testing.assert_array_equal(n[3], 0)


def test_sphere_normals_point_outward():
    m = icosphere(2)
    n, iso = vertex_normals(m)
    assert not iso
    cos = np.sum(n * m.vertices, axis=1) / np.linalg.norm(m.vertices, axis=1)
    assert cos.min() > 0.99


def test_normalize_to_unit_sphere_roundtrip(rng):
    m = box_mesh((1, 2, 3), (4, 4, 5))
    mn, tf = normalize_to_unit_sphere(m)
    assert np.linalg.norm(mn.vertices, axis=1).max() == pytest.approx(0.95)
    np.testing.assert_allclose(tf.invert(mn.vertices), m.vertices, atol=1e-12)


def test_obj_roundtrip(tmp_path):
    m = icosphere(1)
    save_obj(m, tmp_path / "s.obj")
    back = load_obj(tmp_path / "s.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-15)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    assert back.normals is None


def test_obj_roundtrip_keeps_vertex_normals(tmp_path):
    m = icosphere(1)
    n, _ = vertex_normals(m)
    m = Mesh.from_arrays(m.vertices, m.triangles, n)
    save_obj(m, tmp_path / "n.obj")
    back = load_obj(tmp_path / "n.obj")
    assert np.array_equal(back.normals, n)
    assert np.array_equal(back.vertices, m.vertices)


def test_sdf_cloud_composition():
    cloud = sample_sdf_cloud(icosphere(2, 0.5), n_total=1001, uniform_fraction=0.1,
                             sigma_list=(0.01, 0.001), seed=4)
    assert len(cloud) == 1001
    assert np.sum(cloud.tiers == -1) == 100
    assert abs(np.sum(cloud.tiers == 0) - np.sum(cloud.tiers == 1)) <= 1
    near = np.abs(cloud.sdf[cloud.tiers == 1])
    assert np.median(near) < 0.005
    again = sample_sdf_cloud(icosphere(2, 0.5), n_total=1001, sigma_list=(0.01, 0.001), seed=4)
    assert np.array_equal(cloud.points, again.points)
    with pytest.raises(GeometryError):
        sample_sdf_cloud(icosphere(1), sigma_list=(0.0,))


def test_surface_samples_lie_on_surface(rng):
    lo, hi = np.zeros(3), np.array([1.0, 2.0, 0.5])
    p = sample_surface(box_mesh(lo, hi), 200, rng)
    np.testing.assert_allclose(_box_sdf(p, lo, hi), 0, atol=1e-12)


@settings(max_examples=20)
@given(st.floats(0.2, 2.0), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_sdf_scales_with_mesh(s, x, y, z):
    m = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    p = np.array([x, y, z])
    d = signed_distance(m, p)
    d_s = signed_distance(m.with_vertices(m.vertices * s), p * s)
    assert d_s == pytest.approx(s * d, rel=1e-9, abs=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10 ** 6))
def test_unsigned_distance_ignores_orientation(seed):
    m = icosphere(1)
    assert signed_volume(m) > 0 > signed_volume(flip_winding(m))
    p = np.random.default_rng(seed).uniform(-1, 1, size=(5, 3))
    a = MeshQuery(m).unsigned(p)
    b = MeshQuery(flip_winding(m)).unsigned(p)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
