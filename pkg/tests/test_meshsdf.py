import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detailsdf import meshsdf as ms


def big_triangle():
    return ms.TriMesh(np.array([[-10.0, -10, 0], [10, -10, 0], [0, 10, 0]]), np.array([[0, 1, 2]]))


def test_distance_above_face_interior():
    m = big_triangle()
    centroid = m.vertices.mean(axis=0)
    d, cp = ms.point_to_mesh(m, None, centroid + [0, 0, 0.3])
    assert d[0] == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(cp[0], centroid, atol=1e-15)


def test_distance_at_vertex_is_zero():
    m = ms.icosphere(2)
    d, _ = ms.point_to_mesh(m, None, m.vertices[:5])
    np.testing.assert_array_equal(d, 0.0)


def test_closest_point_regions():
    a, b, c = np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])
    cases = {
        (-1.0, -1.0, 0.0): (0, 0, 0),
        (2.0, -0.5, 1.0): (1, 0, 0),
        (-0.5, 3.0, 0.0): (0, 1, 0),
        (0.5, -2.0, 0.0): (0.5, 0, 0),
        (-2.0, 0.5, 0.0): (0, 0.5, 0),
        (1.0, 1.0, 0.0): (0.5, 0.5, 0),
        (0.2, 0.2, 5.0): (0.2, 0.2, 0),
    }
    for p, want in cases.items():
        got = ms.closest_point_on_triangles(np.array([p]), a, b, c)
        np.testing.assert_allclose(got[0], want, atol=1e-15)


def test_bvh_matches_bruteforce_on_sphere():
    m = ms.icosphere(3)
    pts = np.random.default_rng(0).uniform(-1.5, 1.5, size=(1000, 3))
    d_bvh, _ = ms.Bvh(m).query(pts)
    d_bf, _ = ms.point_to_mesh_bruteforce(m, pts)
    np.testing.assert_allclose(d_bvh, d_bf, rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 16))
@settings(max_examples=20, deadline=None)
def test_bvh_matches_bruteforce_random_soup(seed, leaf):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    v = rng.normal(size=(3 * n, 3))
    m = ms.TriMesh(v, np.arange(3 * n).reshape(n, 3)).cleaned()
    if m.is_empty():
        return
    pts = rng.normal(size=(50, 3)) * 2
    d_bvh, _ = ms.Bvh(m, leaf_size=leaf).query(pts)
    d_bf, _ = ms.point_to_mesh_bruteforce(m, pts)
    np.testing.assert_allclose(d_bvh, d_bf, rtol=0, atol=1e-12)


def test_shell_sdf_arithmetic():
    m = big_triangle()
    c = m.vertices.mean(axis=0)
    assert ms.sdf_gt(m, None, c, 0.02)[0] == pytest.approx(-0.01)
    assert ms.sdf_gt(m, None, c + [0, 0, 0.05], 0.02)[0] == pytest.approx(0.04)
    assert ms.sdf_gt(m, None, c + [0, 0, 0.01], 0.02)[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        ms.sdf_gt(m, None, c, 0.0)


@given(st.floats(0.0, 3.0), st.floats(1e-4, 0.5))
@settings(max_examples=50, deadline=None)
def test_shell_sdf_is_distance_minus_half_eps(h, eps):
    m = big_triangle()
    p = m.vertices.mean(axis=0) + [0, 0, h]
    assert ms.sdf_gt(m, None, p, eps)[0] == pytest.approx(h - eps / 2, abs=1e-12)


def test_tiny_sigma_samples_lie_on_surface():
    m = ms.icosphere(2)
    plan = ms.SamplePlan(n_surface=500, n_uniform=0, sigma=1e-12)
    pts = ms.sample_points(m, plan, 0)
    d, _ = ms.point_to_mesh(m, None, pts)
    assert d.max() < 1e-9


def test_area_weighted_split():
    # areas 1 and 3
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], dtype=float)
    m = ms.TriMesh(v, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_allclose(m.face_areas(), [1, 3])
    _, face = ms.sample_surface(m, 10_000, 1)
    counts = np.bincount(face, minlength=2)
    expected = np.array([2500, 7500])
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 < 10.83  # p = 0.001, one degree of freedom


def test_sampling_deterministic():
    m = ms.icosphere(2)
    a = ms.sample_points(m, ms.SamplePlan(), 42)
    b = ms.sample_points(m, ms.SamplePlan(), 42)
    np.testing.assert_array_equal(a, b)
    assert len(a) == 4096 + 1024


def test_plan_from_total():
    plan = ms.SamplePlan.from_total(1000)
    assert (plan.n_surface, plan.n_uniform) == (800, 200)


def test_icosphere_topology():
    m = ms.icosphere(2, radius=2.0)
    assert m.euler_characteristic() == 2
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 2.0)


def test_obj_roundtrip_and_polygons(tmp_path):
    m = ms.icosphere(1)
    ms.save_obj(m, tmp_path / "a.obj")
    back = ms.load_obj(tmp_path / "a.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-8)
    np.testing.assert_array_equal(back.faces, m.faces)
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\nf -4 -3 -2\n")
    q = ms.load_obj(tmp_path / "q.obj")
    assert len(q.faces) == 3


def test_obj_errors(tmp_path):
    (tmp_path / "e.obj").write_text("# nothing\n")
    with pytest.raises(ms.MeshError):
        ms.load_obj(tmp_path / "e.obj")
    with pytest.raises(ms.MeshError):
        ms.TriMesh(np.zeros((3, 3)), [[0, 1, 5]])


def test_normalize_to_box():
    m = ms.icosphere(1).transformed(scale=3.0, translation=[5, 0, 0])
    n, scale, offset = ms.normalize_to_box(m, 0.9)
    assert np.abs(n.vertices).max() == pytest.approx(0.9)
    np.testing.assert_allclose(n.vertices, (m.vertices - offset) * scale)


def test_mesh_sdf_callable():
    m = ms.icosphere(3)
    f = ms.MeshSdf(m, eps=0.02)
    d, _ = ms.point_to_mesh(m, None, np.array([[0, 0, 2.0]]))
    assert f(np.array([[0, 0, 2.0]]))[0] == pytest.approx(d[0] - 0.01)


def test_open_mesh_warns():
    with pytest.warns(UserWarning):
        ms.warn_if_open(big_triangle())
