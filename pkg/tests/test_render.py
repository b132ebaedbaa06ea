import numpy as np
import pytest

from detailsdf import diffmath as dm
from detailsdf import evalkit as ek
from detailsdf.fields import RadianceField, SdfField, Toggles
from detailsdf.render import (
    Camera,
    CameraError,
    Rays,
    TraceConfig,
    differentiable_hit,
    generate_rays,
    load_mask_png,
    load_pfm,
    load_png,
    normal_map_rgb,
    overlay,
    render_image,
    save_mask_png,
    save_pfm,
    save_png,
    shade_points,
    sphere_trace,
)


def frontal(focal=128.0, size=128, d=3.0):
    return Camera.look_at((0.0, 0.0, d), (0, 0, 0), (0, 1, 0), focal, size, size)


def one_ray(o, v):
    v = np.asarray(v, float)
    return Rays(np.array([o], float), np.array([v / np.linalg.norm(v)]), np.zeros((1, 2), int))


class RadiusField:
    """||x|| - r with r on the tape."""

    feature_dim = 0

    def __init__(self, r):
        self.r = dm.param(np.array([[r]]))

    def evaluate(self, x):
        x = x if isinstance(x, dm.Value) else dm.const(np.atleast_2d(x))
        return dm.norm_rows(x) - self.r, dm.const(np.zeros((x.shape[0], 0)))


def test_camera_validation():
    with pytest.raises(CameraError):
        Camera(np.zeros(3), np.diag([1.0, 1.0, 2.0]), 100.0, 8, 8)
    with pytest.raises(CameraError):
        Camera(np.zeros(3), np.eye(3), -1.0, 8, 8)
    with pytest.raises(CameraError):
        generate_rays(frontal(size=8), [[8, 0]])


def test_principal_pixel_looks_forward_and_dirs_are_unit():
    cam = Camera(np.zeros(3), np.eye(3), 50.0, 9, 9)
    r = generate_rays(cam, [[4, 4]])
    np.testing.assert_allclose(r.dirs[0], cam.forward, atol=1e-15)
    allr = generate_rays(frontal())
    np.testing.assert_allclose(np.linalg.norm(allr.dirs, axis=1), 1.0, atol=1e-12)


def test_corner_pixel_pinhole_arithmetic():
    cam = Camera(np.zeros(3), np.eye(3), 128.0, 128, 128)
    d = generate_rays(cam, [[0, 0]]).dirs[0]
    raw = np.array([(0 - 63.5) / 128.0, (0 - 63.5) / 128.0, 1.0])
    np.testing.assert_allclose(d, raw / np.linalg.norm(raw), atol=1e-15)


def test_trace_unit_sphere_hit_and_miss():
    s = ek.SphereScene()
    h = sphere_trace(s, one_ray((0, 0, 3), (0, 0, -1)))
    assert h.hit[0] and abs(h.t[0] - 2.0) < 1e-4
    m = sphere_trace(s, one_ray((0, 0, 3), (0, 1, 0)))
    assert not m.hit[0]


def test_trace_bumpy_matches_dense_march():
    scene = ek.BumpySphereScene()
    rng = np.random.default_rng(0)
    n = 1000
    o = rng.normal(size=(n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.7, 0.7, size=(n, 3))
    v = target - o
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rays = Rays(o, v, np.zeros((n, 2), int))
    h = sphere_trace(scene, rays)
    t_ref, hit_ref = ek.oracle_depth(scene, o, v)
    np.testing.assert_array_equal(h.hit, hit_ref)
    both = h.hit & hit_ref
    assert both.sum() > 0.9 * n
    assert np.max(np.abs(h.t[both] - t_ref[both])) < 1e-3


def test_hit_point_derivative_on_sphere():
    f = RadiusField(1.0)
    rays = one_ray((0, 0, 3), (0, 0, -1))
    hits = sphere_trace(f, rays)
    x, keep = differentiable_hit(f, rays, hits)
    assert keep.all()
    np.testing.assert_allclose(x.data, hits.x, atol=1e-12)
    for k, want in enumerate([0.0, 0.0, 1.0]):
        (g,) = dm.grad(dm.take_cols(x, k, k + 1).sum(), [f.r])
        assert g.item() == pytest.approx(want, abs=1e-9)


def test_hit_point_derivative_matches_retrace():
    f = SdfField(width=16, depth=4, skip_at=2, feature_dim=2, seed=4)
    cam = frontal(focal=64.0, size=16)
    rays = generate_rays(cam, [[8, 8], [6, 9], [9, 5]])
    cfg = TraceConfig(tol=1e-10, max_iters=400)
    hits = sphere_trace(f, rays, cfg=cfg)
    assert hits.hit.all()
    x, _ = differentiable_hit(f, rays, hits, cfg)
    t_live = ((x - dm.const(rays.origins)) * dm.const(rays.dirs)).sum()
    W = f.layers[1].W
    g = dm.grad(t_live, [W])[0].data
    idx = np.unravel_index(np.argsort(-np.abs(g).ravel())[:5], g.shape)
    h = 1e-4
    for i, j in zip(*idx):
        old = W.data[i, j]
        W.data[i, j] = old + h
        tp = sphere_trace(f, rays, cfg=cfg).t.sum()
        W.data[i, j] = old - h
        tm = sphere_trace(f, rays, cfg=cfg).t.sum()
        W.data[i, j] = old
        fd = (tp - tm) / (2 * h)
        assert abs(fd - g[i, j]) <= 1e-2 * abs(fd)


def test_all_toggles_off_leaves_only_the_live_hit_term():
    f = SdfField(width=16, depth=4, skip_at=2, feature_dim=4, seed=0)
    sh = RadianceField(feature_dim=4, width=16, seed=1)
    rays = generate_rays(frontal(focal=64.0, size=16), [[8, 8], [7, 7]])
    hits = sphere_trace(f, rays)
    x, keep = differentiable_hit(f, rays, hits)
    off = Toggles(False, False)
    geo = f.parameters()
    rgb, _, _ = shade_points(f, sh, x, rays.dirs[keep], off)
    live = dm.backward(rgb.sum(), geo)
    frozen_rgb, _, _ = shade_points(f, sh, dm.const(x.data), rays.dirs[keep], off)
    frozen = dm.backward(frozen_rgb.sum(), geo)
    assert all(np.all(g == 0) for g in frozen.values())
    assert any(np.any(g != 0) for g in live.values())
    rgb_on, _, _ = shade_points(f, sh, dm.const(x.data), rays.dirs[keep], Toggles())
    assert any(np.any(g != 0) for g in dm.backward(rgb_on.sum(), geo).values())


def test_silhouette_radius_matches_projection():
    res = render_image(ek.SphereScene(), ek.SphereScene(), frontal())
    r_px = np.sqrt(res.mask.sum() / np.pi)
    assert abs(r_px - 128.0 / np.sqrt(8.0)) < 2.0
    assert np.all((res.rgb >= 0) & (res.rgb <= 1))


def test_mask_area_monotone_in_radius():
    counts = [render_image(ek.SphereScene(radius=r), ek.SphereScene(radius=r), frontal(size=64, focal=64.0)).mask.sum()
              for r in (0.5, 0.75, 1.0)]
    assert counts[0] < counts[1] < counts[2]


def test_all_miss_gives_background():
    far = ek.SphereScene(radius=0.1, center=(0, 0, -50))
    res = render_image(far, far, frontal(size=16), background=(0.2, 0.3, 0.4))
    assert not res.mask.any()
    np.testing.assert_array_equal(res.rgb, np.broadcast_to([0.2, 0.3, 0.4], res.rgb.shape))


def test_render_deterministic_and_threaded():
    f = SdfField(width=16, depth=4, skip_at=2, feature_dim=4, seed=0)
    sh = RadianceField(feature_dim=4, width=16, seed=1)
    cam = frontal(focal=24.0, size=24)
    a = render_image(f, sh, cam, chunk=100)
    b = render_image(f, sh, cam, chunk=100, workers=3)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)
    assert a.mask.any()


def test_image_io_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.random((5, 7, 3))
    save_png(tmp_path / "a.png", rgb)
    np.testing.assert_allclose(load_png(tmp_path / "a.png"), rgb, atol=0.5 / 255 + 1e-12)
    m = rng.random((5, 7)) > 0.5
    save_mask_png(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), m)
    depth = rng.random((5, 7)).astype(np.float32)
    save_pfm(tmp_path / "d.pfm", depth)
    np.testing.assert_array_equal(load_pfm(tmp_path / "d.pfm"), depth)
    n = normal_map_rgb(rng.normal(size=(5, 7, 3)), m)
    assert n.min() >= 0 and n.max() <= 1
    assert overlay(rgb, m, rgb * 0).shape == rgb.shape
