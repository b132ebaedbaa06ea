"""Synthetic scenes, an independent render oracle and surface metrics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from math import pi

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from . import diffmath as dm
from .diffmath import Value
from .meshsdf import Bvh, TriMesh, point_to_mesh

# ---------------------------------------------------------------------------
# analytic scenes


@dataclass(frozen=True)
class Light:
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)  # towards the light
    ambient: float = 0.15
    diffuse: float = 0.85

    def unit(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        return d / np.linalg.norm(d)


class AnalyticScene:
    """Closed-form SDF + albedo + directional Lambertian light.

    Subclasses provide ``sdf_np``/``grad_np`` (plain arrays, used by the
    oracle) and ``_sdf_value`` (tape ops, used by the sphere tracer).
    """

    feature_dim = 0

    def __init__(self, albedo=(0.8, 0.7, 0.6), light: Light = Light()):
        self.albedo_rgb = np.asarray(albedo, dtype=np.float64)
        self.light = light

    # field protocol for render.*
    def evaluate(self, x) -> tuple[Value, Value]:
        x = x if isinstance(x, Value) else Value(np.atleast_2d(x))
        return self._sdf_value(x), Value(np.zeros((x.shape[0], 0)))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.sdf_np(np.atleast_2d(points))

    def albedo(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.albedo_rgb, (len(x), 3))

    def shade_np(self, x: np.ndarray, n: np.ndarray) -> np.ndarray:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        lam = np.clip(n @ self.light.unit(), 0.0, None)
        return np.clip(self.albedo(x) * (self.light.ambient + self.light.diffuse * lam[:, None]), 0.0, 1.0)

    # shader protocol for render.*
    def shade(self, x, n, v, feature=None, toggles=None) -> Value:
        xd = x.data if isinstance(x, Value) else np.atleast_2d(x)
        nd = n.data if isinstance(n, Value) else np.atleast_2d(n)
        return Value(self.shade_np(xd, nd))

    def eikonal_residual(self, band: float = 0.02, n: int = 20000, seed=0) -> float:
        """Max | |grad sdf| - 1 | over samples within ``band`` of the surface."""
        pts = self.sample_surface(n, seed)
        rng = dm.make_rng(seed)
        pts = pts + rng.uniform(-band, band, size=(n, 1)) * pts / np.linalg.norm(pts, axis=1, keepdims=True)
        g = self.grad_np(pts)
        return float(np.abs(np.linalg.norm(g, axis=1) - 1.0).max())

    def prior_radius(self, eps: float) -> float:
        """Radius of a smooth sphere prior whose thickened outer sheet sits at ``base_radius``."""
        return self.base_radius - eps / 2.0

    def sample_surface(self, n: int, seed=0) -> np.ndarray:
        """Points on the zero level set, projected with Newton steps along the gradient."""
        rng = dm.make_rng(seed)
        d = rng.normal(size=(n, 3))
        x = d / np.linalg.norm(d, axis=1, keepdims=True) * self.base_radius
        for _ in range(30):
            s = self.sdf_np(x)
            g = self.grad_np(x)
            x = x - (s / np.sum(g * g, axis=1))[:, None] * g
        return x


class SphereScene(AnalyticScene):
    def __init__(self, radius: float = 1.0, center=(0.0, 0.0, 0.0), **kw):
        super().__init__(**kw)
        self.radius = radius
        self.base_radius = radius
        self.center = np.asarray(center, dtype=np.float64)

    def sdf_np(self, x):
        return np.linalg.norm(x - self.center, axis=1) - self.radius

    def grad_np(self, x):
        d = x - self.center
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def _sdf_value(self, x):
        return dm.norm_rows(x - Value(self.center[None, :])) - self.radius


class BumpySphereScene(AnalyticScene):
    """Sphere displaced radially by ``amplitude * sin(k u_x) sin(k u_y) sin(k u_z)``
    with ``u`` the unit direction.  The implicit function is divided by its
    gradient norm, a first-order distance that is exactly eikonal on the
    surface."""

    def __init__(self, radius: float = 1.0, amplitude: float = 0.03, frequency: float = 8.0, **kw):
        super().__init__(**kw)
        self.radius = radius
        self.base_radius = radius
        self.amplitude = amplitude
        self.frequency = frequency

    def _parts(self, x):
        r = np.linalg.norm(x, axis=1)
        u = x / r[:, None]
        k = self.frequency
        s, c = np.sin(k * u), np.cos(k * u)
        bump = s[:, 0] * s[:, 1] * s[:, 2]
        dbump_du = k * np.stack([c[:, 0] * s[:, 1] * s[:, 2], s[:, 0] * c[:, 1] * s[:, 2], s[:, 0] * s[:, 1] * c[:, 2]], axis=1)
        # gradient of bump(x/|x|): project onto the tangent plane, divide by r
        tang = dbump_du - np.sum(dbump_du * u, axis=1, keepdims=True) * u
        g_bump = tang / r[:, None]
        g_impl = u - self.amplitude * g_bump
        return r, u, bump, g_impl

    def implicit_np(self, x):
        r, _, bump, _ = self._parts(x)
        return r - self.radius - self.amplitude * bump

    def sdf_np(self, x):
        r, _, bump, g = self._parts(x)
        return (r - self.radius - self.amplitude * bump) / np.linalg.norm(g, axis=1)

    def grad_np(self, x, h: float = 1e-6):
        # closed form of grad(g / |grad g|) is unwieldy; central differences
        # of the closed-form sdf are accurate to ~1e-10 here
        out = np.empty_like(x)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            out[:, i] = (self.sdf_np(x + e) - self.sdf_np(x - e)) / (2 * h)
        return out

    def _sdf_value(self, x):
        r = dm.norm_rows(x)
        u = x / r
        k = self.frequency
        su, cu = dm.sin(u * k), dm.cos(u * k)
        s0, s1, s2 = su[:, 0:1], su[:, 1:2], su[:, 2:3]
        c0, c1, c2 = cu[:, 0:1], cu[:, 1:2], cu[:, 2:3]
        bump = s0 * s1 * s2
        dbu = dm.concat([c0 * s1 * s2, s0 * c1 * s2, s0 * s1 * c2], axis=1) * k
        tang = dbu - (dbu * u).sum(axis=1, keepdims=True) * u
        g = u - tang * (self.amplitude / r)
        return (r - self.radius - bump * self.amplitude) / dm.norm_rows(g)


class CreasedBlobScene(AnalyticScene):
    """Union of two overlapping spheres; the seam is a sharp crease."""

    def __init__(self, radius: float = 0.7, offset: float = 0.45, **kw):
        super().__init__(**kw)
        self.radius = radius
        self.offset = offset
        self.base_radius = radius
        self.c0 = np.array([-offset, 0.0, 0.0])
        self.c1 = np.array([offset, 0.0, 0.0])

    def sdf_np(self, x):
        return np.minimum(np.linalg.norm(x - self.c0, axis=1), np.linalg.norm(x - self.c1, axis=1)) - self.radius

    def grad_np(self, x):
        d0, d1 = x - self.c0, x - self.c1
        n0, n1 = np.linalg.norm(d0, axis=1), np.linalg.norm(d1, axis=1)
        return np.where((n0 <= n1)[:, None], d0 / n0[:, None], d1 / n1[:, None])

    def _sdf_value(self, x):
        a = dm.norm_rows(x - Value(self.c0[None, :]))
        b = dm.norm_rows(x - Value(self.c1[None, :]))
        return dm.minimum(a, b) - self.radius

    def sample_surface(self, n: int, seed=0) -> np.ndarray:
        rng = dm.make_rng(seed)
        out = []
        while sum(len(o) for o in out) < n:
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            c = np.where(rng.random(n)[:, None] < 0.5, self.c0, self.c1)
            p = c + self.radius * d
            out.append(p[self.sdf_np(p) > -1e-12])
        return np.concatenate(out)[:n]


SCENES = {"sphere": SphereScene, "bumpy": BumpySphereScene, "blob": CreasedBlobScene}


def make_scene(name: str, **kw) -> AnalyticScene:
    try:
        return SCENES[name](**kw)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# ---------------------------------------------------------------------------
# oracle renderer: fixed-step march, no sphere tracing


@dataclass
class OracleRender:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray


def oracle_depth(scene: AnalyticScene, origins, dirs, t_max: float = 6.0, coarse: float = 1e-2, fine: float = 1e-4):
    """First sign change along each ray by fixed-step marching.

    A coarse pass with step ``coarse`` brackets the crossing, a fine pass
    with step ``fine`` walks the bracket, and the last fine cell is
    interpolated linearly.  Returns ``(t, hit)``.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    prev = scene.sdf_np(origins)
    outside = prev > 0
    steps = int(np.ceil(t_max / coarse))
    open_ = outside.copy()
    for i in range(1, steps + 1):
        idx = np.flatnonzero(open_)
        if idx.size == 0:
            break
        t = i * coarse
        s = scene.sdf_np(origins[idx] + dirs[idx] * t)
        crossed = s <= 0
        lo[idx[crossed]] = t - coarse
        hi[idx[crossed]] = t
        open_[idx[crossed]] = False
    idx = np.flatnonzero(~np.isnan(lo))
    if idx.size:
        n_fine = int(round(coarse / fine))
        t0, t_end = lo[idx], hi[idx]
        s0 = scene.sdf_np(origins[idx] + dirs[idx] * t0[:, None])
        done = np.zeros(len(idx), dtype=bool)
        for j in range(1, n_fine + 1):
            # land the last step exactly on the bracket end, which is known to be inside
            t1 = t_end if j == n_fine else lo[idx] + j * fine
            s1 = scene.sdf_np(origins[idx] + dirs[idx] * t1[:, None])
            cross = (~done) & (s1 <= 0)
            frac = s0 / (s0 - s1)
            t_hit[idx[cross]] = (t0 + frac * fine)[cross]
            done |= cross
            t0, s0 = np.where(done, t0, t1), np.where(done, s0, s1)
            if done.all():
                break
    hit = np.isfinite(t_hit)
    return t_hit, hit


def oracle_render(scene: AnalyticScene, cam, background=(0.0, 0.0, 0.0), **march) -> OracleRender:
    """Training-image stand-in: fixed-step march + Lambertian shading."""
    h, w = cam.height, cam.width
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx, cy = cam.principal
    d_cam = np.stack([(cc.ravel() - cx) / cam.focal, (rr.ravel() - cy) / cam.focal, np.ones(h * w)], axis=1)
    dirs = d_cam @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.position, dirs.shape)
    t, hit = oracle_depth(scene, origins, dirs, **march)
    rgb = np.tile(np.asarray(background, dtype=np.float64), (h * w, 1))
    if hit.any():
        x = origins[hit] + dirs[hit] * t[hit, None]
        rgb[hit] = scene.shade_np(x, scene.grad_np(x))
    depth = np.where(hit, t, 0.0)
    return OracleRender(rgb.reshape(h, w, 3), hit.reshape(h, w), depth.reshape(h, w))


# ---------------------------------------------------------------------------
# surface extraction


def marching_cubes(field, grid_res: int = 128, iso: float = 0.0, bound: float = 1.2, chunk: int = 65536) -> TriMesh:
    """Triangle mesh of ``{field == iso}`` on a ``grid_res^3`` lattice over ``[-bound, bound]^3``."""
    if grid_res < 8:
        raise ValueError("grid_res must be at least 8")
    lin = np.linspace(-bound, bound, grid_res)
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = np.empty(len(pts))
    for i in range(0, len(pts), chunk):
        vals[i : i + chunk] = field.sdf(pts[i : i + chunk])
    vol = vals.reshape(grid_res, grid_res, grid_res)
    if not (vol.min() < iso < vol.max()):
        warnings.warn("level set is empty; returning an empty mesh", stacklevel=2)
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = (lin[1] - lin[0],) * 3
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing)
    verts = verts - bound
    # skimage's winding already points normals towards increasing values (outward for an SDF)
    return TriMesh(verts, faces.astype(np.int64)).cleaned()


def outer_component(mesh: TriMesh) -> TriMesh:
    """Connected component with the largest bounding box.

    The thickened ground truth gives closed priors two nested sheets; only
    the outer one is the reconstructed surface.
    """
    nv = len(mesh.vertices)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    n, labels = connected_components(graph, directed=False)
    if n == 1:
        return mesh
    best, best_size = 0, -1.0
    for k in range(n):
        v = mesh.vertices[labels == k]
        size = float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))
        if size > best_size:
            best, best_size = k, size
    keep = labels[f[:, 0]] == best
    return TriMesh(mesh.vertices, f[keep]).cleaned()


# ---------------------------------------------------------------------------
# alignment and scan-to-mesh error


def similarity_fit(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Closed-form least-squares ``dst ~ s R src + t`` (Umeyama)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    u, sv, vt = np.linalg.svd(cov)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    rot = u @ d @ vt
    var_s = np.mean(np.sum(a * a, axis=1))
    scale = float(np.trace(np.diag(sv) @ d) / var_s) if with_scale else 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def rigid_align(ref: np.ndarray, recon: TriMesh, with_scale: bool = True, max_iters: int = 100, tol: float = 1e-10):
    """Iterated closest-point similarity fit moving ``recon`` onto ``ref``.

    Returns the aligned mesh and the accumulated ``(scale, R, t)``.
    """
    s_tot, r_tot, t_tot = 1.0, np.eye(3), np.zeros(3)
    mesh = recon
    prev = np.inf
    for _ in range(max_iters):
        bvh = Bvh(mesh)
        dist, closest = bvh.query(ref)
        err = float(np.mean(dist**2))
        if prev - err < tol:
            break
        prev = err
        s, r, t = similarity_fit(closest, ref, with_scale)
        mesh = mesh.transformed(s, r, t)
        s_tot, r_tot, t_tot = s * s_tot, r @ r_tot, s * r @ t_tot + t
    return mesh, (s_tot, r_tot, t_tot)


@dataclass
class ScanError:
    median: float
    mean: float
    std: float
    distances: np.ndarray

    def as_row(self) -> dict:
        return {"median": self.median, "mean": self.mean, "std": self.std, "count": int(len(self.distances))}


def crop_samples(points: np.ndarray, center, radius: float | None) -> np.ndarray:
    if radius is None:
        return points
    keep = np.linalg.norm(points - np.asarray(center), axis=1) <= radius
    return points[keep]


def scan_to_mesh_error(ref: np.ndarray, recon: TriMesh, align: bool = False, **align_kw) -> ScanError:
    """Distance from every reference sample to the closest point on ``recon``."""
    ref = np.atleast_2d(ref)
    if len(ref) == 0:
        raise ValueError("no reference samples")
    if recon.is_empty():
        raise ValueError("reconstructed mesh is empty")
    if align:
        recon, _ = rigid_align(ref, recon, **align_kw)
    dist, _ = point_to_mesh(recon, None, ref)
    return ScanError(float(np.median(dist)), float(np.mean(dist)), float(np.std(dist)), dist)


def write_distances_csv(path, err: ScanError) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "distance"])
        for i, d in enumerate(err.distances):
            w.writerow([i, f"{d:.10g}"])


# ---------------------------------------------------------------------------
# finite-difference audit


def fd_gradient_check(closure, params, h: float = 1e-5, n_samples: int = 20, seed=0, floor: float = 1e-8):
    """Max relative error between tape gradients and central differences.

    ``closure()`` must rebuild and return the scalar loss from the current
    parameter data.  A random subset of ``n_samples`` scalar entries is
    probed (all entries if fewer exist).
    """
    params = list(params)
    loss = closure()
    tape = dm.backward(loss, params)
    rng = dm.make_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = np.arange(total) if total <= n_samples else rng.choice(total, size=n_samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    details = []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        j = np.unravel_index(int(flat - offsets[k]), p.shape)
        orig = p.data[j]
        p.data[j] = orig + h
        with dm.no_grad():
            up = closure().item()
        p.data[j] = orig - h
        with dm.no_grad():
            dn = closure().item()
        p.data[j] = orig
        fd = (up - dn) / (2 * h)
        g = float(tape[p][j])
        rel = abs(g - fd) / max(abs(g), abs(fd), floor)
        details.append((p.name, j, g, fd, rel))
        worst = max(worst, rel)
    return worst, details
