"""Pinhole camera, sphere tracing and differentiable shading of an SDF.

Fields are duck-typed: anything with ``evaluate(x) -> (sdf, feature)`` on
tape values and a ``feature_dim`` attribute can be traced.  Shaders expose
``shade(x, n, v, feature, toggles) -> rgb``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffmath as dm
from .diffmath import Value
from .fields import Toggles, normal


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera.  ``rotation`` maps camera axes (x right, y down, z
    forward) to world; pixel ``(row, col)`` has its center at image
    coordinates ``(col, row)``."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    height: int
    width: int
    principal: tuple[float, float] | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if self.focal <= 0:
            raise CameraError("focal length must be positive")
        if self.height <= 0 or self.width <= 0:
            raise CameraError("image size must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise CameraError(f"rotation is not orthonormal (error {err:.2e})")
        if self.principal is None:
            self.principal = ((self.width - 1) / 2.0, (self.height - 1) / 2.0)
        self.principal = (float(self.principal[0]), float(self.principal[1]))

    @classmethod
    def look_at(cls, position, target=(0, 0, 0), up=(0, 1, 0), focal=128.0, height=128, width=128, principal=None):
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(position, np.stack([right, down, fwd], axis=1), focal, height, width, principal)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def all_pixels(self) -> np.ndarray:
        rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass
class Rays:
    origins: np.ndarray
    dirs: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.dirs)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.pixels[idx])


@dataclass
class Hits:
    """Per-ray tracing result (struct of arrays)."""

    hit: np.ndarray
    t: np.ndarray
    x: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    sdf: np.ndarray = field(default=None)

    def subset(self, idx) -> "Hits":
        return Hits(self.hit[idx], self.t[idx], self.x[idx], self.iterations[idx], self.converged[idx],
                    None if self.sdf is None else self.sdf[idx])


def generate_rays(cam: Camera, pixels=None) -> Rays:
    pixels = cam.all_pixels() if pixels is None else np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    r, c = pixels[:, 0], pixels[:, 1]
    if np.any((r < 0) | (r >= cam.height) | (c < 0) | (c >= cam.width)):
        raise CameraError("pixel outside the image")
    cx, cy = cam.principal
    d_cam = np.stack([(c - cx) / cam.focal, (r - cy) / cam.focal, np.ones(len(r))], axis=1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Rays(np.broadcast_to(cam.position, d.shape).copy(), d, pixels)


def ray_sphere_bounds(rays: Rays, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit distances of each ray through a centered sphere; third
    array flags rays that intersect it at all."""
    b = np.einsum("ij,ij->i", rays.origins, rays.dirs)
    c = np.einsum("ij,ij->i", rays.origins, rays.origins) - radius * radius
    disc = b * b - c
    inside = disc > 0
    root = np.sqrt(np.where(inside, disc, 0.0))
    t0 = np.maximum(-b - root, 0.0)
    t1 = -b + root
    return t0, t1, inside & (t1 > 0)


@dataclass(frozen=True)
class TraceConfig:
    tol: float = 1e-4
    max_iters: int = 128
    n_secant: int = 8
    damping: float = 0.9
    bound_radius: float = 1.75
    grazing: float = 1e-6


def _field_sdf(field, x: np.ndarray) -> np.ndarray:
    with dm.no_grad():
        s, _ = field.evaluate(Value(x))
    return s.data[:, 0]


def sphere_trace(field, rays: Rays, t_min=None, t_max=None, cfg: TraceConfig = TraceConfig()) -> Hits:
    """March each ray by the (damped) field value until ``|sdf| < tol``.

    A step that lands on a negative value stops the march and the bracket
    is refined with ``n_secant`` regula-falsi steps.  Parameters are frozen
    (nothing is recorded on the tape).
    """
    n = len(rays)
    if t_min is None or t_max is None:
        t0, t1, inside = ray_sphere_bounds(rays, cfg.bound_radius)
        t_min = t0 if t_min is None else np.broadcast_to(np.asarray(t_min, dtype=float), (n,)).copy()
        t_max = np.where(inside, t1, -1.0) if t_max is None else np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
    else:
        t_min = np.broadcast_to(np.asarray(t_min, dtype=float), (n,)).copy()
        t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()

    o, v = rays.origins, rays.dirs
    t = t_min.copy()
    d = np.full(n, np.inf)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    bracket = np.zeros(n, dtype=bool)
    t_lo, d_lo = t.copy(), np.zeros(n)
    t_hi, d_hi = t.copy(), np.zeros(n)
    active = t_min <= t_max

    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        di = _field_sdf(field, o[idx] + v[idx] * t[idx, None])
        d[idx] = di
        iters[idx] += 1
        conv = np.abs(di) < cfg.tol
        neg = (di < 0) & ~conv
        converged[idx[conv]] = True
        if neg.any():
            j = idx[neg]
            first = iters[j] == 1
            # a negative first sample means the ray starts inside; no bracket
            bracket[j[~first]] = True
            t_hi[j], d_hi[j] = t[j], di[neg]
        active[idx[conv | neg]] = False
        step = ~(conv | neg)
        j = idx[step]
        t_lo[j], d_lo[j] = t[j], di[step]
        t[j] += cfg.damping * di[step]
        active[j[t[j] > t_max[j]]] = False

    b = np.flatnonzero(bracket)
    if b.size and cfg.n_secant > 0:
        lo, dlo, hi, dhi = t_lo[b], d_lo[b], t_hi[b], d_hi[b]
        tb, db = lo, dlo
        side = np.zeros(b.size, dtype=np.int8)
        # Illinois regula falsi: halve the stale end so curved brackets still shrink
        for _ in range(4 * cfg.n_secant):
            tb = lo - dlo * (hi - lo) / (dhi - dlo)
            db = _field_sdf(field, o[b] + v[b] * tb[:, None])
            pos = db > 0
            dhi = np.where(pos & (side == 1), 0.5 * dhi, dhi)
            dlo = np.where(~pos & (side == -1), 0.5 * dlo, dlo)
            side = np.where(pos, 1, -1).astype(np.int8)
            lo, dlo = np.where(pos, tb, lo), np.where(pos, db, dlo)
            hi, dhi = np.where(pos, hi, tb), np.where(pos, dhi, db)
            iters[b] += 1
            if np.all(np.abs(db) < cfg.tol * 1e-3):
                break
        t[b], d[b] = tb, db
        converged[b] = (np.abs(db) < cfg.tol) | (hi - lo < cfg.tol)

    # polish converged rays with secant steps through the last two iterates
    c = np.flatnonzero(converged & ~bracket & (iters > 1))
    if c.size and cfg.n_secant > 0:
        t0, d0, t1, d1 = t_lo[c], d_lo[c], t[c], d[c]
        for _ in range(cfg.n_secant):
            denom = d1 - d0
            ok = np.abs(denom) > 1e-300
            t2 = np.where(ok, t1 - d1 * (t1 - t0) / np.where(ok, denom, 1.0), t1)
            d2 = _field_sdf(field, o[c] + v[c] * t2[:, None])
            better = np.abs(d2) < np.abs(d1)
            t0, d0 = np.where(better, t1, t0), np.where(better, d1, d0)
            t1, d1 = np.where(better, t2, t1), np.where(better, d2, d1)
            if not better.any() or np.all(np.abs(d1) < cfg.tol * 1e-6):
                break
        t[c], d[c] = t1, d1

    hit = converged & (t <= t_max) & (t >= 0)
    x = o + v * t[:, None]
    return Hits(hit, t, x, iters, converged, d)


def differentiable_hit(field, rays: Rays, hits: Hits, cfg: TraceConfig = TraceConfig()):
    """Hit points as a function of the field parameters.

    ``x(theta) = x_hat - v / (n0 . v) * f_theta(x_hat)`` with ``x_hat`` and
    ``n0`` held constant.  Its value is ``x_hat`` (up to the trace residual)
    and its parameter derivative equals the implicit-function derivative.
    Returns the points and a mask of rays kept (grazing rays are dropped).
    """
    x_hat = hits.x
    n0 = normal(field, dm.param(x_hat), create_graph=False)[0].data
    dot = np.einsum("ij,ij->i", n0, rays.dirs)
    keep = np.abs(dot) >= cfg.grazing
    x_hat, v, dot = x_hat[keep], rays.dirs[keep], dot[keep]
    f_live, _ = field.evaluate(Value(x_hat))
    x = Value(x_hat) - Value(v / dot[:, None]) * f_live
    return x, keep


def shade_points(field, shader, x: Value, v: np.ndarray, toggles: Toggles = Toggles(), create_graph: bool = True):
    """Color at (differentiable) points ``x`` seen along directions ``v``.

    Returns ``(rgb, normal, sdf)`` tape values.
    """
    if not x.requires_grad:
        x = dm.param(x.data)  # nothing upstream to reach; a fresh leaf still gives normals
    n, sdf, feature = normal(field, x, create_graph=create_graph)
    if getattr(field, "feature_dim", 0) == 0:
        feature = None
    rgb = shader.shade(x, n, Value(v), feature, toggles)
    return rgb, n, sdf


def shade_pixel(field, shader, rays: Rays, hits: Hits, toggles: Toggles = Toggles(), cfg: TraceConfig = TraceConfig()):
    """Differentiable RGB for rays that hit; also returns the kept-ray mask."""
    if not np.all(hits.hit):
        raise ValueError("shade_pixel expects only hitting rays")
    x, keep = differentiable_hit(field, rays, hits, cfg)
    rgb, _, _ = shade_points(field, shader, x, rays.dirs[keep], toggles)
    return rgb, keep


@dataclass
class RenderResult:
    rgb: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    mask: np.ndarray


def render_image(
    field,
    shader,
    cam: Camera,
    toggles: Toggles = Toggles(),
    cfg: TraceConfig = TraceConfig(),
    background=(0.0, 0.0, 0.0),
    chunk: int = 4096,
    workers: int = 1,
) -> RenderResult:
    """Forward render of the whole frame; nothing is recorded on the tape."""
    rays = generate_rays(cam)
    n = len(rays)
    rgb = np.tile(np.asarray(background, dtype=np.float64), (n, 1))
    depth = np.zeros(n)
    normals = np.zeros((n, 3))
    mask = np.zeros(n, dtype=bool)

    def work(lo):
        sub = rays.subset(slice(lo, lo + chunk))
        hits = sphere_trace(field, sub, cfg=cfg)
        idx = np.flatnonzero(hits.hit)
        if idx.size == 0:
            return lo, idx, None, None, None
        x = dm.param(hits.x[idx])
        n_, _, feature = normal(field, x, create_graph=False)
        with dm.no_grad():
            feat = None if getattr(field, "feature_dim", 0) == 0 else Value(feature.data)
            c = shader.shade(Value(x.data), Value(n_.data), Value(sub.dirs[idx]), feat, toggles)
        return lo, idx, hits.t[idx], n_.data, c.data

    starts = range(0, n, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(lo) for lo in starts]
    for lo, idx, t, nn, c in results:
        if c is None:
            continue
        k = lo + idx
        mask[k] = True
        depth[k] = t
        normals[k] = nn
        rgb[k] = c
    h, w = cam.height, cam.width
    return RenderResult(rgb.reshape(h, w, 3), depth.reshape(h, w), normals.reshape(h, w, 3), mask.reshape(h, w))


def normal_map_rgb(normals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unit normals mapped to [0, 1] colors; background black."""
    n = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
    return np.where(mask[..., None], 0.5 * (n + 1.0), 0.0)


def overlay(render_rgb: np.ndarray, mask: np.ndarray, image: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    out = image.astype(np.float64).copy()
    m = mask[..., None]
    return np.where(m, alpha * render_rgb + (1 - alpha) * out, out)


# ---------------------------------------------------------------------------
# image files


def save_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr != 0


def save_pfm(path, data: np.ndarray) -> None:
    """Portable float map, little endian, bottom row first."""
    data = np.asarray(data, dtype="<f4")
    color = data.ndim == 3 and data.shape[2] == 3
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def load_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    color = parts[0].strip() == b"PF"
    w, h = (int(s) for s in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (h, w, 3) if color else (h, w)
    arr = np.frombuffer(parts[3], dtype=dtype, count=int(np.prod(shape))).reshape(shape)
    return np.flipud(arr).astype(np.float64)
