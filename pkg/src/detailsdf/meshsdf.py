"""Triangle meshes, BVH point-to-mesh distance and the thickened-shell SDF."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffmath import make_rng


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def cleaned(self, min_area: float = 1e-14) -> "TriMesh":
        """Drop degenerate (near zero-area) faces."""
        keep = self.face_areas() > min_area
        return TriMesh(self.vertices, self.faces[keep])

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def euler_characteristic(self) -> int:
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(e, axis=0))
        n_verts = len(np.unique(self.faces))
        return n_verts - n_edges + len(self.faces)

    def transformed(self, scale: float = 1.0, rotation=None, translation=None) -> "TriMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return TriMesh(v, self.faces.copy())


def normalize_to_box(mesh: TriMesh, half_size: float = 1.0) -> tuple[TriMesh, float, np.ndarray]:
    """Center the bounding box at the origin and fit it in ``[-half_size, half_size]^3``.

    Returns the new mesh, the scale and the pre-scale offset, so that
    ``normalized = (original - offset) * scale``.
    """
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    offset = 0.5 * (lo + hi)
    extent = float(np.max(hi - lo)) / 2.0
    if extent <= 0:
        raise MeshError("mesh has zero extent")
    scale = half_size / extent
    return TriMesh((mesh.vertices - offset) * scale, mesh.faces.copy()), scale, offset


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(v) * radius, np.array(f))


# ---------------------------------------------------------------------------
# Wavefront OBJ


def load_obj(path) -> TriMesh:
    """Read ``v``/``f`` records; polygons are fan-triangulated, degenerate faces dropped."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise MeshError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3)).cleaned()


def save_obj(mesh: TriMesh, path) -> None:
    lines = ["# detailsdf mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# closest point on triangles (vectorised over paired rows)


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle ``(a[i], b[i], c[i])`` to ``p[i]`` for each row.

    Real-time collision detection region tests (Ericson 5.1.5).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]

        # edge regions (assigned in reverse priority so vertex cases win)
        sel = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[sel] = (b + (c - b) * t[:, None])[sel]
        sel = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        out[sel] = (a + ac * t[:, None])[sel]
        sel = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        out[sel] = (a + ab * t[:, None])[sel]
    sel = (d6 >= 0) & (d5 <= d6)
    out[sel] = c[sel]
    sel = (d3 >= 0) & (d4 <= d3)
    out[sel] = b[sel]
    sel = (d1 <= 0) & (d2 <= 0)
    out[sel] = a[sel]
    return out


def point_to_mesh_bruteforce(mesh: TriMesh, points: np.ndarray, chunk: int = 64):
    """Reference scan over every triangle; returns (distance, closest point)."""
    if mesh.is_empty():
        raise MeshError("empty mesh")
    points = np.atleast_2d(points)
    tri = mesh.triangles
    nf = len(tri)
    dist = np.empty(len(points))
    closest = np.empty_like(points)
    for i in range(0, len(points), chunk):
        p = points[i : i + chunk]
        m = len(p)
        pp = np.repeat(p, nf, axis=0)
        q = closest_point_on_triangles(pp, np.tile(tri[:, 0], (m, 1)), np.tile(tri[:, 1], (m, 1)), np.tile(tri[:, 2], (m, 1)))
        d2 = np.sum((pp - q) ** 2, axis=1).reshape(m, nf)
        j = np.argmin(d2, axis=1)
        dist[i : i + m] = np.sqrt(d2[np.arange(m), j])
        closest[i : i + m] = q.reshape(m, nf, 3)[np.arange(m), j]
    return dist, closest


# ---------------------------------------------------------------------------
# BVH


class Bvh:
    """Axis-aligned bounding-box tree over the faces of a mesh.

    Built by median split of triangle centroids along the longest axis.
    Queries are batched: every (query, node) pair still in play is handled
    with array operations, pruned against the best squared distance so far.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = 8):
        if mesh.is_empty():
            raise MeshError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        self.leaf_size = leaf_size
        tri = mesh.triangles
        tmin, tmax = tri.min(axis=1), tri.max(axis=1)
        cent = tri.mean(axis=1)

        lo_list, hi_list, left, right, leaf_of = [], [], [], [], []
        leaves: list[np.ndarray] = []
        stack = [(np.arange(len(tri)), -1, 0)]
        while stack:
            idx, parent, side = stack.pop()
            node = len(lo_list)
            lo_list.append(tmin[idx].min(axis=0))
            hi_list.append(tmax[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            leaf_of.append(-1)
            if parent >= 0:
                (left if side == 0 else right)[parent] = node
            if len(idx) <= leaf_size:
                leaf_of[node] = len(leaves)
                leaves.append(idx)
                continue
            c = cent[idx]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            order = idx[np.argsort(c[:, axis], kind="stable")]
            half = len(order) // 2
            stack.append((order[half:], node, 1))
            stack.append((order[:half], node, 0))

        self.lo = np.array(lo_list)
        self.hi = np.array(hi_list)
        self.left = np.array(left)
        self.right = np.array(right)
        self.leaf_of = np.array(leaf_of)
        self.leaf_tris = np.full((len(leaves), leaf_size), -1, dtype=np.int64)
        for i, idx in enumerate(leaves):
            self.leaf_tris[i, : len(idx)] = idx
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    def _box_d2(self, p, nodes):
        d = np.maximum(self.lo[nodes] - p, 0.0) + np.maximum(p - self.hi[nodes], 0.0)
        return np.sum(d * d, axis=1)

    def _visit_leaves(self, points, q, nodes, best_d2, best_pt):
        tris = self.leaf_tris[self.leaf_of[nodes]]
        qq = np.repeat(q, self.leaf_size)
        tt = tris.reshape(-1)
        ok = tt >= 0
        qq, tt = qq[ok], tt[ok]
        p = points[qq]
        cp = closest_point_on_triangles(p, self._a[tt], self._b[tt], self._c[tt])
        d2 = np.sum((p - cp) ** 2, axis=1)
        order = np.lexsort((d2, qq))
        qq, d2, cp = qq[order], d2[order], cp[order]
        first = np.ones(len(qq), dtype=bool)
        first[1:] = qq[1:] != qq[:-1]
        qq, d2, cp = qq[first], d2[first], cp[first]
        better = d2 < best_d2[qq]
        best_d2[qq[better]] = d2[better]
        best_pt[qq[better]] = cp[better]

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unsigned distance and closest mesh point for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        best_d2 = np.full(n, np.inf)
        best_pt = np.zeros((n, 3))

        # greedy descent gives every query a finite upper bound first
        q = np.arange(n)
        nodes = np.zeros(n, dtype=np.int64)
        inner = self.leaf_of[nodes] < 0
        while inner.any():
            ni = nodes[inner]
            l, r = self.left[ni], self.right[ni]
            pi = points[inner]
            nodes[inner] = np.where(self._box_d2(pi, l) <= self._box_d2(pi, r), l, r)
            inner = self.leaf_of[nodes] < 0
        self._visit_leaves(points, q, nodes, best_d2, best_pt)

        nodes = np.zeros(n, dtype=np.int64)
        while len(q):
            keep = self._box_d2(points[q], nodes) <= best_d2[q]
            q, nodes = q[keep], nodes[keep]
            is_leaf = self.leaf_of[nodes] >= 0
            if is_leaf.any():
                self._visit_leaves(points, q[is_leaf], nodes[is_leaf], best_d2, best_pt)
            qi, ni = q[~is_leaf], nodes[~is_leaf]
            q = np.concatenate([qi, qi])
            nodes = np.concatenate([self.left[ni], self.right[ni]])
        return np.sqrt(best_d2), best_pt


def point_to_mesh(mesh: TriMesh, bvh: Bvh | None, points: np.ndarray):
    """Distance and closest point from each of ``points`` to ``mesh``."""
    if mesh.is_empty():
        raise MeshError("empty mesh")
    bvh = bvh if bvh is not None else Bvh(mesh)
    return bvh.query(points)


def sdf_gt(mesh: TriMesh, bvh: Bvh | None, points: np.ndarray, eps: float) -> np.ndarray:
    """Shell SDF of a mesh thickened to ``eps``: Point2Mesh(x) - eps / 2."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    dist, _ = point_to_mesh(mesh, bvh, points)
    return dist - 0.5 * eps


class MeshSdf:
    """Callable ground-truth shell SDF bound to a mesh and its BVH."""

    def __init__(self, mesh: TriMesh, eps: float = 0.02, leaf_size: int = 8):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.mesh = mesh
        self.eps = eps
        self.bvh = Bvh(mesh, leaf_size=leaf_size)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return sdf_gt(self.mesh, self.bvh, points, self.eps)


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SamplePlan:
    n_surface: int = 4096
    n_uniform: int = 1024
    sigma: float = 0.05
    box_half: float = 1.2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_surface <= 0 or self.n_uniform < 0:
            raise ValueError("sample counts must be positive")

    @classmethod
    def from_total(cls, total: int, surface_fraction: float = 0.8, sigma: float = 0.05, box_half: float = 1.2):
        n_surface = max(1, int(round(total * surface_fraction)))
        return cls(n_surface, max(0, total - n_surface), sigma, box_half)


def sample_surface(mesh: TriMesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on the faces; returns (points, face ids)."""
    rng = make_rng(rng)
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    u, v = 1.0 - s, s * (1.0 - r2)
    w = s * r2
    t = mesh.triangles[face]
    pts = t[:, 0] * u[:, None] + t[:, 1] * v[:, None] + t[:, 2] * w[:, None]
    return pts, face


def sample_points(mesh: TriMesh, plan: SamplePlan, rng) -> np.ndarray:
    """Near-surface samples (jittered along face normals) followed by uniform box samples."""
    rng = make_rng(rng)
    pts, face = sample_surface(mesh, plan.n_surface, rng)
    pts = pts + mesh.face_normals()[face] * rng.normal(0.0, plan.sigma, size=(plan.n_surface, 1))
    uni = rng.uniform(-plan.box_half, plan.box_half, size=(plan.n_uniform, 3))
    return np.concatenate([pts, uni], axis=0)


def warn_if_open(mesh: TriMesh) -> None:
    e = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts == 1):
        warnings.warn("mesh has boundary edges; the shell SDF treats it as a thin sheet", stacklevel=2)
