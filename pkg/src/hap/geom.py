"""Point-cloud and triangle-mesh containers plus the distance kernels.

All kernels are exact: nearest-neighbour ties go to the lowest index and
point-to-triangle distances resolve the vertex/edge/interior regions in
closed form.  The KD-tree only prunes candidates; final distances are
recomputed here so results match an O(N^2) scan.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgument


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.positions
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidArgument(f"expected an (N, 3) array, got shape {a.shape}")
    return a


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidArgument("point positions must be finite")
        n = len(self.positions)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise InvalidArgument("colors must have one row per point")
            if np.any(self.colors < 0) or np.any(self.colors > 1):
                raise InvalidArgument("colors must lie in [0, 1]")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != n:
                raise InvalidArgument("normals must have one row per point")
            norms = np.linalg.norm(self.normals, axis=1)
            if n and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise InvalidArgument("normals must be unit length")

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.colors is None else self.colors[idx],
            None if self.normals is None else self.normals[idx],
        )

    def transformed(self, pose: np.ndarray) -> "PointCloud":
        """Apply a 4x4 rigid transform to positions (and normals)."""
        R, t = pose[:3, :3], pose[:3, 3]
        return PointCloud(
            self.positions @ R.T + t,
            self.colors,
            None if self.normals is None else self.normals @ R.T,
        )

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = list(clouds)
        pos = np.concatenate([c.positions for c in clouds]) if clouds else np.zeros((0, 3))
        def merged(attr):
            if all(getattr(c, attr) is None for c in clouds):
                return None
            return np.concatenate([
                getattr(c, attr) if getattr(c, attr) is not None else np.zeros((len(c), 3))
                for c in clouds
            ])
        normals = None
        if clouds and all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        return PointCloud(pos, merged("colors"), normals)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise InvalidArgument("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise InvalidArgument("face with repeated vertex index")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        """Unit face normals (zero rows for degenerate faces)."""
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def submesh(self, face_idx) -> "TriMesh":
        """Mesh restricted to ``face_idx`` with unused vertices dropped."""
        faces = self.faces[np.asarray(face_idx, dtype=np.int64)]
        used, inverse = np.unique(faces, return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3))

    def transformed(self, pose: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices @ pose[:3, :3].T + pose[:3, 3], self.faces)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Area-uniform surface samples; returns (points, face ids)."""
        if len(self.faces) == 0:
            raise InvalidArgument("cannot sample an empty mesh")
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise InvalidArgument("mesh has zero surface area")
        cdf = np.cumsum(areas) / total
        fid = np.searchsorted(cdf, rng.random(n), side="right")
        fid = np.minimum(fid, len(self.faces) - 1)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        tri = self.triangles[fid]
        pts = ((1 - r1)[:, None] * tri[:, 0]
               + (r1 * (1 - r2))[:, None] * tri[:, 1]
               + (r1 * r2)[:, None] * tri[:, 2])
        return pts, fid


def _flatten(lists):
    lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    flat = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=int(lens.sum()))
    rows = np.repeat(np.arange(len(lists)), lens)
    return rows, flat


class SpatialIndex:
    """Balanced KD-tree over a fixed point set with exact, tie-stable queries."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(_as_points(points))
        self.tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def _sqdist(self, rows, idx, queries):
        return ((self.points[idx] - queries[rows]) ** 2).sum(axis=1)

    def knn_batch(self, queries, k: int):
        """(indices, squared distances), each (Q, k), sorted by (distance, index)."""
        q = _as_points(queries)
        n = len(self.points)
        if k < 1 or k > n:
            raise InvalidArgument(f"k={k} must be in [1, {n}]")
        if len(q) == 0:
            return np.zeros((0, k), np.int64), np.zeros((0, k))
        if k < n:
            # fast path: a clear gap after the k-th of k + 1 tree neighbours
            # means no point outside the returned set can enter the top k
            _, cand = self.tree.query(q, k + 1)
            cand = cand.reshape(len(q), k + 1)
            d2 = ((self.points[cand] - q[:, None]) ** 2).sum(-1)
            order = np.lexsort((cand.ravel(), d2.ravel(), np.repeat(np.arange(len(q)), k + 1)))
            cand = cand.ravel()[order].reshape(len(q), k + 1)
            d2 = d2.ravel()[order].reshape(len(q), k + 1)
            ok = d2[:, k] > d2[:, k - 1] * (1 + 1e-9) + 1e-300
            idx, dist = cand[:, :k].copy(), d2[:, :k].copy()
            if not np.all(ok):
                bad = np.nonzero(~ok)[0]
                idx[bad], dist[bad] = self._knn_exact(q[bad], k)
            return idx, dist
        return self._knn_exact(q, k)

    def _knn_exact(self, q, k):
        n = len(self.points)
        if k == n:
            rows = np.repeat(np.arange(len(q)), n)
            flat = np.tile(np.arange(n), len(q))
        else:
            d, _ = self.tree.query(q, k)
            dk = d.reshape(len(q), k)[:, -1]
            # superset of every point tied with the k-th neighbour
            lists = self.tree.query_ball_point(q, dk * (1 + 1e-9) + 1e-300)
            rows, flat = _flatten(lists)
        d2 = self._sqdist(rows, flat, q)
        order = np.lexsort((flat, d2, rows))
        rows, flat, d2 = rows[order], flat[order], d2[order]
        starts = np.searchsorted(rows, np.arange(len(q)))
        take = (starts[:, None] + np.arange(k)).ravel()
        return flat[take].reshape(-1, k), d2[take].reshape(-1, k)

    def nearest(self, queries):
        """Nearest index and squared distance per query (ties to the lower index)."""
        q = _as_points(queries)
        if len(self.points) < 2 or len(q) == 0:
            idx, d2 = self.knn_batch(q, 1)
            return idx[:, 0], d2[:, 0]
        _, cand = self.tree.query(q, 2)
        d2 = ((self.points[cand] - q[:, None]) ** 2).sum(-1)
        second = (d2[:, 1] < d2[:, 0]) | ((d2[:, 1] == d2[:, 0]) & (cand[:, 1] < cand[:, 0]))
        pick = second.astype(np.int64)
        rows = np.arange(len(q))
        idx, best = cand[rows, pick], d2[rows, pick]
        other = d2[rows, 1 - pick]
        ok = other > best * (1 + 1e-9) + 1e-300
        if not np.all(ok):
            bad = np.nonzero(~ok)[0]
            i2, e2 = self._knn_exact(q[bad], 1)
            idx[bad], best[bad] = i2[:, 0], e2[:, 0]
        return idx, best

    def ball_query_batch(self, queries, r: float, k_max: int):
        """List of index arrays (nearest first) within distance ``r``, at most ``k_max`` each."""
        if not r > 0:
            raise InvalidArgument("ball radius must be positive")
        if k_max < 1:
            raise InvalidArgument("k_max must be >= 1")
        q = _as_points(queries)
        n = len(self.points)
        if len(q) == 0:
            return []
        if np.isfinite(r):
            lists = self.tree.query_ball_point(q, r * (1 + 1e-9))
            rows, flat = _flatten(lists)
        else:
            rows = np.repeat(np.arange(len(q)), n)
            flat = np.tile(np.arange(n), len(q))
        d2 = self._sqdist(rows, flat, q)
        keep = d2 <= r * r
        rows, flat, d2 = rows[keep], flat[keep], d2[keep]
        order = np.lexsort((flat, d2, rows))
        rows, flat = rows[order], flat[order]
        bounds = np.searchsorted(rows, np.arange(len(q) + 1))
        return [flat[bounds[i]:min(bounds[i + 1], bounds[i] + k_max)] for i in range(len(q))]


def knn(index: SpatialIndex, q, k: int) -> np.ndarray:
    return index.knn_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), k)[0][0]


def ball_query(index: SpatialIndex, q, r: float, k_max: int) -> np.ndarray:
    return index.ball_query_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), r, k_max)[0]


def fps(pc, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Farthest point sampling.

    The first index is ``start`` if given, otherwise drawn from ``seed``.
    Each later pick maximises the squared distance to the selected set,
    with ties resolved to the lowest index.
    """
    pts = _as_points(pc)
    n = len(pts)
    if m < 1 or m > n:
        raise InvalidArgument(f"m={m} must be in [1, {n}]")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    out = np.empty(m, dtype=np.int64)
    out[0] = first
    d = ((pts - pts[first]) ** 2).sum(axis=1)
    d[first] = -1.0
    for i in range(1, m):
        j = int(np.argmax(d))
        out[i] = j
        # selected entries stay at -1 under the running minimum
        np.minimum(d, ((pts - pts[j]) ** 2).sum(axis=1), out=d)
        d[j] = -1.0
    return out


def chamfer(a, b) -> float:
    """Mean squared NN distance a->b plus mean squared NN distance b->a."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise InvalidArgument("chamfer distance needs two non-empty point sets")
    _, dab = SpatialIndex(pb).nearest(pa)
    _, dba = SpatialIndex(pa).nearest(pb)
    return float(dab.mean() + dba.mean())


def closest_point_barycentric(p, a, b, c) -> np.ndarray:
    """Barycentric weights (N, 3) of the closest point of triangles (a, b, c) to p.

    Region classification follows Ericson, Real-Time Collision Detection 5.1.5.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    n = len(p)
    w = np.empty((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        ww = vc / denom
        w[:] = np.stack([1 - v - ww, v, ww], axis=1)

        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        w[m] = np.stack([np.zeros(n), 1 - t, t], axis=1)[m]

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        w[m] = np.stack([1 - t, np.zeros(n), t], axis=1)[m]

        m = (d6 >= 0) & (d5 <= d6)
        w[m] = (0.0, 0.0, 1.0)

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        w[m] = np.stack([1 - t, t, np.zeros(n)], axis=1)[m]

        m = (d3 >= 0) & (d4 <= d3)
        w[m] = (0.0, 1.0, 0.0)

        m = (d1 <= 0) & (d2 <= 0)
        w[m] = (1.0, 0.0, 0.0)
    bad = ~np.all(np.isfinite(w), axis=1)
    if np.any(bad):
        # degenerate (zero-area) triangles fall back to the nearest vertex
        tri = np.stack([a[bad], b[bad], c[bad]], axis=1)
        k = np.argmin(((tri - p[bad][:, None]) ** 2).sum(-1), axis=1)
        w[bad] = np.eye(3)[k]
    return w


@dataclass
class ClosestFaces:
    """Per-query closest face, barycentric weights, closest point, squared distance."""
    face: np.ndarray
    bary: np.ndarray
    point: np.ndarray
    sqdist: np.ndarray


@numba.njit(cache=True)
def _closest_on_triangle(px, py, pz, tri, f):
    """Scalar Ericson closest-point test; returns (w0, w1, w2, squared distance)."""
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
    cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    if d1 <= 0.0 and d2 <= 0.0:
        w0, w1, w2 = 1.0, 0.0, 0.0
    elif d3 >= 0.0 and d4 <= d3:
        w0, w1, w2 = 0.0, 1.0, 0.0
    elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        w0, w1, w2 = 1.0 - t, t, 0.0
    elif d6 >= 0.0 and d5 <= d6:
        w0, w1, w2 = 0.0, 0.0, 1.0
    elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        w0, w1, w2 = 1.0 - t, 0.0, t
    elif va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        w0, w1, w2 = 0.0, 1.0 - t, t
    else:
        den = va + vb + vc
        v = vb / den
        w = vc / den
        w0, w1, w2 = 1.0 - v - w, v, w
    if not (np.isfinite(w0) and np.isfinite(w1) and np.isfinite(w2)):
        # zero-area triangle: nearest vertex
        da = apx * apx + apy * apy + apz * apz
        db = bpx * bpx + bpy * bpy + bpz * bpz
        dc = cpx * cpx + cpy * cpy + cpz * cpz
        if da <= db and da <= dc:
            w0, w1, w2 = 1.0, 0.0, 0.0
        elif db <= dc:
            w0, w1, w2 = 0.0, 1.0, 0.0
        else:
            w0, w1, w2 = 0.0, 0.0, 1.0
    qx = w0 * ax + w1 * bx + w2 * cx - px
    qy = w0 * ay + w1 * by + w2 * cy - py
    qz = w0 * az + w1 * bz + w2 * cz - pz
    return w0, w1, w2, qx * qx + qy * qy + qz * qz


@numba.njit(cache=True)
def _closest_faces_kernel(q, tri, sphere, lo, h, dims, cell_start, cell_faces, bound2, face_out, bary_out, d2_out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    max_shell = max(nx, max(ny, nz))
    for i in range(q.shape[0]):
        px, py, pz = q[i, 0], q[i, 1], q[i, 2]
        ci = min(max(int(np.floor((px - lo[0]) / h)), 0), nx - 1)
        cj = min(max(int(np.floor((py - lo[1]) / h)), 0), ny - 1)
        ck = min(max(int(np.floor((pz - lo[2]) / h)), 0), nz - 1)
        best, bf = bound2, -1
        b0, b1, b2 = 0.0, 0.0, 0.0
        for s in range(max_shell + 1):
            if best < np.inf:
                # distance from p to the nearest unscanned cell
                gap = np.inf
                if ci - s >= 0:
                    gap = min(gap, px - (lo[0] + (ci - s + 1) * h))
                if ci + s < nx:
                    gap = min(gap, lo[0] + (ci + s) * h - px)
                if cj - s >= 0:
                    gap = min(gap, py - (lo[1] + (cj - s + 1) * h))
                if cj + s < ny:
                    gap = min(gap, lo[1] + (cj + s) * h - py)
                if ck - s >= 0:
                    gap = min(gap, pz - (lo[2] + (ck - s + 1) * h))
                if ck + s < nz:
                    gap = min(gap, lo[2] + (ck + s) * h - pz)
                if gap == np.inf or (gap > 0.0 and best <= gap * gap):
                    break
            for a in range(max(ci - s, 0), min(ci + s, nx - 1) + 1):
                for b in range(max(cj - s, 0), min(cj + s, ny - 1) + 1):
                    on_a = a == ci - s or a == ci + s
                    on_b = b == cj - s or b == cj + s
                    if on_a or on_b:
                        c_lo, c_hi, step = ck - s, ck + s, 1
                    else:
                        c_lo, c_hi, step = ck - s, ck + s, 2 * s if s > 0 else 1
                    c = c_lo
                    while c <= c_hi:
                        if 0 <= c < nz:
                            cell = (a * ny + b) * nz + c
                            for t in range(cell_start[cell], cell_start[cell + 1]):
                                f = cell_faces[t]
                                ex = px - sphere[f, 0]
                                ey = py - sphere[f, 1]
                                ez = pz - sphere[f, 2]
                                dc = np.sqrt(ex * ex + ey * ey + ez * ez) - sphere[f, 3]
                                if dc > 0.0 and dc * dc > best:
                                    continue
                                w0, w1, w2, d2 = _closest_on_triangle(px, py, pz, tri, f)
                                if d2 < best or (d2 == best and f < bf):
                                    best, bf = d2, f
                                    b0, b1, b2 = w0, w1, w2
                        c += step
        face_out[i] = bf
        bary_out[i, 0] = b0
        bary_out[i, 1] = b1
        bary_out[i, 2] = b2
        d2_out[i] = best


@numba.njit(cache=True)
def _face_grid_kernel(tri, cell_scale):
    """Uniform grid over triangle bounding boxes (CSR cell -> face list) and
    per-face bounding spheres (centroid, radius)."""
    nf = tri.shape[0]
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    sphere = np.empty((nf, 4))
    edge2 = np.empty(nf)
    for f in range(nf):
        for d in range(3):
            m = (tri[f, 0, d] + tri[f, 1, d] + tri[f, 2, d]) / 3.0
            sphere[f, d] = m
            for k in range(3):
                lo[d] = min(lo[d], tri[f, k, d])
                hi[d] = max(hi[d], tri[f, k, d])
        r2 = 0.0
        for k in range(3):
            dx = tri[f, k, 0] - sphere[f, 0]
            dy = tri[f, k, 1] - sphere[f, 1]
            dz = tri[f, k, 2] - sphere[f, 2]
            r2 = max(r2, dx * dx + dy * dy + dz * dz)
        # slack keeps the rejection test conservative under rounding
        sphere[f, 3] = np.sqrt(r2) * (1.0 + 1e-9) + 1e-12
        ex = tri[f, 1, 0] - tri[f, 0, 0]
        ey = tri[f, 1, 1] - tri[f, 0, 1]
        ez = tri[f, 1, 2] - tri[f, 0, 2]
        edge2[f] = ex * ex + ey * ey + ez * ez
    extent = 1e-9
    for d in range(3):
        extent = max(extent, hi[d] - lo[d])
    h = max(cell_scale * np.sqrt(np.median(edge2)), extent / 128.0, 1e-9)
    dims = np.empty(3, dtype=np.int64)
    for d in range(3):
        dims[d] = max(int(np.ceil(max(hi[d] - lo[d], 1e-9) / h)), 1)
    ncell = dims[0] * dims[1] * dims[2]
    a0 = np.empty((nf, 3), dtype=np.int64)
    a1 = np.empty((nf, 3), dtype=np.int64)
    start = np.zeros(ncell + 1, dtype=np.int64)
    for f in range(nf):
        for d in range(3):
            tmin = min(tri[f, 0, d], min(tri[f, 1, d], tri[f, 2, d]))
            tmax = max(tri[f, 0, d], max(tri[f, 1, d], tri[f, 2, d]))
            a0[f, d] = min(max(int(np.floor((tmin - lo[d]) / h)), 0), dims[d] - 1)
            a1[f, d] = min(max(int(np.floor((tmax - lo[d]) / h)), 0), dims[d] - 1)
        for a in range(a0[f, 0], a1[f, 0] + 1):
            for b in range(a0[f, 1], a1[f, 1] + 1):
                for c in range(a0[f, 2], a1[f, 2] + 1):
                    start[(a * dims[1] + b) * dims[2] + c + 1] += 1
    for i in range(ncell):
        start[i + 1] += start[i]
    fill = start[:-1].copy()
    cell_faces = np.empty(start[ncell], dtype=np.int64)
    for f in range(nf):
        for a in range(a0[f, 0], a1[f, 0] + 1):
            for b in range(a0[f, 1], a1[f, 1] + 1):
                for c in range(a0[f, 2], a1[f, 2] + 1):
                    cell = (a * dims[1] + b) * dims[2] + c
                    cell_faces[fill[cell]] = f
                    fill[cell] += 1
    return lo, h, dims, start, cell_faces, sphere


def closest_faces(points, vertices, faces, max_dist: float = np.inf) -> ClosestFaces:
    """Exact closest point on a triangle set for every query point.

    Faces are binned into a uniform grid; each query scans cell shells
    outward until the next shell cannot beat the best distance found.
    Ties go to the lowest face index.  With a finite ``max_dist`` the
    search stops there: queries with nothing strictly closer get face -1,
    zero weights, a NaN point and squared distance ``max_dist**2``.
    """
    q = _as_points(points)
    verts = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        raise InvalidArgument("mesh has no faces")
    if not max_dist > 0:
        raise InvalidArgument("max_dist must be positive")
    tri = np.ascontiguousarray(verts[faces])
    lo, h, dims, start, cell_faces, sphere = _face_grid_kernel(tri, 2.0)
    n = len(q)
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    d2 = np.empty(n)
    _closest_faces_kernel(np.ascontiguousarray(q), tri, sphere, lo, h, dims, start, cell_faces,
                          float(max_dist) ** 2, face, bary, d2)
    point = (bary[:, :, None] * tri[face]).sum(axis=1)
    point[face < 0] = np.nan
    return ClosestFaces(face, bary, point, d2)


def point_to_mesh(pc, mesh: TriMesh):
    """Unsquared distance from every point to the mesh surface, and their mean."""
    if len(mesh.faces) == 0:
        raise InvalidArgument("point_to_mesh needs a non-empty mesh")
    pts = _as_points(pc)
    if len(pts) == 0:
        return np.zeros(0), 0.0
    res = closest_faces(pts, mesh.vertices, mesh.faces)
    d = np.sqrt(res.sqdist)
    return d, float(d.mean())


def rigid_transform(R, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def rotation_matrix(axis_angle) -> np.ndarray:
    """Rodrigues' formula for a single axis-angle vector."""
    r = np.asarray(axis_angle, dtype=np.float64)
    th = np.linalg.norm(r)
    if th == 0:
        return np.eye(3)
    k = r / th
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
