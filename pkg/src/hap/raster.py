"""Software z-buffer rasterizer: depth, face id, silhouette and normal buffers.

Samples sit at integer pixel coordinates.  Coverage uses edge functions
with a fixed ownership rule for pixels exactly on an edge, so two
triangles sharing an edge never both claim a sample.  Depth is camera z,
interpolated perspective-correctly for pinhole cameras.  Faces are drawn
two-sided; depth ties go to the lower face index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .geom import TriMesh


@dataclass
class FrameBuffer:
    width: int
    height: int
    depth: np.ndarray
    face_id: np.ndarray
    normal: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0


@numba.njit(cache=True)
def _owns(ax, ay, bx, by):
    dy = by - ay
    return dy > 0 or (dy == 0 and bx - ax < 0)


@numba.njit(cache=True)
def _raster_kernel(sx, sy, sz, faces, perspective, width, height, depth, fid):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        x0, y0, z0 = sx[i0], sy[i0], sz[i0]
        x1, y1, z1 = sx[i1], sy[i1], sz[i1]
        x2, y2, z2 = sx[i2], sy[i2], sz[i2]
        if perspective and (z0 <= 0.0 or z1 <= 0.0 or z2 <= 0.0):
            continue
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0 or not np.isfinite(area):
            continue
        if area < 0.0:
            x1, y1, z1, x2, y2, z2 = x2, y2, z2, x1, y1, z1
            area = -area
        xmin = max(0, int(np.ceil(min(x0, x1, x2))))
        xmax = min(width - 1, int(np.floor(max(x0, x1, x2))))
        ymin = max(0, int(np.ceil(min(y0, y1, y2))))
        ymax = min(height - 1, int(np.floor(max(y0, y1, y2))))
        if xmin > xmax or ymin > ymax:
            continue
        own0 = _owns(x1, y1, x2, y2)
        own1 = _owns(x2, y2, x0, y0)
        own2 = _owns(x0, y0, x1, y1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                if w0 < 0.0 or (w0 == 0.0 and not own0):
                    continue
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                if w1 < 0.0 or (w1 == 0.0 and not own1):
                    continue
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if w2 < 0.0 or (w2 == 0.0 and not own2):
                    continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                if perspective:
                    z = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
                else:
                    z = l0 * z0 + l1 * z1 + l2 * z2
                if z < depth[py, px]:
                    depth[py, px] = z
                    fid[py, px] = f


def screen_coords(mesh: TriMesh, camera: Camera):
    """Vertex pixel coordinates and camera depth (u, v, z)."""
    pc = camera.to_camera(mesh.vertices)
    if camera.model == "pinhole":
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.fx * pc[:, 0] / z + camera.cx
            v = camera.fy * pc[:, 1] / z + camera.cy
        return u, v, z
    return camera.project_camera(pc, check=False)


def facing_normals(mesh: TriMesh, camera: Camera) -> np.ndarray:
    """World-frame unit face normals flipped to face the camera."""
    n = mesh.face_normals()
    if camera.model == "pinhole":
        to_cam = camera.center - mesh.triangles.mean(axis=1)
        flip = np.einsum("ij,ij->i", n, to_cam) < 0
    else:
        flip = n @ camera.view_dir > 0
    n[flip] *= -1
    return n


def rasterize(mesh: TriMesh, camera: Camera, w: int, h: int) -> FrameBuffer:
    w, h = int(w), int(h)
    depth = np.full((h, w), np.inf)
    fid = np.full((h, w), -1, dtype=np.int64)
    if len(mesh.faces):
        u, v, z = screen_coords(mesh, camera)
        _raster_kernel(np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(z),
                       np.ascontiguousarray(mesh.faces), camera.model == "pinhole", w, h, depth, fid)
    normal = np.zeros((h, w, 3))
    cov = fid >= 0
    if np.any(cov):
        normal[cov] = facing_normals(mesh, camera)[fid[cov]]
    return FrameBuffer(w, h, depth, fid, normal)


def silhouette(mesh: TriMesh, camera: Camera, w: int, h: int) -> np.ndarray:
    return rasterize(mesh, camera, w, h).face_id >= 0


def normal_map(mesh: TriMesh, camera: Camera, w: int, h: int) -> np.ndarray:
    """Camera-facing flat normals in the view frame (x right, y up, z toward viewer).

    Background pixels are zero.
    """
    fb = rasterize(mesh, camera, w, h)
    return world_to_view_normals(fb.normal, camera) * fb.mask[..., None]


def world_to_view_normals(n: np.ndarray, camera: Camera) -> np.ndarray:
    nc = n @ camera.rotation
    return nc * np.array([1.0, -1.0, -1.0])


@numba.njit(cache=True)
def _splat_kernel(u, v, z, nrm, radius, width, height, depth, out):
    r = int(np.ceil(radius))
    for i in range(u.shape[0]):
        cu = int(np.floor(u[i] + 0.5))
        cv = int(np.floor(v[i] + 0.5))
        for py in range(max(0, cv - r), min(height - 1, cv + r) + 1):
            for px in range(max(0, cu - r), min(width - 1, cu + r) + 1):
                if (px - u[i]) ** 2 + (py - v[i]) ** 2 > radius * radius:
                    continue
                if z[i] < depth[py, px]:
                    depth[py, px] = z[i]
                    out[py, px, 0] = nrm[i, 0]
                    out[py, px, 1] = nrm[i, 1]
                    out[py, px, 2] = nrm[i, 2]


def splat_normal_map(points, normals, camera: Camera, w: int, h: int, radius_px: float) -> np.ndarray:
    """View-frame normal map of an oriented point cloud drawn as screen-space disks."""
    pc = camera.to_camera(points)
    u, v, z = camera.project_camera(pc, check=False)
    keep = np.isfinite(u) & np.isfinite(v) & ((z > 0) | (camera.model != "pinhole"))
    n = np.asarray(normals, dtype=np.float64)
    facing = n @ camera.rotation
    # orient toward the viewer
    facing[facing[:, 2] > 0] *= -1
    nv = facing * np.array([1.0, -1.0, -1.0])
    depth = np.full((h, w), np.inf)
    out = np.zeros((h, w, 3))
    _splat_kernel(u[keep], v[keep], z[keep], np.ascontiguousarray(nv[keep]), float(radius_px),
                  int(w), int(h), depth, out)
    return out
