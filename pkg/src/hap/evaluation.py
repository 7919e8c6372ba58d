"""Reconstruction metrics: chamfer, point-to-face and rendered-normal difference."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import Camera
from .errors import InvalidArgument
from .geom import PointCloud, SpatialIndex, TriMesh, closest_faces, rotation_matrix
from .raster import normal_map, splat_normal_map

REPORT_UNIT = 1e-4


def _check_mesh(m: TriMesh, name: str) -> None:
    if len(m.faces) == 0 or len(m.vertices) == 0:
        raise InvalidArgument(f"{name} mesh is empty")


def _sq_to_mesh(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    return closest_faces(points, mesh.vertices, mesh.faces).sqdist


def eval_cd(rec: TriMesh, gt: TriMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    """Bidirectional point-to-surface chamfer (squared distances, averaged over both directions).

    ``n_samples`` area-uniform points are drawn on each mesh.
    """
    _check_mesh(rec, "reconstructed")
    _check_mesh(gt, "ground-truth")
    rng = np.random.default_rng(seed)
    a, _ = rec.sample_surface(n_samples, rng)
    b, _ = gt.sample_surface(n_samples, rng)
    return 0.5 * float(_sq_to_mesh(a, gt).mean() + _sq_to_mesh(b, rec).mean())


def eval_cd_cloud(rec: PointCloud, gt: TriMesh, n_samples: int = 100_000, seed: int = 0) -> float:
    """Cloud-only variant: surface-to-cloud distances replace the missing reconstructed surface."""
    _check_mesh(gt, "ground-truth")
    if len(rec) == 0:
        raise InvalidArgument("reconstructed cloud is empty")
    rng = np.random.default_rng(seed)
    b, _ = gt.sample_surface(n_samples, rng)
    _, d_gt = SpatialIndex(rec.positions).nearest(b)
    return 0.5 * float(_sq_to_mesh(rec.positions, gt).mean() + d_gt.mean())


def eval_p2f(gt_points, rec: TriMesh) -> float:
    """Mean (unsquared) distance from ground-truth points to the reconstructed surface."""
    _check_mesh(rec, "reconstructed")
    pts = gt_points.positions if isinstance(gt_points, PointCloud) else np.asarray(gt_points, dtype=np.float64)
    if len(pts) == 0:
        raise InvalidArgument("no ground-truth points")
    return float(np.sqrt(_sq_to_mesh(pts, rec)).mean())


def _normal_l2(na: np.ndarray, nb: np.ndarray) -> float:
    cover = np.any(na != 0, axis=-1) | np.any(nb != 0, axis=-1)
    if not np.any(cover):
        return 0.0
    return float(np.linalg.norm(na - nb, axis=-1)[cover].mean())


def eval_normal(rec: TriMesh, gt: TriMesh, views, res: int = 256) -> float:
    """Mean per-pixel L2 between view-frame normal maps over the union of covered pixels,
    averaged over views.  A pixel covered by one mesh only counts against the empty normal 0."""
    _check_mesh(rec, "reconstructed")
    _check_mesh(gt, "ground-truth")
    views = list(views)
    if not views:
        raise InvalidArgument("eval_normal needs at least one view")
    return float(np.mean([_normal_l2(normal_map(rec, v, res, res), normal_map(gt, v, res, res)) for v in views]))


def eval_normal_cloud(rec: PointCloud, gt: TriMesh, views, res: int = 256, radius_px: float = 1.5) -> float:
    """Normal difference for an oriented cloud drawn as screen-space disks."""
    if rec.normals is None:
        raise InvalidArgument("the reconstructed cloud has no normals")
    return float(np.mean([_normal_l2(splat_normal_map(rec.positions, rec.normals, v, res, res, radius_px),
                                     normal_map(gt, v, res, res)) for v in views]))


def fixed_views(gt: TriMesh, res: int = 256, up_axis: int = 1, n_views: int = 4, margin: float = 1.1) -> list:
    """Orthographic cameras at equally spaced yaws about ``up_axis`` around the GT
    centroid, framing its bounding sphere."""
    c = gt.vertices.mean(axis=0)
    r = float(np.sqrt(((gt.vertices - c) ** 2).sum(1).max()))
    up = np.zeros(3)
    up[up_axis] = 1.0
    side = np.zeros(3)
    side[(up_axis + 2) % 3] = 1.0
    cams = []
    for k in range(n_views):
        Ry = rotation_matrix(up * (2 * np.pi * k / n_views))
        forward = -(Ry @ side)           # looking at the centre from +side rotated
        down = -up
        right = np.cross(down, forward)
        pose = np.eye(4)
        pose[:3, :3] = np.stack([right, down, forward], axis=1)
        pose[:3, 3] = c - forward * 3.0 * r
        half = (res - 1) / 2.0
        cams.append(Camera("orthographic", None, None, half, half, 2.0 * margin * r / res, pose))
    return cams


@dataclass
class Normalization:
    center: np.ndarray
    scale: float

    @classmethod
    def from_mesh(cls, gt: TriMesh) -> "Normalization":
        c = gt.vertices.mean(axis=0)
        r = float(np.sqrt(((gt.vertices - c) ** 2).sum(1).max()))
        return cls(c, r if r > 0 else 1.0)

    def mesh(self, m: TriMesh) -> TriMesh:
        return TriMesh((m.vertices - self.center) / self.scale, m.faces)

    def cloud(self, pc: PointCloud) -> PointCloud:
        return PointCloud((pc.positions - self.center) / self.scale, pc.colors, pc.normals)


@dataclass
class EvalReport:
    cd: float               # units of 1e-4 (squared length)
    p2f: float              # units of 1e-4 (length)
    normal: float | None
    n_samples: int
    views: list
    normalized: bool
    scale: float
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def evaluate(rec, gt: TriMesh, n_samples: int = 100_000, seed: int = 0, res: int = 256,
             normalize: bool = True, views=None) -> EvalReport:
    """All three metrics for a mesh or (cloud-only) point-cloud reconstruction.

    With ``normalize`` both inputs share the transform that maps the GT to
    zero mean and unit bounding radius, so values compare across subjects.
    """
    _check_mesh(gt, "ground-truth")
    norm = Normalization.from_mesh(gt) if normalize else Normalization(np.zeros(3), 1.0)
    gt_n = norm.mesh(gt)
    cams = fixed_views(gt_n, res) if views is None else list(views)
    notes = ["normal maps rendered from a fixed orthographic rig, not the original renderer"]
    rng = np.random.default_rng(seed)
    gt_pts, _ = gt_n.sample_surface(n_samples, rng)
    sub = int(rng.integers(2**31))
    if isinstance(rec, TriMesh):
        rec_n = norm.mesh(rec)
        cd = eval_cd(rec_n, gt_n, n_samples, sub)
        p2f = eval_p2f(gt_pts, rec_n)
        normal = eval_normal(rec_n, gt_n, cams, res)
    elif isinstance(rec, PointCloud):
        rec_n = norm.cloud(rec)
        notes.append("cloud-only reconstruction: CD and P2F use nearest cloud points in place of a surface")
        cd = eval_cd_cloud(rec_n, gt_n, n_samples, sub)
        _, d2 = SpatialIndex(rec_n.positions).nearest(gt_pts)
        p2f = float(np.sqrt(d2).mean())
        if rec_n.normals is not None:
            normal = eval_normal_cloud(rec_n, gt_n, cams, res)
            notes.append("normal difference from splatted oriented points")
        else:
            normal = None
            notes.append("normal difference unavailable: cloud has no normals")
    else:
        raise InvalidArgument("reconstruction must be a TriMesh or PointCloud")
    return EvalReport(cd / REPORT_UNIT, p2f / REPORT_UNIT, normal, n_samples,
                      [c.to_dict() for c in cams], normalize, norm.scale, notes)
