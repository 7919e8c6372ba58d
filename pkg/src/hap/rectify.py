"""Register the body model to the depth-deduced partial cloud.

Objective, over shape ``beta``, pose ``theta`` and translation:

    L = l1 * P2F(P, S_vis) + l2 * CD(V_vis, P) - l3 * P2F_capped(P, S_hidden)
        + l4 * |beta|^2 + mu_kp * mean |K - K0|^2 + mu_sil * (1 - softIoU(M_S, M_h))

Distances inside the objective are squared, matching the chamfer term.
Closest faces and nearest neighbours are found exactly; with the
feature held fixed the gradient of the minimum (Danskin) is the plain
gradient of the distance to it.  These vertex gradients are formed in
closed form and pulled back through skinning by ``lbs_vjp``; only the
soft silhouette goes through autograd.
The visibility partition is piecewise constant and refreshed on a
schedule.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .body import (BodyParams, LBSBodyModel, forward, lbs, lbs_vjp, partition_visibility, project_keypoints,
                   project_points_torch, project_with_jacobian)
from .camera import Camera
from .errors import DegenerateVisibility, Divergence, InvalidArgument
from .geom import PointCloud, SpatialIndex, TriMesh, closest_faces
from .raster import silhouette

log = logging.getLogger(__name__)

SOFTMIN_POWER = 8.0
TERM_NAMES = ("p2f_visible", "cd_visible", "p2f_hidden", "beta_reg", "keypoint", "silhouette")


@dataclass
class RectifyConfig:
    lambda1: float = 10.0
    lambda2: float = 3.0
    lambda3: float = 0.2
    lambda4: float = 0.1
    mu_kp: float = 1e-5         # px^-2
    mu_sil: float = 0.0
    lr: float = 0.03
    momentum: float = 0.9
    iters: int = 2000
    visibility_refresh: int = 50
    repel_cap: float = 0.05     # meters; per-point saturation of the hidden-surface term
    sil_temperature: float = 1.0
    vis_res: int = 512
    optimize_translation: bool = True

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "mu_kp", "mu_sil"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be nonnegative")
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.iters < 1 or self.visibility_refresh < 1:
            raise InvalidArgument("iters and visibility_refresh must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Visibility:
    visible: np.ndarray         # face ids
    hidden: np.ndarray          # face ids
    visible_vertices: np.ndarray

    @classmethod
    def from_faces(cls, faces: np.ndarray, visible: np.ndarray, hidden: np.ndarray) -> "Visibility":
        return cls(np.asarray(visible), np.asarray(hidden), np.unique(faces[np.asarray(visible, dtype=np.int64)]))


def compute_visibility(mesh: TriMesh, camera: Camera, res) -> Visibility:
    vis, hid = partition_visibility(mesh, camera, res)
    if len(vis) == 0:
        raise DegenerateVisibility("no body-model face is visible from the camera")
    return Visibility.from_faces(mesh.faces, vis, hid)


def soft_silhouette(verts: torch.Tensor, faces: np.ndarray, camera: Camera, width: int, height: int,
                    temperature: float = 1.0) -> torch.Tensor:
    """Differentiable coverage in [0, 1] per pixel, (H, W).

    Each face covers a pixel by sigmoid(d / T) of the pixel's signed
    distance d to the face (positive inside), tapered smoothly to 0 at
    d = -6T; pixels farther out are never visited, so the coverage stays
    differentiable.  Faces combine as 1 - prod(1 - c).
    """
    uv = project_points_torch(camera, verts)
    tri = uv[torch.as_tensor(faces)]                       # (F, 3, 2)
    tri_np = tri.detach().numpy()
    a, b, c = tri_np[:, 0], tri_np[:, 1], tri_np[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    pad = 6.0 * temperature
    lo = np.floor(tri_np.min(1) - pad).astype(np.int64)
    hi = np.ceil(tri_np.max(1) + pad).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    ok = (area != 0) & np.all(hi >= lo, axis=1)
    fids = np.nonzero(ok)[0]
    if len(fids) == 0:
        return torch.zeros((height, width), dtype=verts.dtype)
    bw = hi[fids, 0] - lo[fids, 0] + 1
    bh = hi[fids, 1] - lo[fids, 1] + 1
    counts = bw * bh
    pair_face = np.repeat(fids, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    bw_rep = np.repeat(bw, counts)
    px = lo[pair_face, 0] + local % bw_rep
    py = lo[pair_face, 1] + local // bw_rep
    sign = torch.as_tensor(np.sign(area[pair_face]), dtype=verts.dtype)
    t = tri[torch.as_tensor(pair_face)]
    p = torch.as_tensor(np.stack([px, py], 1), dtype=verts.dtype)
    inside = torch.ones(len(p), dtype=torch.bool)
    dist2, lines = None, []
    for k in range(3):
        e0, e1 = t[:, k], t[:, (k + 1) % 3]
        d = e1 - e0
        rel = p - e0
        line = sign * (d[:, 0] * rel[:, 1] - d[:, 1] * rel[:, 0]) / torch.linalg.norm(d, dim=1)
        inside &= line >= 0
        lines.append(line.clamp_min(1e-12))
        s = ((rel * d).sum(1) / (d * d).sum(1)).clamp(0.0, 1.0)
        seg = ((rel - s[:, None] * d) ** 2).sum(1)
        dist2 = seg if dist2 is None else torch.minimum(dist2, seg)
    # outside: distance to the (convex) triangle, which is C1; inside: a
    # p-norm soft minimum of the edge distances, free of medial-axis kinks
    lines = torch.stack(lines, 1)
    m = lines.min(1).values
    depth_in = m * ((m[:, None] / lines) ** SOFTMIN_POWER).sum(1) ** (-1.0 / SOFTMIN_POWER)
    sd = torch.where(inside, depth_in, -torch.sqrt(dist2.clamp_min(1e-30)))
    # smoothstep taper over the outermost T keeps coverage C1 at the cutoff
    w = ((sd + pad) / temperature).clamp(0.0, 1.0)
    cov = torch.sigmoid(sd / temperature) * w * w * (3.0 - 2.0 * w)
    log_miss = torch.log1p(-cov.clamp_max(1.0 - 1e-12))
    acc = torch.zeros(height * width, dtype=verts.dtype)
    acc = acc.index_add(0, torch.as_tensor(py * width + px), log_miss)
    return (1.0 - torch.exp(acc)).reshape(height, width)


def soft_iou(cov: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    m = torch.as_tensor(mask, dtype=cov.dtype)
    inter = (cov * m).sum()
    return inter / (cov.sum() + m.sum() - inter)


def _scatter(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of ``vals`` (M, 3) into an (n, 3) array at ``idx``."""
    return np.stack([np.bincount(idx, vals[:, d], minlength=n) for d in range(3)], axis=1)


class RectifyProblem:
    """Fixed inputs of one rectification: model, partial cloud, camera, targets.

    Every term yields its value and its gradient with respect to the posed
    vertices or joints; one reverse skinning pass turns those into
    parameter gradients.
    """

    def __init__(self, model: LBSBodyModel, partial, camera: Camera, k0, mh, cfg: RectifyConfig):
        pts = partial.positions if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
        if len(pts) == 0:
            raise InvalidArgument("partial point cloud is empty")
        self.model = model
        self.points = pts
        self.index = SpatialIndex(pts)
        self.camera = camera
        self.k0 = np.asarray(k0, dtype=np.float64)
        self.mask = None if mh is None else np.asarray(mh, dtype=bool)
        self.cfg = cfg
        if self.mask is not None:
            self.res = (self.mask.shape[1], self.mask.shape[0])
        else:
            self.res = (cfg.vis_res, cfg.vis_res)
        if cfg.mu_sil > 0 and self.mask is None:
            raise InvalidArgument("the silhouette penalty needs a human mask")
        self.faces = model.faces

    def visibility(self, verts_np: np.ndarray) -> Visibility:
        return compute_visibility(TriMesh(verts_np, self.faces), self.camera, self.res)

    def _p2f(self, vnp, face_ids, cap=None):
        """Mean squared point-to-face distance and its vertex gradient."""
        P, n = self.points, len(self.points)
        faces = self.faces[face_ids]
        cf = closest_faces(P, vnp, faces, max_dist=np.inf if cap is None else cap)
        hit = cf.face >= 0
        value = float(cf.sqdist.mean())
        r = (cf.point[hit] - P[hit]) * (2.0 / n)            # d/dcp of |P - cp|^2 / n
        corners = faces[cf.face[hit]]
        w = cf.bary[hit]
        grad = _scatter(len(vnp), corners.ravel(), (w[:, :, None] * r[:, None, :]).reshape(-1, 3))
        return value, grad

    def _chamfer(self, vnp, vert_ids):
        P = self.points
        vv = vnp[vert_ids]
        to_p, d_vp = self.index.nearest(vv)
        from_p, d_pv = SpatialIndex(vv).nearest(P)
        value = float(d_vp.mean() + d_pv.mean())
        grad = np.zeros_like(vnp)
        grad[vert_ids] = (vv - P[to_p]) * (2.0 / len(vv))
        grad += _scatter(len(vnp), vert_ids[from_p], (vv[from_p] - P) * (2.0 / len(P)))
        return value, grad

    def evaluate(self, beta, theta, trans, vis: Visibility, per_term: bool = False):
        """Term values and the gradient of the weighted total.

        Returns (values, grads) where grads maps 'beta', 'theta',
        'translation' to arrays.  With ``per_term`` the second value instead
        maps every term name to its own unweighted gradient dict.
        """
        cfg = self.cfg
        posed = lbs(self.model, beta, theta, trans)
        vnp = posed.verts
        zero_v = np.zeros_like(vnp)
        values, gv, gk = {}, {}, {}
        values["p2f_visible"], gv["p2f_visible"] = self._p2f(vnp, vis.visible)
        values["cd_visible"], gv["cd_visible"] = self._chamfer(vnp, vis.visible_vertices)
        if len(vis.hidden):
            values["p2f_hidden"], gv["p2f_hidden"] = self._p2f(vnp, vis.hidden, cap=cfg.repel_cap)
        else:
            values["p2f_hidden"], gv["p2f_hidden"] = cfg.repel_cap ** 2, zero_v
        values["beta_reg"] = float(beta @ beta)
        values["keypoint"], values["silhouette"] = 0.0, 0.0
        if cfg.mu_kp > 0 or per_term:
            uv, jac = project_with_jacobian(self.camera, posed.joints)
            r = uv - self.k0
            values["keypoint"] = float((r ** 2).sum(1).mean())
            gk["keypoint"] = np.einsum("jab,ja->jb", jac, r) * (2.0 / len(r))
        if cfg.mu_sil > 0:
            vt = torch.tensor(vnp, requires_grad=True)
            cov = soft_silhouette(vt, self.faces, self.camera, self.res[0], self.res[1], cfg.sil_temperature)
            loss = 1.0 - soft_iou(cov, self.mask)
            loss.backward()
            values["silhouette"], gv["silhouette"] = float(loss.detach()), vt.grad.numpy()
        w = self.weights()
        if per_term:
            grads = {}
            for name in TERM_NAMES:
                gb, gt, gtr = lbs_vjp(self.model, posed, gv.get(name), gk.get(name))
                if name == "beta_reg":
                    gb = gb + 2.0 * beta
                grads[name] = {"beta": gb, "theta": gt, "translation": gtr}
            return values, grads
        g_verts = sum(w[k] * g for k, g in gv.items())
        g_joints = sum(w[k] * g for k, g in gk.items()) if gk else None
        gb, gt, gtr = lbs_vjp(self.model, posed, g_verts, g_joints)
        gb = gb + w["beta_reg"] * 2.0 * beta
        return values, {"beta": gb, "theta": gt, "translation": gtr}

    def weights(self) -> dict:
        c = self.cfg
        return {"p2f_visible": c.lambda1, "cd_visible": c.lambda2, "p2f_hidden": -c.lambda3,
                "beta_reg": c.lambda4, "keypoint": c.mu_kp, "silhouette": c.mu_sil}

    def total(self, values: dict) -> float:
        return float(sum(w * values[k] for k, w in self.weights().items()))


def rectify_loss(model: LBSBodyModel, params: BodyParams, partial, camera: Camera, k0, mh,
                 cfg: RectifyConfig, visibility: Visibility | None = None, with_grad: bool = False):
    """Objective value and per-term breakdown at ``params``.

    With ``with_grad`` a third value maps every term name to its own
    unweighted gradient dict ('beta', 'theta', 'translation'), plus 'total'
    for the weighted objective.  Pass ``visibility`` to freeze the partition.
    """
    problem = RectifyProblem(model, partial, camera, k0, mh, cfg)
    if visibility is None:
        visibility = problem.visibility(forward(model, params)[0].vertices)
    args = (params.beta, params.theta, params.translation, visibility)
    if not with_grad:
        values, _ = problem.evaluate(*args)
        return problem.total(values), values
    values, grads = problem.evaluate(*args, per_term=True)
    _, grads["total"] = problem.evaluate(*args)
    return problem.total(values), values, grads


def hard_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def rectify(model: LBSBodyModel, params0: BodyParams, partial, camera: Camera, mh, cfg: RectifyConfig,
            callback=None) -> BodyParams:
    """Momentum gradient descent on the objective; returns the lowest-loss iterate.

    The update is heavy-ball SGD, ``v <- momentum * v + g; x <- x - lr * v``.
    ``callback(iteration, total, breakdown)`` is invoked every iteration.
    """
    k0 = project_keypoints(model, params0, camera)
    problem = RectifyProblem(model, partial, camera, k0, mh, cfg)
    x = {"beta": params0.beta.copy(), "theta": params0.theta.copy(), "translation": params0.translation.copy()}
    names = ["beta", "theta"] + (["translation"] if cfg.optimize_translation else [])
    velocity = {k: np.zeros_like(x[k]) for k in names}
    best_loss, best = np.inf, params0.copy()
    vis = None
    for it in range(cfg.iters + 1):
        if it % cfg.visibility_refresh == 0:
            mesh = forward(model, BodyParams(x["beta"], x["theta"], x["translation"]))[0]
            vis = problem.visibility(mesh.vertices)
            if problem.mask is not None and log.isEnabledFor(logging.DEBUG):
                sil = silhouette(mesh, camera, *problem.res)
                log.debug("iter %d hard IoU %.4f", it, hard_iou(sil, problem.mask))
        values, grads = problem.evaluate(x["beta"], x["theta"], x["translation"], vis)
        value = problem.total(values)
        if not np.isfinite(value) or not all(np.all(np.isfinite(grads[k])) for k in names):
            raise Divergence(f"rectification loss became non-finite at iteration {it}", it)
        if callback is not None:
            callback(it, value, values)
        if value < best_loss:
            best_loss = value
            best = BodyParams(x["beta"].copy(), x["theta"].copy(), x["translation"].copy())
        if it == cfg.iters:
            break
        for k in names:
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            x[k] = x[k] - cfg.lr * velocity[k]
    return best
