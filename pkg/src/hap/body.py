"""SMPL-compatible linear blend skinning, keypoints, and visibility partitioning.

Skinning is written in displacement form,

    v' = v + sum_j w_vj [(G_j - I)(v - J_j) + (p_j - J_j)],

which equals standard LBS when skin weights sum to one and makes the rest
pose reproduce the template bit-for-bit.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import Camera
from .errors import BehindCamera, InvalidArgument
from .geom import TriMesh
from .raster import rasterize

MODEL_FORMAT = "hap-lbs"
MODEL_VERSION = 1


@dataclass
class LBSBodyModel:
    template: np.ndarray         # (V, 3)
    shape_dirs: np.ndarray       # (V, 3, B)
    joint_regressor: np.ndarray  # (J, V)
    skin_weights: np.ndarray     # (V, J)
    parents: np.ndarray          # (J,), parents[0] == -1
    faces: np.ndarray            # (F, 3)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self.shape_dirs = np.asarray(self.shape_dirs, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        V, J = self.num_vertices, self.num_joints
        if self.template.shape != (V, 3) or self.shape_dirs.shape[:2] != (V, 3):
            raise InvalidArgument("template / shape_dirs shape mismatch")
        if self.joint_regressor.shape != (J, V) or self.skin_weights.shape != (V, J):
            raise InvalidArgument("joint_regressor / skin_weights shape mismatch")
        if np.max(np.abs(self.joint_regressor.sum(1) - 1)) > 1e-6:
            raise InvalidArgument("joint_regressor rows must sum to 1")
        if np.any(self.skin_weights < 0) or np.max(np.abs(self.skin_weights.sum(1) - 1)) > 1e-6:
            raise InvalidArgument("skin_weights rows must be nonnegative and sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, J)):
            raise InvalidArgument("parents must describe a tree rooted at joint 0 in topological order")
        TriMesh(self.template, self.faces)

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_betas(self) -> int:
        return self.shape_dirs.shape[2]

    def save(self, json_path) -> None:
        """Write ``model.json`` plus a sibling float32/int32 little-endian blob."""
        json_path = os.fspath(json_path)
        blob_path = os.path.splitext(json_path)[0] + ".bin"
        arrays = {
            "template": self.template.astype("<f4"),
            "shape_dirs": self.shape_dirs.astype("<f4"),
            "joint_regressor": self.joint_regressor.astype("<f4"),
            "skin_weights": self.skin_weights.astype("<f4"),
            "parents": self.parents.astype("<i4"),
            "faces": self.faces.astype("<i4"),
        }
        table, offset = {}, 0
        with open(blob_path, "wb") as fh:
            for name, arr in arrays.items():
                data = np.ascontiguousarray(arr).tobytes()
                table[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
                fh.write(data)
                offset += len(data)
        header = {"format": MODEL_FORMAT, "version": MODEL_VERSION,
                  "blob": os.path.basename(blob_path), "arrays": table}
        with open(json_path, "w") as fh:
            json.dump(header, fh, indent=2)

    @classmethod
    def load(cls, json_path) -> "LBSBodyModel":
        with open(json_path) as fh:
            header = json.load(fh)
        if header.get("format") != MODEL_FORMAT:
            raise InvalidArgument(f"{json_path}: not a {MODEL_FORMAT} model file")
        blob = os.path.join(os.path.dirname(os.fspath(json_path)), header["blob"])
        raw = open(blob, "rb").read()
        out = {}
        for name, spec in header["arrays"].items():
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"]))
            out[name] = np.frombuffer(raw, dtype=dt, count=count, offset=spec["offset"]).reshape(spec["shape"])
        # float32 storage perturbs row sums at the 1e-7 level
        out["joint_regressor"] = out["joint_regressor"] / out["joint_regressor"].astype(np.float64).sum(1, keepdims=True)
        out["skin_weights"] = out["skin_weights"] / out["skin_weights"].astype(np.float64).sum(1, keepdims=True)
        return cls(**out)


def _wrap_axis_angle(theta: np.ndarray) -> np.ndarray:
    ang = np.linalg.norm(theta, axis=-1, keepdims=True)
    over = ang >= 2 * np.pi
    if not np.any(over):
        return theta
    wrapped = np.mod(ang, 2 * np.pi)
    scale = np.divide(wrapped, ang, out=np.ones_like(ang), where=ang > 0)
    return np.where(over, theta * scale, theta)


@dataclass
class BodyParams:
    beta: np.ndarray
    theta: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = _wrap_axis_angle(np.asarray(self.theta, dtype=np.float64).reshape(-1, 3))
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        for name in ("beta", "theta", "translation"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgument(f"body parameter '{name}' must be finite")

    @classmethod
    def zeros(cls, model: LBSBodyModel) -> "BodyParams":
        return cls(np.zeros(model.num_betas), np.zeros((model.num_joints, 3)), np.zeros(3))

    def copy(self) -> "BodyParams":
        return BodyParams(self.beta.copy(), self.theta.copy(), self.translation.copy())

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta": self.theta.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        try:
            return cls(d["beta"], d["theta"], d.get("translation", [0.0, 0.0, 0.0]))
        except KeyError as e:
            raise InvalidArgument(f"body parameters missing field {e.args[0]!r}") from None


def _skew(r: np.ndarray) -> np.ndarray:
    K = np.zeros(r.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -r[..., 2], r[..., 1]
    K[..., 1, 0], K[..., 1, 2] = r[..., 2], -r[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -r[..., 1], r[..., 0]
    return K


_E = _skew(np.eye(3))   # generators [e_i]x


def _rodrigues_coeffs(t2: np.ndarray):
    """a = sin t / t, b = (1 - cos t) / t^2 and their derivatives over t, c = a'/t, d = b'/t."""
    small = t2 < 1e-2
    ts = np.where(small, 1.0, t2)
    t = np.sqrt(ts)
    s, co = np.sin(t), np.cos(t)
    a = np.where(small, 1 - t2 / 6 + t2 ** 2 / 120 - t2 ** 3 / 5040, s / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 ** 2 / 720 - t2 ** 3 / 40320, (1 - co) / ts)
    c = np.where(small, -1 / 3 + t2 / 30 - t2 ** 2 / 840 + t2 ** 3 / 45360, (t * co - s) / (ts * t))
    d = np.where(small, -1 / 12 + t2 / 180 - t2 ** 2 / 6720 + t2 ** 3 / 453600,
                 (t * s - 2 * (1 - co)) / (ts * ts))
    return a, b, c, d


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3); exact identity at zero."""
    r = np.asarray(r, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs((r * r).sum(-1))
    K = _skew(r)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_vjp(r: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Gradient with respect to axis-angle ``r`` (N, 3) given dL/dR (N, 3, 3)."""
    a, b, c, d = _rodrigues_coeffs((r * r).sum(-1))
    K = _skew(r)
    K2 = K @ K
    # dR/dr_i = c r_i K + a E_i + d r_i K^2 + b (E_i K + K E_i)
    gK = np.einsum("nab,nab->n", gR, K)
    gK2 = np.einsum("nab,nab->n", gR, K2)
    out = (c * gK + d * gK2)[:, None] * r
    sym = np.einsum("iab,nbc,nac->ni", _E, K, gR) + np.einsum("nab,ibc,nac->ni", K, _E, gR)
    out += a[:, None] * np.einsum("iab,nab->ni", _E, gR) + b[:, None] * sym
    return out


@dataclass
class Posed:
    """Skinning output plus the intermediates its vector-Jacobian product needs."""
    verts: np.ndarray     # (V, 3)
    joints: np.ndarray    # (J, 3)
    theta: np.ndarray
    v_shaped: np.ndarray
    rest_joints: np.ndarray
    R: np.ndarray
    G: np.ndarray
    A: np.ndarray         # (V, 3, 4) blended affine displacement


def lbs(model: LBSBodyModel, beta, theta, trans) -> Posed:
    """Forward skinning; see ``lbs_vjp`` for the matching reverse pass."""
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    if beta.shape != (model.num_betas,) or theta.shape != (model.num_joints, 3) or trans.shape != (3,):
        raise InvalidArgument("body parameter dimensions do not match the model")
    v_shaped = model.template + model.shape_dirs @ beta
    J = model.joint_regressor @ v_shaped
    R = rodrigues(theta)
    nj = model.num_joints
    G = np.empty((nj, 3, 3))
    D = np.zeros((nj, 3))
    G[0] = R[0]
    for j in range(1, nj):
        p = model.parents[j]
        G[j] = G[p] @ R[j]
        D[j] = D[p] + (G[p] - np.eye(3)) @ (J[j] - J[p])
    M = G - np.eye(3)
    # per-joint affine displacement [M_j | D_j - M_j J_j], blended by skin weights
    T = np.concatenate([M, (D - np.einsum("jab,jb->ja", M, J))[:, :, None]], axis=2)
    A = (model.skin_weights @ T.reshape(nj, 12)).reshape(-1, 3, 4)
    disp = np.einsum("vab,vb->va", A[:, :, :3], v_shaped) + A[:, :, 3]
    return Posed(v_shaped + disp + trans, J + D + trans, theta, v_shaped, J, R, G, A)


def lbs_vjp(model: LBSBodyModel, posed: Posed, g_verts=None, g_joints=None):
    """Reverse pass of ``lbs``: (dL/dbeta, dL/dtheta, dL/dtrans) from dL/dverts, dL/djoints."""
    nj, nv = model.num_joints, model.num_vertices
    gv = np.zeros((nv, 3)) if g_verts is None else np.asarray(g_verts, dtype=np.float64)
    gk = np.zeros((nj, 3)) if g_joints is None else np.asarray(g_joints, dtype=np.float64)
    g_trans = gv.sum(0) + gk.sum(0)
    vs, J, G = posed.v_shaped, posed.rest_joints, posed.G
    vh = np.concatenate([vs, np.ones((nv, 1))], axis=1)
    gT = (model.skin_weights.T @ (gv[:, :, None] * vh[:, None, :]).reshape(nv, 12)).reshape(nj, 3, 4)
    g_vs = gv + np.einsum("vab,va->vb", posed.A[:, :, :3], gv)
    gt = gT[:, :, 3]
    M = G - np.eye(3)
    gG = gT[:, :, :3] - gt[:, :, None] * J[:, None, :]
    gJ = -np.einsum("jab,ja->jb", M, gt) + gk
    gD = gt + gk
    gR = np.empty((nj, 3, 3))
    for j in range(nj - 1, 0, -1):
        p = model.parents[j]
        # G_j = G_p R_j
        gR[j] = G[p].T @ gG[j]
        gG[p] += gG[j] @ posed.R[j].T
        # D_j = D_p + (G_p - I)(J_j - J_p)
        gD[p] += gD[j]
        dj = J[j] - J[p]
        gG[p] += np.outer(gD[j], dj)
        w = M[p].T @ gD[j]
        gJ[j] += w
        gJ[p] -= w
    gR[0] = gG[0]
    g_theta = rodrigues_vjp(posed.theta, gR)
    g_vs += model.joint_regressor.T @ gJ
    g_beta = np.einsum("vkb,vk->b", model.shape_dirs, g_vs)
    return g_beta, g_theta, g_trans


def forward(model: LBSBodyModel, params: BodyParams):
    """Posed mesh and joint positions."""
    posed = lbs(model, params.beta, params.theta, params.translation)
    return TriMesh(posed.verts, model.faces), posed.joints


def project_points_torch(camera: Camera, pts: torch.Tensor) -> torch.Tensor:
    """Differentiable world -> pixel projection, (N, 3) -> (N, 2)."""
    R = torch.as_tensor(camera.rotation, dtype=pts.dtype)
    c = torch.as_tensor(camera.center, dtype=pts.dtype)
    pc = (pts - c) @ R
    if camera.model == "pinhole":
        z = pc[:, 2]
        if torch.any(z <= 0):
            raise BehindCamera("point lies behind the pinhole camera")
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    else:
        u = pc[:, 0] / camera.pixel_size + camera.cx
        v = pc[:, 1] / camera.pixel_size + camera.cy
    return torch.stack([u, v], -1)


def project_with_jacobian(camera: Camera, pts: np.ndarray):
    """Pixel coordinates (N, 2) and their Jacobian with respect to world points (N, 2, 3)."""
    pc = camera.to_camera(pts)
    Rt = camera.rotation.T
    if camera.model == "pinhole":
        z = pc[:, 2]
        if np.any(z <= 0):
            raise BehindCamera("point lies behind the pinhole camera")
        uv = np.stack([camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy], 1)
        Jc = np.zeros((len(pc), 2, 3))
        Jc[:, 0, 0] = camera.fx / z
        Jc[:, 0, 2] = -camera.fx * pc[:, 0] / z ** 2
        Jc[:, 1, 1] = camera.fy / z
        Jc[:, 1, 2] = -camera.fy * pc[:, 1] / z ** 2
    else:
        uv = np.stack([pc[:, 0] / camera.pixel_size + camera.cx, pc[:, 1] / camera.pixel_size + camera.cy], 1)
        Jc = np.zeros((len(pc), 2, 3))
        Jc[:, 0, 0] = Jc[:, 1, 1] = 1.0 / camera.pixel_size
    return uv, Jc @ Rt


def project_keypoints(model: LBSBodyModel, params: BodyParams, camera: Camera) -> np.ndarray:
    """All regressed joints projected to pixels, (J, 2)."""
    _, joints = forward(model, params)
    return project_with_jacobian(camera, joints)[0]


def partition_visibility(mesh: TriMesh, camera: Camera, res) -> tuple[np.ndarray, np.ndarray]:
    """(visible face ids, invisible face ids) from an id-buffer render."""
    w, h = (res, res) if np.isscalar(res) else res
    fb = rasterize(mesh, camera, w, h)
    vis = np.unique(fb.face_id[fb.face_id >= 0])
    hidden = np.setdiff1d(np.arange(len(mesh.faces)), vis)
    return vis, hidden
