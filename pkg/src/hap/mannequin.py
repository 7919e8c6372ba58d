"""Synthetic articulated mannequin with an SMPL-style 24-joint skeleton.

Real SMPL weights are license-gated; this model shares the kinematic tree,
joint count and parameter layout so every stage can be exercised without
them.  Each bone is a closed tapered tube rigidly bound to its parent
joint, blended with the grandparent near the joint.
"""
from __future__ import annotations

import numpy as np

from .body import BodyParams, LBSBodyModel, forward
from .camera import Camera, DepthMap
from .raster import rasterize

SMPL_PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
]

REST_JOINTS = np.array([
    [0.00, 0.00, 0.00], [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00], [0.00, 0.11, -0.01],
    [0.10, -0.47, 0.00], [-0.10, -0.47, 0.00], [0.00, 0.24, -0.01], [0.09, -0.87, -0.02],
    [-0.09, -0.87, -0.02], [0.00, 0.30, 0.00], [0.11, -0.93, 0.10], [-0.11, -0.93, 0.10],
    [0.00, 0.52, -0.01], [0.08, 0.43, 0.00], [-0.08, 0.43, 0.00], [0.00, 0.60, 0.03],
    [0.18, 0.46, 0.00], [-0.18, 0.46, 0.00], [0.44, 0.44, -0.02], [-0.44, 0.44, -0.02],
    [0.70, 0.45, 0.00], [-0.70, 0.45, 0.00], [0.78, 0.45, 0.00], [-0.78, 0.45, 0.00],
])

# tube radius for the bone ending at each joint
BONE_RADIUS = {
    1: 0.09, 2: 0.09, 3: 0.13, 4: 0.075, 5: 0.075, 6: 0.13, 7: 0.055, 8: 0.055,
    9: 0.14, 10: 0.045, 11: 0.045, 12: 0.14, 13: 0.07, 14: 0.07, 15: 0.05,
    16: 0.06, 17: 0.06, 18: 0.05, 19: 0.05, 20: 0.04, 21: 0.04, 22: 0.035, 23: 0.035,
}

# terminal segments: (joint, tip offset, radius)
LEAF_SEGMENTS = [
    (15, (0.0, 0.20, 0.0), 0.095),
    (22, (0.09, 0.0, 0.0), 0.03), (23, (-0.09, 0.0, 0.0), 0.03),
    (10, (0.0, -0.01, 0.08), 0.035), (11, (0.0, -0.01, 0.08), 0.035),
]


def _frame(axis):
    a = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, ref)
    e1 /= np.linalg.norm(e1)
    return a, e1, np.cross(a, e1)


def _tube(start, end, radius, n_around, n_rings):
    """Closed tapered tube: ring vertices, two cap tips, faces, ring/axis metadata."""
    axis, e1, e2 = _frame(end - start)
    length = np.linalg.norm(end - start)
    ang = 2 * np.pi * np.arange(n_around) / n_around
    circle = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    s = np.linspace(0.0, 1.0, n_rings)
    prof = radius * (0.75 + 0.25 * np.sin(np.pi * s))
    rings = start + s[:, None, None] * (end - start) + prof[:, None, None] * circle[None]
    verts = rings.reshape(-1, 3)
    tip0 = start - 0.35 * radius * axis
    tip1 = end + 0.35 * radius * axis
    if length < 1e-9:
        raise ValueError("zero-length bone")
    verts = np.vstack([verts, tip0, tip1])
    radial = np.vstack([np.repeat(circle[None], n_rings, 0).reshape(-1, 3), np.zeros((2, 3))])
    s_all = np.concatenate([np.repeat(s, n_around), [0.0, 1.0]])
    ring_id = np.concatenate([np.repeat(np.arange(n_rings), n_around), [-1, -1]])
    faces = []
    for r in range(n_rings - 1):
        for k in range(n_around):
            a = r * n_around + k
            b = r * n_around + (k + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces += [(a, b, d), (a, d, c)]
    t0, t1 = n_rings * n_around, n_rings * n_around + 1
    last = (n_rings - 1) * n_around
    for k in range(n_around):
        k2 = (k + 1) % n_around
        faces.append((t0, k2, k))
        faces.append((t1, last + k, last + k2))
    return verts, np.array(faces), radial, s_all, ring_id


def make_mannequin(n_around: int = 10, n_rings: int = 7, num_betas: int = 10, seed: int = 0) -> LBSBodyModel:
    """Deterministic 24-joint mannequin (about 2000 vertices)."""
    J = len(SMPL_PARENTS)
    parents = SMPL_PARENTS
    segments = []  # (start, end, radius, owner joint, joint at start, joint at end or None)
    for c in range(1, J):
        p = parents[c]
        segments.append((REST_JOINTS[p], REST_JOINTS[c], BONE_RADIUS[c], p, p, c))
    for j, off, rad in LEAF_SEGMENTS:
        segments.append((REST_JOINTS[j], REST_JOINTS[j] + np.array(off), rad, j, j, None))

    verts, faces, radial, weights = [], [], [], []
    reg_rows = [[] for _ in range(J)]
    offset = 0
    for start, end, rad, owner, j0, j1 in segments:
        v, f, rd, s, ring = _tube(np.asarray(start, float), np.asarray(end, float), rad, n_around, n_rings)
        w = np.zeros((len(v), J))
        gp = parents[owner]
        if gp < 0:
            w[:, owner] = 1.0
        else:
            own = np.clip(0.5 + 2.0 * s, 0.5, 1.0)
            w[:, owner] = own
            w[:, gp] = 1.0 - own
        verts.append(v)
        faces.append(f + offset)
        radial.append(rd)
        weights.append(w)
        reg_rows[j0].extend(offset + np.nonzero(ring == 0)[0])
        if j1 is not None:
            reg_rows[j1].extend(offset + np.nonzero(ring == n_rings - 1)[0])
        offset += len(v)
    template = np.vstack(verts)
    faces = np.vstack(faces)
    radial = np.vstack(radial)
    skin = np.vstack(weights)
    V = len(template)
    regressor = np.zeros((J, V))
    for j, rows in enumerate(reg_rows):
        regressor[j, rows] = 1.0 / len(rows)

    rng = np.random.default_rng(seed)
    dirs = np.zeros((V, 3, num_betas))
    x, y = template[:, 0], template[:, 1]
    basis = [
        0.05 * template,                                                     # overall scale
        0.01 * radial,                                                       # girth
        np.stack([0 * x, np.where(y < -0.09, 0.05 * (y + 0.09), 0.0), 0 * x], 1),   # leg length
        np.stack([np.where(np.abs(x) > 0.16, 0.05 * (x - np.sign(x) * 0.16), 0.0), 0 * x, 0 * x], 1),
        np.stack([np.where((np.abs(x) < 0.2) & (y > -0.12), 0.03 * x / 0.2, 0.0), 0 * x, 0 * x], 1),
    ]
    while len(basis) < num_betas:
        k = rng.normal(size=3) * 3.0
        phase = rng.uniform(0, 2 * np.pi)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        basis.append(0.008 * np.sin(template @ k + phase)[:, None] * direction)
    for b in range(num_betas):
        dirs[:, :, b] = basis[b]
    return LBSBodyModel(template, dirs, regressor, skin, parents, faces)


def front_camera(res: int = 512, distance: float = 2.8, height: float = -0.1) -> Camera:
    """Pinhole camera on the +z side looking at the mannequin's front."""
    pose = np.eye(4)
    pose[:3, :3] = np.diag([1.0, -1.0, -1.0])
    pose[:3, 3] = (0.0, height, distance)
    f = 1.3 * res
    c = (res - 1) / 2.0
    return Camera("pinhole", f, f, c, c, None, pose)


def random_params(model: LBSBodyModel, rng: np.random.Generator, pose_sigma: float = 0.15,
                  beta_sigma: float = 0.5) -> BodyParams:
    theta = rng.normal(scale=pose_sigma, size=(model.num_joints, 3))
    theta[0] = rng.normal(scale=0.05, size=3)
    return BodyParams(rng.normal(scale=beta_sigma, size=model.num_betas), theta, np.zeros(3))


def render_scene(model: LBSBodyModel, params: BodyParams, camera: Camera, res: int):
    """Exact depth map, mask and shaded RGB of the posed mannequin.

    Returns (DepthMap, rgb uint8 (H, W, 3), posed mesh).
    """
    mesh, _ = forward(model, params)
    fb = rasterize(mesh, camera, res, res)
    mask = fb.face_id >= 0
    depth = np.where(mask, fb.depth, 0.0)
    view = -np.asarray(camera.view_dir)
    shade = np.clip(fb.normal @ view, 0.0, 1.0)
    base = np.array([0.85, 0.65, 0.5])
    tint = 0.15 * np.sin(fb.face_id[..., None] * np.array([0.37, 0.11, 0.23]))
    rgb = np.clip((0.25 + 0.75 * shade[..., None]) * (base + tint), 0, 1) * mask[..., None]
    return DepthMap(depth, mask, camera), (rgb * 255).round().astype(np.uint8), mesh
