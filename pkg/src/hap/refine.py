"""Displacement refinement of the coarse cloud and depth-replacement densification."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import CompactDenoiser, Normalizer, assemble_condition, load_weights
from .errors import InvalidArgument
from .geom import PointCloud, SpatialIndex, TriMesh, chamfer

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    alpha: float = 1.0          # smoothness weight
    k_s: int = 16               # smoothness / plane-fit neighbours
    k_replace: int = 30
    r_replace: float | None = None   # None: 4 x median NN spacing of the refined cloud
    n_p: int = 2048             # partial points in the learned-mode condition
    n_s: int = 2048             # body surface points in the learned-mode condition

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgument("alpha must be nonnegative")
        if self.k_s < 1 or self.k_replace < 1:
            raise InvalidArgument("k_s and k_replace must be >= 1")
        if self.r_replace is not None and not self.r_replace > 0:
            raise InvalidArgument("r_replace must be positive")


def neighbours_excluding_self(base: np.ndarray, k: int) -> np.ndarray:
    """(N, k) nearest neighbours of every point, the point itself removed,
    ordered by (distance, index)."""
    n = len(base)
    if k >= n:
        raise InvalidArgument(f"k_s={k} must be smaller than the point count {n}")
    idx, _ = SpatialIndex(base).knn_batch(base, k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for row in range(n):
        r = idx[row]
        keep = r[r != row]
        out[row] = keep[:k]
    return out


def smoothness(delta, base, k_s: int) -> float:
    """Mean squared difference of each displacement to its k_s neighbours' (/3)."""
    d = np.asarray(delta, dtype=np.float64)
    b = base.positions if isinstance(base, PointCloud) else np.asarray(base, dtype=np.float64)
    if d.shape != b.shape:
        raise InvalidArgument("delta and base must have the same shape")
    nb = neighbours_excluding_self(b, k_s)
    return float(((d[:, None, :] - d[nb]) ** 2).sum() / (3 * len(b) * k_s))


def refine_objective(h, h_gt, delta, base, cfg: RefineConfig) -> float:
    """chamfer(h, h_gt) + alpha * smoothness(delta)."""
    value = chamfer(h, h_gt)
    if cfg.alpha:
        value += cfg.alpha * smoothness(delta, base, cfg.k_s)
    return value


def _local_planes(pts: np.ndarray, nb: np.ndarray):
    """Centroid and unit normal of the plane fitted to each point's neighbourhood."""
    hood = np.concatenate([pts[:, None, :], pts[nb]], axis=1)
    c = hood.mean(axis=1)
    cov = np.einsum("nki,nkj->nij", hood - c[:, None], hood - c[:, None])
    _, vecs = np.linalg.eigh(cov)
    return c, vecs[:, :, 0]


def closed_form_displacement(pts: np.ndarray, k_s: int) -> np.ndarray:
    """Projective smoothing: each point moves by the distance-weighted mean of
    its offsets onto the planes fitted around itself and its k_s neighbours."""
    k = min(k_s, len(pts) - 1)
    if k < 3:
        return np.zeros_like(pts)
    nb = neighbours_excluding_self(pts, k)
    c, n = _local_planes(pts, nb)
    group = np.concatenate([np.arange(len(pts))[:, None], nb], axis=1)      # (N, k+1)
    # offset of x onto the plane fitted at each group member
    s = np.einsum("ngi,ngi->ng", pts[:, None, :] - c[group], n[group])
    offsets = -s[:, :, None] * n[group]
    d2 = ((pts[group] - pts[:, None, :]) ** 2).sum(-1)
    h2 = np.maximum(d2[:, -1:], 1e-300)
    w = np.exp(-d2 / h2)
    return (w[:, :, None] * offsets).sum(1) / w.sum(1)[:, None]


class DisplacementNet(CompactDenoiser):
    """Per-point displacement predictor sharing the denoiser's two-branch layout (no timestep)."""

    def __init__(self, width: int = 128, seed: int = 0):
        super().__init__(T=1, width=width, seed=seed, use_time=False)

    def displacement(self, coarse_n: np.ndarray, cond_n: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self(torch.as_tensor(coarse_n, dtype=torch.float32)[None],
                       torch.as_tensor(cond_n, dtype=torch.float32)[None])
        return out[0].numpy().astype(np.float64)


def load_refiner(path) -> DisplacementNet:
    """Read a displacement predictor written with ``save_weights``."""
    net, _ = load_weights(path)
    if net.use_time:
        raise InvalidArgument(f"{path}: holds a denoiser, not a displacement predictor")
    out = DisplacementNet(net.width)
    out.load_state_dict(net.state_dict())
    return out


def _torch_chamfer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = torch.cdist(a, b) ** 2
    return d.min(dim=1).values.mean() + d.min(dim=0).values.mean()


def train_refiner(net: DisplacementNet, samples, steps: int, cfg: RefineConfig, lr: float = 1e-3,
                  seed: int = 0, callback=None) -> list:
    """Fit on (coarse, cond, gt) triples in normalized coordinates by minimising
    chamfer(coarse + delta, gt) + alpha * smoothness(delta).  Returns the losses."""
    if not samples:
        raise InvalidArgument("training set is empty")
    rng = np.random.default_rng(seed)
    opt = net.optimizer or net.configure_optimizer("adam", lr)
    prepared = []
    for coarse, cond, gt in samples:
        nb = neighbours_excluding_self(coarse, cfg.k_s) if cfg.alpha else None
        prepared.append((torch.as_tensor(coarse, dtype=torch.float32), torch.as_tensor(cond, dtype=torch.float32),
                         torch.as_tensor(gt, dtype=torch.float32),
                         None if nb is None else torch.as_tensor(nb)))
    losses = []
    for step in range(steps):
        coarse, cond, gt, nb = prepared[int(rng.integers(len(prepared)))]
        opt.zero_grad()
        delta = net(coarse[None], cond[None])[0]
        loss = _torch_chamfer(coarse + delta, gt)
        if nb is not None:
            loss = loss + cfg.alpha * ((delta[:, None] - delta[nb]) ** 2).sum() / (3 * len(coarse) * nb.shape[1])
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if callback is not None:
            callback(step, losses[-1])
    return losses


def refine(coarse: PointCloud, partial: PointCloud | None, body: TriMesh | None, cfg: RefineConfig,
           weights: DisplacementNet | None = None, mode: str = "learned", seed: int = 0) -> PointCloud:
    """Coarse cloud plus a predicted (learned) or projective (closed-form) displacement."""
    pts = coarse.positions
    if mode == "closed-form":
        return PointCloud(pts + closed_form_displacement(pts, cfg.k_s))
    if mode != "learned":
        raise InvalidArgument("mode must be 'learned' or 'closed-form'")
    if weights is None:
        raise InvalidArgument("learned refinement needs predictor weights")
    if partial is None or body is None:
        raise InvalidArgument("learned refinement needs the partial cloud and body mesh")
    cond = assemble_condition(partial, body, min(cfg.n_p, len(partial)), cfg.n_s, seed)
    norm = Normalizer.fit(cond[:, :3])
    cond_n = np.hstack([norm.apply(cond[:, :3]), cond[:, 3:]])
    delta = weights.displacement(norm.apply(pts), cond_n) * norm.scale
    return PointCloud(pts + delta)


@dataclass
class ReplaceResult:
    cloud: PointCloud
    s1: np.ndarray          # indices into h
    s2: np.ndarray          # indices into partial
    s3: np.ndarray          # indices into partial
    from_partial: np.ndarray  # bool per output row
    degenerate: bool


def median_spacing(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    _, d2 = SpatialIndex(points).knn_batch(points, 2)
    return float(np.sqrt(np.median(d2[:, 1])))


def depth_replace(h: PointCloud, partial: PointCloud, cfg: RefineConfig) -> ReplaceResult:
    """Swap the generated points facing the camera for the denser depth points.

    s1: generated points within the ball of some partial point; s2: the
    partial points nearest to the remaining generated points; s3: partial
    points within the ball of some s2 point.  Output (h - s1) then s3, with
    partial colors on s3 and zero color elsewhere.
    """
    if len(h) == 0 or len(partial) == 0:
        raise InvalidArgument("depth replacement needs two non-empty clouds")
    H, P = h.positions, partial.positions
    r = cfg.r_replace if cfg.r_replace is not None else 4.0 * median_spacing(H)
    if not r > 0:
        r = 4.0 * median_spacing(P)
    if not r > 0:
        raise InvalidArgument("cannot derive a positive replacement radius")
    h_index = SpatialIndex(H)
    s1 = np.unique(np.concatenate(h_index.ball_query_batch(P, r, cfg.k_replace) or [np.zeros(0, np.int64)]))
    rest = np.setdiff1d(np.arange(len(H)), s1)
    p_index = SpatialIndex(P)
    s2 = np.unique(p_index.nearest(H[rest])[0]) if len(rest) else np.zeros(0, dtype=np.int64)
    if len(s2):
        s3 = np.unique(np.concatenate(p_index.ball_query_batch(P[s2], r, cfg.k_replace)))
    else:
        s3 = np.zeros(0, dtype=np.int64)
    s1, s2, s3 = s1.astype(np.int64), s2.astype(np.int64), s3.astype(np.int64)
    pos = np.vstack([H[rest], P[s3]])
    rgb = np.zeros((len(pos), 3))
    if partial.colors is not None:
        rgb[len(rest):] = partial.colors[s3]
    degenerate = len(pos) == 0
    if degenerate:
        log.warning("depth replacement removed every point (generated cloud fully overlaps the partial cloud)")
    from_partial = np.zeros(len(pos), dtype=bool)
    from_partial[len(rest):] = True
    return ReplaceResult(PointCloud(pos, rgb), s1, s2, s3, from_partial, degenerate)
