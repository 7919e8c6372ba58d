"""Conditional DDPM over point clouds.

Noise schedule and forward marginal, epsilon-prediction training, and the
ancestral reverse chain conditioned on a partial cloud plus body-model
surface samples.  The chain arithmetic runs in float64 numpy; only the
denoiser network lives in torch.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import Divergence, InvalidArgument
from .geom import PointCloud, TriMesh, fps

WEIGHTS_MAGIC = b"HAPW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """gamma_t for t = 1..T stored 0-based: ``gamma[t - 1]``."""
    gamma: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if len(g) == 0 or np.any(g <= 0) or np.any(g >= 1):
            raise InvalidArgument("gamma must be a non-empty sequence in (0, 1)")
        a = 1.0 - g
        ab = np.empty_like(a)
        acc = 1.0
        for i, ai in enumerate(a):
            acc *= ai
            ab[i] = acc
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return len(self.gamma)

    @classmethod
    def linear(cls, T: int, start: float = 1e-4, end: float = 0.02, rescale: bool = True) -> "NoiseSchedule":
        """Linear ramp of gamma; ``rescale`` multiplies both ends by 1000 / T so
        shorter chains still end near pure noise (identity at T = 1000)."""
        if T < 1:
            raise InvalidArgument("T must be >= 1")
        s = 1000.0 / T if rescale else 1.0
        return cls(np.linspace(start * s, min(end * s, 0.999), T))

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InvalidArgument(f"diffusion step must lie in [1, {self.T}]")

    def abar(self, t) -> np.ndarray:
        self.check_t(t)
        return self.alpha_bar[np.asarray(t) - 1]

    def posterior_variance(self, t: int) -> float:
        ab_prev = self.alpha_bar[t - 2] if t > 1 else 1.0
        return float((1 - ab_prev) / (1 - self.alpha_bar[t - 1]) * self.gamma[t - 1])

    def to_dict(self) -> dict:
        return {"gamma": self.gamma.tolist()}


def forward_sample(schedule: NoiseSchedule, x0, t: int, eps=None, rng: np.random.Generator | None = None):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    ab = float(schedule.abar(int(t)))
    if eps is None:
        if rng is None:
            raise InvalidArgument("pass eps or a seeded generator")
        eps = rng.standard_normal(x0.shape)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


@dataclass
class Normalizer:
    """x_normalized = (x - center) / scale."""
    center: np.ndarray
    scale: float

    @classmethod
    def fit(cls, points) -> "Normalizer":
        p = np.asarray(points, dtype=np.float64)
        c = p.mean(axis=0)
        r = float(np.sqrt(((p - c) ** 2).sum(1).max())) if len(p) else 0.0
        return cls(c, r if r > 0 else 1.0)

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.center


def assemble_condition(partial: PointCloud, body: TriMesh, n_p: int, n_s: int, seed: int = 0) -> np.ndarray:
    """(n_p + n_s, 6): FPS partial points with rgb, then body surface points with color 0."""
    if n_p > len(partial) or n_p < 1:
        raise InvalidArgument(f"n_p={n_p} must be in [1, {len(partial)}]")
    if n_s < 0:
        raise InvalidArgument("n_s must be >= 0")
    rng = np.random.default_rng(seed)
    idx = fps(partial, n_p, seed=int(rng.integers(2**31)))
    rgb = partial.colors[idx] if partial.colors is not None else np.zeros((n_p, 3))
    rows = [np.hstack([partial.positions[idx], rgb])]
    if n_s:
        dense, _ = body.sample_surface(max(4 * n_s, 1024), rng)
        pick = fps(dense, n_s, seed=int(rng.integers(2**31)))
        rows.append(np.hstack([dense[pick], np.zeros((n_s, 3))]))
    return np.vstack(rows)


def _timestep_features(t: torch.Tensor, T: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    ang = (t.float() / T * 1000.0)[:, None] * freqs[None] / 10.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _mlp(sizes, final_act=True):
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if final_act or i < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class CompactDenoiser(nn.Module):
    """Two-branch PointNet-style epsilon predictor.

    A shared per-point MLP encodes the noisy cloud; a second shared MLP
    encodes the 6-channel condition and is max-pooled to a global code.
    Each point's feature, the noisy cloud's own pooled feature, the
    condition code and a timestep embedding are decoded to a 3-vector.
    The last layer starts at zero so an untrained model predicts 0.
    """

    def __init__(self, T: int, width: int = 128, time_dim: int = 32, seed: int = 0, use_time: bool = True):
        super().__init__()
        self.T, self.width, self.time_dim = int(T), int(width), int(time_dim)
        self.use_time = bool(use_time)
        gen = torch.Generator().manual_seed(seed)
        w = self.width
        self.point_enc = _mlp([3, w // 2, w])
        self.cond_enc = _mlp([6, w // 2, w])
        self.time_enc = _mlp([time_dim, w // 2]) if self.use_time else None
        t_width = w // 2 if self.use_time else 0
        self.decoder = _mlp([3 * w + t_width + 3, 2 * w, w, 3], final_act=False)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
                else:
                    p.zero_()
            last = self.decoder[-1]
            last.weight.zero_()
            last.bias.zero_()
        self.optimizer = None

    def config(self) -> dict:
        return {"T": self.T, "width": self.width, "time_dim": self.time_dim, "use_time": self.use_time}

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        """x_t (B, M, 3), cond (B, C, 6), t (B,) integer steps -> (B, M, 3)."""
        f = self.point_enc(x_t)
        parts = [f.max(dim=1).values, self.cond_enc(cond).max(dim=1).values]
        if self.use_time:
            parts.append(self.time_enc(_timestep_features(t, self.T, self.time_dim)))
        glob = torch.cat(parts, dim=1)[:, None, :].expand(-1, x_t.shape[1], -1)
        return self.decoder(torch.cat([f, glob, x_t], dim=2))

    def predict(self, x_t: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self(torch.as_tensor(x_t, dtype=torch.float32)[None],
                       torch.as_tensor(cond, dtype=torch.float32)[None],
                       torch.tensor([t]))
        return out[0].numpy().astype(np.float64)

    def configure_optimizer(self, kind: str = "adam", lr: float | None = None, momentum: float = 0.9):
        if kind == "sgd":
            self.optimizer = torch.optim.SGD(self.parameters(), lr=1e-3 if lr is None else lr, momentum=momentum)
        elif kind == "adam":
            self.optimizer = torch.optim.Adam(self.parameters(), lr=1e-3 if lr is None else lr)
        else:
            raise InvalidArgument(f"unknown optimizer '{kind}'")
        return self.optimizer

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _batched(a, last: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[2] != last:
        raise InvalidArgument(f"expected (M, {last}) or (B, M, {last}) array")
    return a


def train_step(denoiser: CompactDenoiser, schedule: NoiseSchedule, x0, cond, rng: np.random.Generator) -> float:
    """One optimizer update on the mean squared epsilon-prediction error."""
    if schedule.T != denoiser.T:
        raise InvalidArgument("schedule length does not match the denoiser")
    x0 = _batched(x0, 3)
    cond = _batched(cond, 6)
    B = x0.shape[0]
    if cond.shape[0] != B:
        raise InvalidArgument("x0 and cond batch sizes differ")
    if denoiser.optimizer is None:
        denoiser.configure_optimizer()
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    denoiser.optimizer.zero_grad()
    pred = denoiser(torch.as_tensor(x_t, dtype=torch.float32), torch.as_tensor(cond, dtype=torch.float32),
                    torch.as_tensor(t))
    loss = ((pred - torch.as_tensor(eps, dtype=torch.float32)) ** 2).mean()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise Divergence("denoiser training loss became non-finite", -1)
    loss.backward()
    denoiser.optimizer.step()
    return value


def train_denoiser(denoiser: CompactDenoiser, schedule: NoiseSchedule, samples, steps: int,
                   batch_size: int = 4, seed: int = 0, callback=None) -> list:
    """Train on a list of (x0, cond) pairs already in normalized coordinates.

    Batches draw examples uniformly; returns the per-step losses.
    """
    if not samples:
        raise InvalidArgument("training set is empty")
    rng = np.random.default_rng(seed)
    sizes = {(len(x), len(c)) for x, c in samples}
    losses = []
    for step in range(steps):
        pick = rng.integers(len(samples), size=batch_size if len(sizes) == 1 else 1)
        x0 = np.stack([samples[i][0] for i in pick])
        cond = np.stack([samples[i][1] for i in pick])
        losses.append(train_step(denoiser, schedule, x0, cond, rng))
        if callback is not None:
            callback(step, losses[-1])
    return losses


def reverse_sample(denoiser, schedule: NoiseSchedule, cond, M: int = 10000, seed: int = 0,
                   variance: str = "gamma") -> np.ndarray:
    """Ancestral DDPM sampling, (M, 3) in the denoiser's coordinates.

    ``denoiser`` is a CompactDenoiser or any callable ``f(x_t, t, cond)``
    returning the predicted noise.  ``variance`` picks sigma_t^2 = gamma_t
    ("gamma") or the true posterior variance ("posterior").
    """
    if variance not in ("gamma", "posterior"):
        raise InvalidArgument("variance must be 'gamma' or 'posterior'")
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    eps_fn = denoiser.predict if isinstance(denoiser, CompactDenoiser) else denoiser
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((M, 3))
    for t in range(schedule.T, 0, -1):
        g, a, ab = schedule.gamma[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
        eps = eps_fn(x, t, cond)
        x = (x - g / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
        if t > 1:
            var = g if variance == "gamma" else schedule.posterior_variance(t)
            x = x + math.sqrt(var) * rng.standard_normal((M, 3))
    return x


def generate(denoiser: CompactDenoiser, schedule: NoiseSchedule, partial: PointCloud, body: TriMesh,
             n: int = 10000, seed: int = 0, n_p: int = 8192, n_s: int = 1024,
             variance: str = "gamma") -> PointCloud:
    """Coarse full-body cloud in world coordinates."""
    cond = assemble_condition(partial, body, min(n_p, len(partial)), n_s, seed)
    norm = Normalizer.fit(cond[:, :3])
    cond_n = np.hstack([norm.apply(cond[:, :3]), cond[:, 3:]])
    x = reverse_sample(denoiser, schedule, cond_n, n, seed + 1, variance)
    return PointCloud(norm.invert(x))


def save_weights(path, denoiser: CompactDenoiser, schedule: NoiseSchedule | None = None) -> None:
    """magic | u32 version | u32 header length | JSON header | float32 LE tensors."""
    state = denoiser.state_dict()
    table, offset, blobs = [], 0, []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": denoiser.config(), "tensors": table,
              "schedule": None if schedule is None else schedule.to_dict()}
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(raw)) + raw)
        for b in blobs:
            fh.write(b)


def load_weights(path) -> tuple[CompactDenoiser, NoiseSchedule | None]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise InvalidArgument(f"{path}: not a denoiser weight file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != WEIGHTS_VERSION:
        raise InvalidArgument(f"{path}: unsupported weight file version {version}")
    header = json.loads(data[12:12 + hlen])
    body = data[12 + hlen:]
    model = CompactDenoiser(**header["config"])
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    sched = None if header.get("schedule") is None else NoiseSchedule(header["schedule"]["gamma"])
    return model, sched
