"""Train the compact conditional denoiser on a handful of capsules and sample.

Each training cloud comes with a condition: FPS points from its front half
plus points from a thinner capsule standing in for the body model.

    python demos/denoiser_capsules.py [steps]
"""
import sys

import numpy as np
import torch

from hap.diffusion import CompactDenoiser, Normalizer, NoiseSchedule, reverse_sample, train_denoiser
from hap.geom import chamfer, fps, rotation_matrix


def capsule(n, radius, length, R, rng):
    side, caps = 2 * np.pi * radius * length, 4 * np.pi * radius ** 2
    on_side = rng.random(n) < side / (side + caps)
    a = rng.uniform(0, 2 * np.pi, n)
    tube = np.stack([radius * np.cos(a), radius * np.sin(a), rng.uniform(-length / 2, length / 2, n)], 1)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ends = radius * d
    ends[:, 2] += np.sign(d[:, 2]) * length / 2
    return np.where(on_side[:, None], tube, ends) @ R.T


steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
torch.manual_seed(0)
rng = np.random.default_rng(0)
data = []
for i in range(8):
    r, L, R = rng.uniform(0.2, 0.5), rng.uniform(0.0, 1.0), rotation_matrix(rng.normal(size=3))
    dense = capsule(4000, r, L, R, rng)
    front = dense[dense[:, 2] > 0]
    body = capsule(2000, 0.8 * r, L, R, rng)
    cond = np.vstack([np.hstack([front[fps(front, 128, seed=i)], np.full((128, 3), 0.5)]),
                      np.hstack([body[fps(body, 64, seed=i)], np.zeros((64, 3))])])
    norm = Normalizer.fit(cond[:, :3])
    data.append((norm.apply(dense[fps(dense, 256, seed=i)]), np.hstack([norm.apply(cond[:, :3]), cond[:, 3:]])))

schedule = NoiseSchedule.linear(50)
net = CompactDenoiser(schedule.T)
net.configure_optimizer("adam")
print(f"{net.num_parameters()} parameters, training {steps} steps")
losses = train_denoiser(net, schedule, data, steps, batch_size=8, seed=0)
print(f"loss {np.mean(losses[:50]):.3f} -> {np.mean(losses[-50:]):.3f}")
for i, (x0, c) in enumerate(data[:4]):
    sample = reverse_sample(net, schedule, c, len(x0), seed=i)
    print(f"cloud {i}: chamfer to target {chamfer(sample, x0):.4f}")
