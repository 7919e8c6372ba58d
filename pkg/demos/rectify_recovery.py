"""Perturb a mannequin pose, then pull it back onto its own depth scan.

    python demos/rectify_recovery.py [seed]
"""
import sys

import numpy as np

from hap.body import BodyParams, forward
from hap.camera import unproject
from hap.geom import fps, point_to_mesh
from hap.mannequin import front_camera, make_mannequin, random_params, render_scene
from hap.rectify import RectifyConfig, compute_visibility, rectify

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rng = np.random.default_rng(seed)
model, cam = make_mannequin(), front_camera()
truth = random_params(model, rng)
depth, rgb, _ = render_scene(model, truth, cam, 512)
scan = unproject(depth, rgb)
scan = scan.subset(fps(scan, 256, seed=seed))

start = BodyParams(truth.beta, truth.theta + rng.normal(scale=0.1, size=truth.theta.shape),
                   truth.translation + [0.0, 0.0, 0.1])


def visible_p2f(params):
    mesh, _ = forward(model, params)
    return point_to_mesh(scan, mesh.submesh(compute_visibility(mesh, cam, 512).visible))[1]


def report(it, total, terms):
    if it % 250 == 0:
        print(f"iter {it:5d}  loss {total:.6f}  " + "  ".join(f"{k} {v:.2e}" for k, v in terms.items()))


fitted = rectify(model, start, scan, cam, depth.mask, RectifyConfig(), callback=report)
before, after = visible_p2f(start), visible_p2f(fitted)
print(f"P2F to visible faces: {before * 1000:.2f} mm -> {after * 1000:.2f} mm ({after / before:.1%})")
print(f"mean pose error: {np.abs(start.theta - truth.theta).mean():.4f} -> "
      f"{np.abs(fitted.theta - truth.theta).mean():.4f} rad")
