"""End-to-end orchestration: lift, rectify, generate, refine, replace, mesh, eval.

Every stage writes its artifacts into one directory and records their
sha256 digests, together with a fingerprint of the stage's inputs, in
``manifest.json``.  A later run skips any stage whose fingerprint and
output digests still match, so deleting one artifact re-runs only the
stages that depend on it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import io
from .body import BodyParams, LBSBodyModel, forward
from .camera import unproject
from .diffusion import NoiseSchedule, generate, load_weights
from .errors import ExternalToolError, HapError, InvalidArgument, StageFailure
from .evaluation import evaluate
from .geom import PointCloud, TriMesh, closest_faces, fps
from .rectify import RectifyConfig, rectify
from .refine import RefineConfig, _local_planes, depth_replace, load_refiner, neighbours_excluding_self, refine

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("lift", "rectify", "generate", "refine", "replace", "mesh", "eval")
MANIFEST = "manifest.json"


def stage_seed(root: int, label: str) -> int:
    """Per-stage seed derived from the root seed and a fixed label."""
    h = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


@dataclass
class GenerateConfig:
    n: int = 10000
    n_p: int = 8192
    n_s: int = 1024
    variance: str = "gamma"


@dataclass
class MeshConfig:
    poisson_bin: str | None = None
    poisson_depth: int = 8
    timeout: float = 600.0
    k_normals: int = 16


@dataclass
class EvalConfig:
    samples: int = 100_000
    res: int = 256
    normalize: bool = True


@dataclass
class PipelineConfig:
    out_dir: str
    depth: str
    mask: str
    camera: str | None = None
    rgb: str | None = None
    model: str | None = None
    init_params: str | None = None
    weights: str | None = None          # denoiser
    refiner_weights: str | None = None
    gt_mesh: str | None = None
    seed: int = 0
    stages: dict = field(default_factory=lambda: {s: True for s in STAGES})
    rectify: RectifyConfig = field(default_factory=RectifyConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_mode: str | None = None      # None: learned with refiner weights, else closed-form
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    PATH_KEYS = ("depth", "mask", "camera", "rgb", "model", "init_params", "weights", "refiner_weights", "gt_mesh")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "PipelineConfig":
        d = dict(d)
        inputs = dict(d.pop("inputs", {}))
        sections = {"rectify": RectifyConfig, "generate": GenerateConfig, "refine": RefineConfig,
                    "mesh": MeshConfig, "eval": EvalConfig}
        kw = {}
        for name, kind in sections.items():
            sec = dict(d.pop(name, {}))
            if name == "refine" and "mode" in sec:
                kw["refine_mode"] = sec.pop("mode")
            known = {f.name for f in fields(kind)}
            unknown = set(sec) - known
            if unknown:
                raise InvalidArgument(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
            kw[name] = kind(**sec)
        stages = {s: True for s in STAGES}
        for k, v in dict(d.pop("stages", {})).items():
            if k not in STAGES:
                raise InvalidArgument(f"unknown stage '{k}'")
            stages[k] = bool(v)
        kw["stages"] = stages
        for k in cls.PATH_KEYS:
            if k in inputs:
                kw[k] = inputs.pop(k)
        if inputs:
            raise InvalidArgument(f"unknown key(s) in [inputs]: {', '.join(sorted(inputs))}")
        for k in ("out_dir", "seed"):
            if k in d:
                kw[k] = d.pop(k)
        if d:
            raise InvalidArgument(f"unknown top-level key(s): {', '.join(sorted(d))}")
        for k in ("depth", "mask", "out_dir"):
            if k not in kw:
                raise InvalidArgument(f"config is missing '{k}'")
        for k in cls.PATH_KEYS + ("out_dir",):
            if kw.get(k) is not None:
                kw[k] = os.path.normpath(os.path.join(base_dir, kw[k]))
        cfg = cls(**kw)
        if cfg.refine_mode not in (None, "learned", "closed-form"):
            raise InvalidArgument("refine mode must be 'learned' or 'closed-form'")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, "rb") as fh:
                d = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise InvalidArgument(f"{path}: config does not parse ({e})") from None
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def validate(self) -> None:
        missing = [f"{k}={getattr(self, k)}" for k in self.PATH_KEYS
                   if getattr(self, k) is not None and not os.path.exists(getattr(self, k))]
        if missing:
            raise InvalidArgument("referenced file(s) not found: " + ", ".join(missing))
        if self.stages["rectify"] and self.model is None:
            raise InvalidArgument("the rectify stage needs a body model path")
        if self.refine_mode == "learned" and self.refiner_weights is None:
            raise InvalidArgument("learned refinement needs refiner_weights")

    def section(self, name: str) -> dict:
        val = getattr(self, name)
        return asdict(val) if hasattr(val, "__dataclass_fields__") else val


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def estimate_normals(points: np.ndarray, body: TriMesh | None, k: int = 16) -> np.ndarray:
    """Local-plane normals, flipped to point away from the nearest body-surface point.

    Without a body mesh the cloud centroid is the reference.
    """
    k = min(k, len(points) - 1)
    if k < 2:
        raise InvalidArgument("normal estimation needs at least three points")
    _, n = _local_planes(points, neighbours_excluding_self(points, k))
    if body is not None:
        cf = closest_faces(points, body.vertices, body.faces)
        away = points - cf.point
        # points on the body surface fall back to the face normal
        flat = (away ** 2).sum(1) < 1e-18
        away[flat] = body.face_normals()[cf.face[flat]]
    else:
        away = points - points.mean(axis=0)
    n = np.where(((n * away).sum(1) < 0)[:, None], -n, n)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def poisson_args(poisson_bin: str, in_path: str, out_path: str, depth: int) -> list:
    """Command line for a screened-Poisson executable (PoissonRecon argument style)."""
    return [poisson_bin, "--in", in_path, "--out", out_path, "--depth", str(int(depth))]


def mesh_external(cloud: PointCloud, poisson_bin: str, depth: int = 8, timeout: float = 600.0) -> TriMesh:
    """Run an external screened-Poisson tool on an oriented cloud and read back its mesh."""
    if cloud.normals is None:
        raise InvalidArgument("meshing needs an oriented cloud (normals missing)")
    exe = shutil.which(poisson_bin) or (poisson_bin if os.access(poisson_bin, os.X_OK) else None)
    if exe is None:
        raise ExternalToolError(f"meshing executable not found: {poisson_bin}")
    with tempfile.TemporaryDirectory(prefix="hap-mesh-") as tmp:
        src, dst = os.path.join(tmp, "oriented.ply"), os.path.join(tmp, "mesh.ply")
        io.write_point_cloud(src, cloud)
        args = poisson_args(exe, src, dst, depth)
        log.info("running %s", " ".join(args))
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as e:
            raise ExternalToolError(f"meshing tool timed out after {timeout:g} s", str(e.stderr or "")) from None
        if proc.returncode != 0:
            raise ExternalToolError(f"meshing tool exited with status {proc.returncode}", proc.stderr)
        try:
            mesh = io.read_mesh(dst)
        except (OSError, ValueError, KeyError) as e:
            raise ExternalToolError(f"meshing tool output is unreadable ({e})", proc.stderr) from None
    if len(mesh.faces) == 0:
        raise ExternalToolError("meshing tool produced an empty mesh", proc.stderr)
    return mesh


class Run:
    """One pipeline execution over an artifact directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.manifest_path = os.path.join(self.out, MANIFEST)
        self.manifest = {}
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        self.executed = []

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def digest(self, name: str) -> str | None:
        p = self.path(name)
        return sha256_file(p) if os.path.exists(p) else None

    def _fingerprint(self, stage: str, config: dict, inputs: dict) -> str:
        blob = json.dumps({"stage": stage, "seed": self.cfg.seed, "config": config, "inputs": inputs},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def _up_to_date(self, stage: str, fp: str) -> bool:
        entry = self.manifest.get(stage)
        if entry is None or entry["fingerprint"] != fp:
            return False
        return all(self.digest(name) == dg for name, dg in entry["outputs"].items())

    def stage(self, stage: str, config: dict, inputs: dict, fn) -> None:
        """Run ``fn()`` unless its recorded outputs are current; ``fn`` returns output names."""
        fp = self._fingerprint(stage, config, inputs)
        if self._up_to_date(stage, fp):
            log.info("stage %s: up to date, skipped", stage)
            return
        log.info("stage %s: running", stage)
        try:
            outputs = fn()
        except StageFailure:
            raise
        except (HapError, ValueError, OSError, RuntimeError, KeyError) as e:
            raise StageFailure(stage, e) from e
        self.manifest[stage] = {"fingerprint": fp, "outputs": {n: self.digest(n) for n in outputs}}
        with open(self.manifest_path, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
        self.executed.append(stage)

    def file_inputs(self, *names) -> dict:
        return {n: self.digest(n) for n in names}


def _external_inputs(cfg: PipelineConfig, *keys) -> dict:
    return {k: (sha256_file(getattr(cfg, k)) if getattr(cfg, k) else None) for k in keys}


def run(cfg: PipelineConfig) -> Run:
    """Execute (or resume) the pipeline; returns the Run with the list of executed stages."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(cfg.out_dir, "log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("hap")
    pkg_log.addHandler(handler)
    prev_level = pkg_log.level
    if pkg_log.getEffectiveLevel() > logging.INFO:
        pkg_log.setLevel(logging.INFO)
    try:
        r = Run(cfg)
        _run_stages(r)
        return r
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(prev_level)
        handler.close()


def _load_model(cfg: PipelineConfig) -> LBSBodyModel | None:
    return LBSBodyModel.load(cfg.model) if cfg.model else None


def _run_stages(r: Run) -> None:
    cfg = r.cfg
    on = cfg.stages

    def lift():
        dm = io.load_depth_map(cfg.depth, cfg.mask, cfg.camera)
        rgb = io.read_png(cfg.rgb) if cfg.rgb else None
        partial = unproject(dm, rgb)
        if len(partial) == 0:
            raise InvalidArgument("the mask selects no valid depth pixel")
        io.write_point_cloud(r.path("partial.ply"), partial)
        io.write_camera(r.path("camera.json"), dm.camera)
        io.write_mask(r.path("mask.png"), dm.mask)
        return ["partial.ply", "camera.json", "mask.png"]

    r.stage("lift", {}, _external_inputs(cfg, "depth", "mask", "camera", "rgb"), lift)

    model = _load_model(cfg)

    def rect():
        partial = io.read_point_cloud(r.path("partial.ply"))
        camera = io.read_camera(r.path("camera.json"))
        mask = io.read_mask(r.path("mask.png"))
        params0 = io.read_params(cfg.init_params) if cfg.init_params else BodyParams.zeros(model)
        params = rectify(model, params0, partial, camera, mask, cfg.rectify) if on["rectify"] else params0
        io.write_params(r.path("params.json"), params)
        io.write_mesh(r.path("body.ply"), forward(model, params)[0])
        return ["params.json", "body.ply"]

    if model is not None:
        r.stage("rectify", {"enabled": on["rectify"], **cfg.section("rectify")},
                {**r.file_inputs("partial.ply", "camera.json", "mask.png"),
                 **_external_inputs(cfg, "model", "init_params")}, rect)
    body_path = r.path("body.ply") if model is not None else None

    def gen():
        partial = io.read_point_cloud(r.path("partial.ply"))
        body = io.read_mesh(body_path) if body_path else None
        g = cfg.generate
        seed = stage_seed(cfg.seed, "generate")
        if cfg.weights and on["generate"]:
            if body is None:
                raise InvalidArgument("generation needs the rectified body mesh")
            net, sched = load_weights(cfg.weights)
            if sched is None:
                sched = NoiseSchedule.linear(net.T)
            coarse = generate(net, sched, partial, body, g.n, seed, g.n_p, g.n_s, g.variance)
        else:
            log.info("no denoiser weights: coarse cloud is the partial cloud plus body-surface samples")
            rows = [partial.positions]
            if body is not None:
                rng = np.random.default_rng(seed)
                dense, _ = body.sample_surface(4 * g.n_s, rng)
                rows.append(dense[fps(dense, g.n_s, seed=int(rng.integers(2**31)))])
            coarse = PointCloud(np.vstack(rows))
        io.write_point_cloud(r.path("coarse.ply"), coarse)
        return ["coarse.ply"]

    r.stage("generate", {"enabled": on["generate"], **cfg.section("generate")},
            {**r.file_inputs("partial.ply", "body.ply"), **_external_inputs(cfg, "weights")}, gen)

    mode = cfg.refine_mode or ("learned" if cfg.refiner_weights else "closed-form")

    def ref():
        coarse = io.read_point_cloud(r.path("coarse.ply"))
        if not on["refine"]:
            io.write_point_cloud(r.path("refined.ply"), coarse)
            return ["refined.ply"]
        partial = io.read_point_cloud(r.path("partial.ply"))
        body = io.read_mesh(body_path) if body_path else None
        net = load_refiner(cfg.refiner_weights) if mode == "learned" else None
        out = refine(coarse, partial, body, cfg.refine, net, mode, stage_seed(cfg.seed, "refine"))
        io.write_point_cloud(r.path("refined.ply"), out)
        return ["refined.ply"]

    r.stage("refine", {"enabled": on["refine"], "mode": mode, **cfg.section("refine")},
            {**r.file_inputs("coarse.ply", "partial.ply", "body.ply"),
             **_external_inputs(cfg, "refiner_weights")}, ref)

    def repl():
        refined = io.read_point_cloud(r.path("refined.ply"))
        if on["replace"]:
            partial = io.read_point_cloud(r.path("partial.ply"))
            final = depth_replace(refined, partial, cfg.refine).cloud
        else:
            final = refined
        io.write_point_cloud(r.path("final.ply"), final)
        return ["final.ply"]

    r.stage("replace", {"enabled": on["replace"], **cfg.section("refine")},
            r.file_inputs("refined.ply", "partial.ply"), repl)

    def mesh():
        final = io.read_point_cloud(r.path("final.ply"))
        body = io.read_mesh(body_path) if body_path else None
        m = cfg.mesh
        oriented = PointCloud(final.positions, final.colors, estimate_normals(final.positions, body, m.k_normals))
        io.write_point_cloud(r.path("oriented.ply"), oriented)
        outputs = ["oriented.ply"]
        if m.poisson_bin and (shutil.which(m.poisson_bin) or os.access(m.poisson_bin, os.X_OK)):
            io.write_mesh(r.path("mesh.ply"), mesh_external(oriented, m.poisson_bin, m.poisson_depth, m.timeout))
            outputs.append("mesh.ply")
        else:
            log.warning("meshing executable %s unavailable: output is an oriented point cloud only",
                        m.poisson_bin or "(not configured)")
            if os.path.exists(r.path("mesh.ply")):
                os.remove(r.path("mesh.ply"))
        return outputs

    if on["mesh"]:
        r.stage("mesh", cfg.section("mesh"), r.file_inputs("final.ply", "body.ply"), mesh)

    def ev():
        gt = io.read_mesh(cfg.gt_mesh)
        if os.path.exists(r.path("mesh.ply")):
            rec = io.read_mesh(r.path("mesh.ply"))
        elif os.path.exists(r.path("oriented.ply")):
            rec = io.read_point_cloud(r.path("oriented.ply"))
        else:
            rec = io.read_point_cloud(r.path("final.ply"))
        e = cfg.eval
        evaluate(rec, gt, e.samples, stage_seed(cfg.seed, "eval"), e.res, e.normalize).write(r.path("report.json"))
        return ["report.json"]

    if on["eval"] and cfg.gt_mesh:
        r.stage("eval", cfg.section("eval"),
                {**r.file_inputs("mesh.ply", "oriented.ply", "final.ply"), **_external_inputs(cfg, "gt_mesh")}, ev)


def write_synthetic_scene(out_dir, seed: int = 0, res: int = 256, pose_sigma: float = 0.15,
                          init_noise: float = 0.1, z_offset: float = 0.1) -> str:
    """Render a posed mannequin and write every pipeline input plus ``config.toml``.

    The init parameters are the ground truth perturbed by ``init_noise`` rad
    per joint and ``z_offset`` m along the camera axis.  Returns the config path.
    """
    from .mannequin import front_camera, make_mannequin, random_params, render_scene

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = make_mannequin()
    gt = random_params(model, rng)
    camera = front_camera(res)
    dm, rgb, mesh = render_scene(model, gt, camera, res)
    init = gt.copy()
    init.theta = init.theta + rng.normal(scale=init_noise, size=init.theta.shape)
    init.translation = init.translation + np.array([0.0, 0.0, z_offset])
    model.save(os.path.join(out_dir, "model.json"))
    io.write_pfm(os.path.join(out_dir, "depth.pfm"), dm.depth)
    io.write_mask(os.path.join(out_dir, "mask.png"), dm.mask)
    io.write_rgb(os.path.join(out_dir, "rgb.png"), rgb)
    io.write_camera(os.path.join(out_dir, "camera.json"), camera)
    io.write_params(os.path.join(out_dir, "init_params.json"), init)
    io.write_params(os.path.join(out_dir, "gt_params.json"), gt)
    io.write_mesh(os.path.join(out_dir, "gt_mesh.ply"), mesh)
    cfg_path = os.path.join(out_dir, "config.toml")
    with open(cfg_path, "w") as fh:
        fh.write(f"""seed = {int(seed)}
out_dir = "run"

[inputs]
depth = "depth.pfm"
mask = "mask.png"
camera = "camera.json"
rgb = "rgb.png"
model = "model.json"
init_params = "init_params.json"
gt_mesh = "gt_mesh.ply"

[rectify]
iters = 300
vis_res = {int(res)}

[generate]
n_s = 2048

[eval]
samples = 20000
res = 128
""")
    return cfg_path


def write_synthetic_dataset(out_dir, count: int, seed: int = 0, res: int = 128, n_gt: int = 4096) -> list:
    """Training triples ``<name>.partial.ply``, ``<name>.body.ply``, ``<name>.gt.ply`` from posed mannequins.

    The body condition is the exact posed mesh and the target cloud is
    sampled on its full surface.  Returns the sample names.
    """
    from .mannequin import front_camera, make_mannequin, random_params, render_scene

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = make_mannequin()
    camera = front_camera(res)
    names = []
    for i in range(count):
        params = random_params(model, rng)
        dm, rgb, mesh = render_scene(model, params, camera, res)
        name = f"s{i:04d}"
        io.write_point_cloud(os.path.join(out_dir, f"{name}.partial.ply"), unproject(dm, rgb))
        io.write_mesh(os.path.join(out_dir, f"{name}.body.ply"), mesh)
        gt, _ = mesh.sample_surface(n_gt, rng)
        io.write_point_cloud(os.path.join(out_dir, f"{name}.gt.ply"), PointCloud(gt))
        names.append(name)
    return names


def load_training_set(data_dir, n_points: int, n_p: int, n_s: int, seed: int = 0, with_coarse: bool = False) -> list:
    """Normalized training samples from a directory of triples.

    Each item is (x0, cond) for the denoiser, or (coarse, cond, gt) when
    ``with_coarse`` (reads ``<name>.coarse.ply`` as well).  Condition and
    targets share the normalizer fitted on the condition.
    """
    from .diffusion import Normalizer, assemble_condition

    names = sorted(f[: -len(".gt.ply")] for f in os.listdir(data_dir) if f.endswith(".gt.ply"))
    if not names:
        raise InvalidArgument(f"{data_dir}: no '<name>.gt.ply' training files")
    out = []
    for i, name in enumerate(names):
        base = os.path.join(data_dir, name)
        partial = io.read_point_cloud(base + ".partial.ply")
        body = io.read_mesh(base + ".body.ply")
        gt = io.read_point_cloud(base + ".gt.ply").positions
        cond = assemble_condition(partial, body, min(n_p, len(partial)), n_s, seed + i)
        norm = Normalizer.fit(cond[:, :3])
        cond[:, :3] = norm.apply(cond[:, :3])
        if with_coarse:
            coarse = io.read_point_cloud(base + ".coarse.ply").positions
            out.append((norm.apply(coarse), cond, norm.apply(gt)))
        else:
            pick = fps(gt, min(n_points, len(gt)), seed=seed + i)
            out.append((norm.apply(gt[pick]), cond))
    return out
