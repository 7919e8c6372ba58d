import json
import os
import shutil
import stat
import sys

import numpy as np
import pytest

from hap import io
from hap.errors import ExternalToolError, InvalidArgument, StageFailure
from hap.evaluation import eval_cd
from hap.geom import PointCloud, TriMesh
from hap.pipeline import (STAGES, PipelineConfig, estimate_normals, mesh_external, poisson_args, run, sha256_file,
                          stage_seed, write_synthetic_scene)
from scenes import icosphere, sphere_points

HULL_TOOL = """#!{python}
import json, sys
import numpy as np
from scipy.spatial import ConvexHull
from hap import io
from hap.geom import TriMesh

args = sys.argv[1:]
opt = dict(zip(args[::2], args[1::2]))
with open({log!r}, "w") as fh:
    json.dump(args, fh)
pc = io.read_point_cloud(opt["--in"])
hull = ConvexHull(pc.positions)
faces = hull.simplices.copy()
centre = pc.positions.mean(0)
tri = pc.positions[faces]
outward = (np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]) * (tri.mean(1) - centre)).sum(1) > 0
faces[~outward] = faces[~outward][:, ::-1]
io.write_mesh(opt["--out"], TriMesh(pc.positions, faces))
"""


def make_tool(tmp_path, body):
    path = tmp_path / "poisson_standin"
    path.write_text(body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


@pytest.fixture
def hull_tool(tmp_path):
    log = tmp_path / "argv.json"
    return make_tool(tmp_path, HULL_TOOL.format(python=sys.executable, log=str(log))), log


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    cfg_path = write_synthetic_scene(root, seed=3, res=96)
    cfg = PipelineConfig.load(cfg_path)
    first = run(cfg)
    return root, cfg_path, cfg, first


def oriented_sphere(n=3000, seed=0):
    p = sphere_points(n, np.random.default_rng(seed))
    return PointCloud(p, normals=p)


class TestConfig:
    def test_paths_resolved_relative_to_config(self, scene):
        root, _, cfg, _ = scene
        assert cfg.depth == os.path.join(str(root), "depth.pfm")
        assert cfg.out_dir == os.path.join(str(root), "run")
        assert cfg.mesh.poisson_depth == 8

    def test_unknown_keys_rejected(self):
        base = {"out_dir": "o", "inputs": {"depth": "d", "mask": "m"}}
        for bad in ({"rectify": {"lamda1": 1.0}}, {"inputs": {"depth": "d", "mask": "m", "dpeth": "x"}},
                    {"colour": 1}, {"stages": {"polish": True}}):
            with pytest.raises(InvalidArgument):
                PipelineConfig.from_dict({**base, **bad})

    def test_missing_required(self):
        with pytest.raises(InvalidArgument, match="mask"):
            PipelineConfig.from_dict({"out_dir": "o", "inputs": {"depth": "d"}})

    def test_missing_file_fails_validation(self, tmp_path):
        cfg = PipelineConfig.from_dict({"out_dir": "o", "inputs": {"depth": "nope.pfm", "mask": "m.png"}},
                                       str(tmp_path))
        with pytest.raises(InvalidArgument, match="not found"):
            cfg.validate()

    def test_stage_seeds(self):
        assert stage_seed(0, "generate") == stage_seed(0, "generate")
        assert len({stage_seed(s, lab) for s in range(3) for lab in STAGES}) == 3 * len(STAGES)


class TestRun:
    def test_end_to_end_without_weights(self, scene):
        root, _, cfg, first = scene
        assert first.executed == list(STAGES)
        out = cfg.out_dir
        for name in ("partial.ply", "params.json", "coarse.ply", "refined.ply", "final.ply", "oriented.ply",
                     "report.json", "log", "manifest.json"):
            assert os.path.exists(os.path.join(out, name)), name
        assert not os.path.exists(os.path.join(out, "mesh.ply"))
        report = json.loads(open(os.path.join(out, "report.json")).read())
        assert all(np.isfinite(report[k]) for k in ("cd", "p2f", "normal"))
        assert "unavailable" in open(os.path.join(out, "log")).read()
        final = io.read_point_cloud(os.path.join(out, "final.ply"))
        assert len(final) > 0 and final.colors is not None

    def test_manifest_checksums(self, scene):
        _, _, cfg, _ = scene
        manifest = json.loads(open(os.path.join(cfg.out_dir, "manifest.json")).read())
        for stage, entry in manifest.items():
            for name, digest in entry["outputs"].items():
                assert sha256_file(os.path.join(cfg.out_dir, name)) == digest

    def test_resume_after_deleting_final(self, scene, tmp_path):
        _, cfg_path, _, _ = scene
        cfg = PipelineConfig.load(cfg_path)
        cfg.out_dir = str(tmp_path / "copy")
        shutil.copytree(scene[2].out_dir, cfg.out_dir)
        before = {n: sha256_file(os.path.join(cfg.out_dir, n)) for n in os.listdir(cfg.out_dir) if n != "log"}
        os.remove(os.path.join(cfg.out_dir, "final.ply"))
        again = run(cfg)
        assert again.executed == ["replace"]
        after = {n: sha256_file(os.path.join(cfg.out_dir, n)) for n in os.listdir(cfg.out_dir) if n != "log"}
        assert after == before

    def test_nothing_to_do_when_current(self, scene):
        _, cfg_path, _, _ = scene
        assert run(PipelineConfig.load(cfg_path)).executed == []

    def test_config_change_reruns_downstream(self, scene, tmp_path):
        _, cfg_path, _, _ = scene
        cfg = PipelineConfig.load(cfg_path)
        cfg.out_dir = str(tmp_path / "copy")
        shutil.copytree(scene[2].out_dir, cfg.out_dir)
        cfg.refine.alpha = 0.5
        assert run(cfg).executed[0] == "refine"

    def test_bitwise_determinism(self, scene, tmp_path):
        _, cfg_path, ref, _ = scene
        cfg = PipelineConfig.load(cfg_path)
        cfg.out_dir = str(tmp_path / "second")
        run(cfg)
        plys = sorted(n for n in os.listdir(ref.out_dir) if n.endswith(".ply"))
        assert plys
        for n in plys:
            assert sha256_file(os.path.join(ref.out_dir, n)) == sha256_file(os.path.join(cfg.out_dir, n)), n

    def test_invalid_camera_halts_at_lift(self, scene, tmp_path):
        root, cfg_path, _, _ = scene
        bad = tmp_path / "camera.json"
        d = json.loads(open(os.path.join(root, "camera.json")).read())
        del d["fy"]
        bad.write_text(json.dumps(d))
        cfg = PipelineConfig.load(cfg_path)
        cfg.camera, cfg.out_dir = str(bad), str(tmp_path / "out")
        with pytest.raises(StageFailure) as info:
            run(cfg)
        assert info.value.stage == "lift" and "fy" in str(info.value)
        assert not os.path.exists(tmp_path / "out" / "params.json")

    def test_mesh_stage_with_external_tool(self, scene, hull_tool, tmp_path):
        _, cfg_path, _, _ = scene
        cfg = PipelineConfig.load(cfg_path)
        cfg.out_dir = str(tmp_path / "meshed")
        shutil.copytree(scene[2].out_dir, cfg.out_dir)
        cfg.mesh.poisson_bin = hull_tool[0]
        r = run(cfg)
        assert r.executed == ["mesh", "eval"]
        mesh = io.read_mesh(os.path.join(cfg.out_dir, "mesh.ply"))
        assert len(mesh.faces) > 0
        report = json.loads(open(os.path.join(cfg.out_dir, "report.json")).read())
        assert not any("cloud-only" in n for n in report["notes"])


class TestMeshing:
    def test_sphere_through_tool(self, hull_tool):
        tool, _ = hull_tool
        mesh = mesh_external(oriented_sphere(), tool, depth=8)
        assert np.sqrt(eval_cd(mesh, icosphere(5), 20000)) < 0.01

    def test_depth_flag_verbatim(self, hull_tool):
        tool, log = hull_tool
        mesh_external(oriented_sphere(500), tool, depth=11)
        argv = json.loads(log.read_text())
        assert argv[argv.index("--depth") + 1] == "11"
        assert poisson_args("pr", "a", "b", 8) == ["pr", "--in", "a", "--out", "b", "--depth", "8"]

    def test_missing_binary(self):
        with pytest.raises(ExternalToolError, match="not found"):
            mesh_external(oriented_sphere(100), "/nonexistent/PoissonRecon")

    def test_nonzero_exit_carries_stderr(self, tmp_path):
        tool = make_tool(tmp_path, f"#!{sys.executable}\nimport sys\nsys.stderr.write('boom')\nsys.exit(3)\n")
        with pytest.raises(ExternalToolError) as info:
            mesh_external(oriented_sphere(100), tool)
        assert "3" in str(info.value) and info.value.stderr == "boom"

    def test_unreadable_output(self, tmp_path):
        body = f"#!{sys.executable}\nimport sys\nopen(sys.argv[sys.argv.index('--out') + 1], 'w').write('junk')\n"
        with pytest.raises(ExternalToolError, match="unreadable"):
            mesh_external(oriented_sphere(100), make_tool(tmp_path, body))

    def test_needs_normals(self, hull_tool):
        with pytest.raises(InvalidArgument):
            mesh_external(PointCloud(sphere_points(50, np.random.default_rng(0))), hull_tool[0])


class TestNormals:
    def test_oriented_away_from_body(self):
        rng = np.random.default_rng(0)
        body = icosphere(3, radius=0.8)
        pts = sphere_points(2000, rng)
        n = estimate_normals(pts, body, 16)
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0)
        assert np.mean((n * pts).sum(1) > 0.9) > 0.99

    def test_without_body_uses_centroid(self):
        pts = sphere_points(500, np.random.default_rng(1)) + 3.0
        n = estimate_normals(pts, None, 12)
        assert np.all((n * (pts - 3.0)).sum(1) > 0)
