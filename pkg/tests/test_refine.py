import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hap.errors import InvalidArgument
from hap.geom import PointCloud, chamfer
from hap.refine import (DisplacementNet, RefineConfig, closed_form_displacement, depth_replace, load_refiner,
                        refine, refine_objective, smoothness, train_refiner)
from hap.diffusion import save_weights
from oracles import brute_chamfer, brute_replace, brute_smoothness
from scenes import icosphere, refiner_pairs, sphere_points


def noisy_sphere(n=2000, sigma=0.01, seed=0):
    rng = np.random.default_rng(seed)
    clean = sphere_points(n, rng)
    return clean, clean * (1 + rng.normal(scale=sigma, size=(n, 1)))


class TestSmoothness:
    def test_examples(self):
        base = np.array([[0.0, 0, 0], [1, 0, 0]])
        assert smoothness([[0, 0, 0], [1, 0, 0]], base, 1) == pytest.approx(1 / 3, abs=1e-15)
        assert smoothness(np.tile([0.3, -1, 2], (2, 1)), base, 1) == 0.0
        with pytest.raises(InvalidArgument):
            smoothness(np.zeros((2, 3)), base, 2)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        base, delta = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        for k in (1, 5, 16):
            assert abs(smoothness(delta, base, k) - brute_smoothness(base, delta, k)) <= 1e-12

    @given(arrays(np.float64, (30, 3), elements=st.floats(-1, 1)), st.tuples(*[st.floats(-5, 5)] * 3))
    def test_constant_shift_invariance(self, delta, c):
        base = np.random.default_rng(1).normal(size=(30, 3))
        assert abs(smoothness(delta + np.array(c), base, 6) - smoothness(delta, base, 6)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            smoothness(np.zeros((3, 3)), np.zeros((4, 3)), 1)


class TestObjective:
    def test_examples(self):
        rng = np.random.default_rng(2)
        gt = rng.normal(size=(40, 3))
        cfg = RefineConfig(alpha=0.7, k_s=4)
        assert refine_objective(gt, gt, np.zeros_like(gt), gt, cfg) == 0.0
        base, delta = rng.normal(size=(40, 3)), rng.normal(scale=0.1, size=(40, 3))
        h = base + delta
        assert refine_objective(h, gt, delta, base, RefineConfig(alpha=0.0)) == chamfer(h, gt)
        expect = brute_chamfer(h, gt) + 0.7 * brute_smoothness(base, delta, 4)
        assert abs(refine_objective(h, gt, delta, base, cfg) - expect) <= 1e-12

    def test_config_checks(self):
        for bad in (dict(alpha=-1.0), dict(k_s=0), dict(k_replace=0), dict(r_replace=0.0)):
            with pytest.raises(InvalidArgument):
                RefineConfig(**bad)


class TestRefine:
    def test_zero_predictor_is_identity(self):
        rng = np.random.default_rng(3)
        coarse = PointCloud(rng.normal(size=(100, 3)))
        partial = PointCloud(rng.normal(size=(60, 3)), colors=rng.random((60, 3)))
        out = refine(coarse, partial, icosphere(1), RefineConfig(n_p=50, n_s=20), DisplacementNet(width=16))
        assert np.array_equal(out.positions, coarse.positions)

    def test_closed_form_denoises_sphere(self):
        clean, noisy = noisy_sphere()
        out = refine(PointCloud(noisy), None, None, RefineConfig(), mode="closed-form")
        assert chamfer(out.positions, clean) <= 0.6 * chamfer(noisy, clean)

    def test_closed_form_keeps_plane_fixed(self):
        g = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0)), -1).reshape(-1, 2)
        plane = np.column_stack([g, np.zeros(len(g))])
        assert np.max(np.abs(closed_form_displacement(plane, 8))) <= 1e-12

    def test_argument_checks(self):
        pc = PointCloud(np.random.default_rng(4).normal(size=(20, 3)))
        with pytest.raises(InvalidArgument):
            refine(pc, None, None, RefineConfig(), mode="magic")
        with pytest.raises(InvalidArgument):
            refine(pc, None, None, RefineConfig())
        with pytest.raises(InvalidArgument):
            refine(pc, None, None, RefineConfig(), weights=DisplacementNet(width=16))

    def test_refiner_weights_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = DisplacementNet(width=16, seed=2)
        train_refiner(net, refiner_pairs(2, m=64), 3, RefineConfig(alpha=0.1))
        save_weights(tmp_path / "r.bin", net)
        back = load_refiner(tmp_path / "r.bin")
        c, cd, _ = refiner_pairs(1, m=64, seed=5)[0]
        assert np.array_equal(back.displacement(c, cd), net.displacement(c, cd))

    def test_denoiser_weights_rejected_as_refiner(self, tmp_path):
        from hap.diffusion import CompactDenoiser
        save_weights(tmp_path / "d.bin", CompactDenoiser(10, width=16))
        with pytest.raises(InvalidArgument):
            load_refiner(tmp_path / "d.bin")

    def test_predictor_overfits_twenty_pairs(self):
        samples = refiner_pairs(20)
        cfg = RefineConfig(alpha=0.1)
        net = DisplacementNet(seed=0)

        def objective():
            vals = []
            for c, cd, g in samples:
                d = net.displacement(c, cd)
                vals.append(refine_objective(c + d, g, d, c, cfg))
            return np.mean(vals)

        before = objective()
        train_refiner(net, samples, 1500, cfg)
        assert objective() < 0.1 * before


class TestDepthReplace:
    @pytest.mark.parametrize("seed", range(10))
    def test_sets_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        H = rng.integers(-4, 5, size=(120, 3)) * 0.25
        P = rng.integers(-4, 5, size=(80, 3)) * 0.25 + rng.choice([0.0, 0.1], size=(80, 1))
        r, k = 0.3, int(rng.integers(1, 8))
        res = depth_replace(PointCloud(H), PointCloud(P), RefineConfig(k_replace=k, r_replace=r))
        s1, s2, s3 = brute_replace(H, P, r, k)
        assert set(res.s1.tolist()) == s1 and set(res.s2.tolist()) == s2 and set(res.s3.tolist()) == s3

    def test_no_overlap(self):
        rng = np.random.default_rng(0)
        H, P = rng.normal(size=(50, 3)), rng.normal(size=(30, 3)) + 100
        cfg = RefineConfig(r_replace=0.5)
        res = depth_replace(PointCloud(H), PointCloud(P), cfg)
        assert len(res.s1) == 0
        assert {tuple(x) for x in H} <= {tuple(x) for x in res.cloud.positions}
        again = depth_replace(res.cloud, PointCloud(P), cfg)
        assert np.array_equal(again.s2, res.s2)

    def test_full_overlap_is_degenerate(self):
        P = np.random.default_rng(1).normal(size=(40, 3))
        res = depth_replace(PointCloud(P), PointCloud(P), RefineConfig(r_replace=100.0, k_replace=40))
        assert len(res.s1) == 40 and len(res.s2) == 0 and len(res.s3) == 0
        assert len(res.cloud) == 0 and res.degenerate

    def test_colors_only_on_partial_rows(self):
        rng = np.random.default_rng(2)
        H = rng.normal(size=(200, 3))
        P = PointCloud(rng.normal(size=(150, 3)) * 0.5, colors=rng.uniform(0.1, 1.0, size=(150, 3)))
        res = depth_replace(PointCloud(H), P, RefineConfig(r_replace=0.2))
        colors = res.cloud.colors
        assert np.all(colors[~res.from_partial] == 0)
        assert np.all(colors[res.from_partial] > 0)
        assert np.array_equal(res.cloud.positions[res.from_partial], P.positions[res.s3])

    def test_default_k_is_thirty(self):
        assert RefineConfig().k_replace == 30

    def test_empty_inputs(self):
        with pytest.raises(InvalidArgument):
            depth_replace(PointCloud(np.zeros((0, 3))), PointCloud(np.ones((2, 3))), RefineConfig())
