import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from hap.body import (BodyParams, LBSBodyModel, forward, lbs, lbs_vjp, project_keypoints, project_with_jacobian,
                      rodrigues, rodrigues_vjp)
from hap.camera import Camera, project
from hap.errors import BehindCamera, InvalidArgument
from hap.geom import rotation_matrix
from hap.mannequin import front_camera, make_mannequin
from oracles import central_difference, torch_lbs, torch_rodrigues
from scenes import toy_model


@pytest.fixture(scope="module")
def mannequin():
    return make_mannequin()


def single_joint_model():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(12, 3))
    f = np.array([[i, i + 1, i + 2] for i in range(10)])
    reg = np.full((1, 12), 1 / 12)
    return LBSBodyModel(v, rng.normal(size=(12, 3, 2)), reg, np.ones((12, 1)), [-1], f)


class TestForward:
    def test_rest_pose_is_template_bit_for_bit(self, mannequin):
        mesh, _ = forward(mannequin, BodyParams.zeros(mannequin))
        assert np.array_equal(mesh.vertices, mannequin.template)

    def test_single_joint_quarter_turn(self):
        m = single_joint_model()
        p = BodyParams(np.zeros(2), [[0, 0, np.pi / 2]])
        mesh, joints = forward(m, p)
        j = m.template.mean(0)
        Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
        assert np.max(np.abs(mesh.vertices - ((m.template - j) @ Rz.T + j))) <= 1e-9
        assert np.allclose(joints[0], j, atol=1e-12)

    def test_translation_shifts_exactly(self, mannequin):
        p = BodyParams.zeros(mannequin)
        p.translation = np.array([0.0, 0.0, 1.0])
        mesh, _ = forward(mannequin, p)
        assert np.array_equal(mesh.vertices, mannequin.template + [0, 0, 1.0])

    def test_beta_linearity(self, mannequin):
        rng = np.random.default_rng(1)
        b1, b2 = rng.normal(size=10), rng.normal(size=10)
        th = np.zeros((24, 3))
        f = lambda b: forward(mannequin, BodyParams(b, th))[0].vertices - mannequin.template
        assert np.max(np.abs(f(b1 + b2) - f(b1) - f(b2))) <= 1e-9

    def test_all_weight_on_one_joint_is_rigid(self, mannequin):
        rng = np.random.default_rng(2)
        w = np.zeros_like(mannequin.skin_weights)
        w[:, 5] = 1.0
        m = LBSBodyModel(mannequin.template, mannequin.shape_dirs, mannequin.joint_regressor, w,
                         mannequin.parents, mannequin.faces)
        p = BodyParams(rng.normal(size=10), rng.normal(scale=0.3, size=(24, 3)), rng.normal(size=3))
        posed = lbs(m, p.beta, p.theta, p.translation)
        G, J = posed.G[5], posed.rest_joints[5]
        # joint 5's rigid motion maps its rest location onto its posed location
        ref = (posed.v_shaped - J) @ G.T + posed.joints[5]
        assert np.max(np.abs(posed.verts - ref)) <= 1e-9

    def test_matches_textbook_chain(self, mannequin):
        rng = np.random.default_rng(3)
        p = BodyParams(rng.normal(size=10), rng.normal(scale=0.5, size=(24, 3)), rng.normal(size=3))
        mesh, joints = forward(mannequin, p)
        tv, tj = torch_lbs(mannequin, torch.tensor(p.beta), torch.tensor(p.theta), torch.tensor(p.translation))
        assert np.max(np.abs(mesh.vertices - tv.numpy())) <= 1e-9
        assert np.max(np.abs(joints - tj.numpy())) <= 1e-9

    def test_dimension_mismatch(self, mannequin):
        with pytest.raises(InvalidArgument):
            forward(mannequin, BodyParams(np.zeros(3), np.zeros((24, 3))))

    def test_axis_angle_wrapped(self):
        p = BodyParams(np.zeros(1), [[0, 0, 2 * np.pi + 0.5]])
        assert np.linalg.norm(p.theta[0]) < 2 * np.pi
        assert np.allclose(rodrigues(p.theta)[0], rotation_matrix([0, 0, 0.5]))

    def test_model_invariants(self, mannequin):
        with pytest.raises(InvalidArgument):
            LBSBodyModel(mannequin.template, mannequin.shape_dirs, mannequin.joint_regressor * 2,
                         mannequin.skin_weights, mannequin.parents, mannequin.faces)
        bad = mannequin.parents.copy()
        bad[3] = 7
        with pytest.raises(InvalidArgument):
            LBSBodyModel(mannequin.template, mannequin.shape_dirs, mannequin.joint_regressor,
                         mannequin.skin_weights, bad, mannequin.faces)


class TestGradients:
    @given(st.sampled_from([0.0, 1e-3, 0.5, 2.0]), st.integers(0, 1000))
    def test_rodrigues_vjp_matches_autograd(self, scale, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(4, 3)) * scale
        g = rng.normal(size=(4, 3, 3))
        rt = torch.tensor(r, requires_grad=True)
        (torch_rodrigues(rt) * torch.tensor(g)).sum().backward()
        assert np.allclose(rodrigues(r), torch_rodrigues(torch.tensor(r)).numpy(), atol=1e-14)
        assert np.allclose(rodrigues_vjp(r, g), rt.grad.numpy(), rtol=1e-7, atol=1e-9)

    def test_lbs_vjp_matches_autograd(self, mannequin):
        rng = np.random.default_rng(4)
        beta, theta, trans = rng.normal(size=10), rng.normal(scale=0.4, size=(24, 3)), rng.normal(size=3)
        gv, gj = rng.normal(size=(mannequin.num_vertices, 3)), rng.normal(size=(24, 3))
        tb, tt, tr = (torch.tensor(a, requires_grad=True) for a in (beta, theta, trans))
        v, j = torch_lbs(mannequin, tb, tt, tr)
        ((v * torch.tensor(gv)).sum() + (j * torch.tensor(gj)).sum()).backward()
        got = lbs_vjp(mannequin, lbs(mannequin, beta, theta, trans), gv, gj)
        for a, b in zip(got, (tb.grad, tt.grad, tr.grad)):
            assert np.allclose(a, b.numpy(), rtol=1e-8, atol=1e-10)

    def test_lbs_vjp_matches_finite_differences(self):
        m = toy_model()
        rng = np.random.default_rng(5)
        beta, theta, trans = rng.normal(size=2), rng.normal(scale=0.3, size=(3, 3)), rng.normal(size=3)
        gv = rng.normal(size=(m.num_vertices, 3))
        f = lambda th: (lbs(m, beta, th, trans).verts * gv).sum()
        gb, gt, _ = lbs_vjp(m, lbs(m, beta, theta, trans), gv)
        assert np.allclose(gt, central_difference(f, theta), rtol=1e-6, atol=1e-8)
        fb = lambda b: (lbs(m, b, theta, trans).verts * gv).sum()
        assert np.allclose(gb, central_difference(fb, beta), rtol=1e-6, atol=1e-8)


class TestKeypoints:
    def test_joint_on_principal_ray(self):
        m = single_joint_model()
        j = m.template.mean(0)
        pose = np.eye(4)
        pose[:3, 3] = j - [0, 0, 3.0]
        cam = Camera("pinhole", 300.0, 300.0, 40.0, 30.0, None, pose)
        k = project_keypoints(m, BodyParams.zeros(m), cam)
        assert np.allclose(k, [[40.0, 30.0]], atol=1e-9)

    def test_rest_pose_vs_manual_projection(self, mannequin):
        cam = front_camera(512)
        _, joints = forward(mannequin, BodyParams.zeros(mannequin))
        pc = (joints - cam.center) @ cam.rotation
        manual = np.column_stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy])
        assert np.max(np.abs(project_keypoints(mannequin, BodyParams.zeros(mannequin), cam) - manual)) <= 1e-6

    def test_orthographic_translation_shift(self, mannequin):
        cam = Camera("orthographic", cx=64.0, cy=64.0, pixel_size=0.01)
        p = BodyParams.zeros(mannequin)
        k0 = project_keypoints(mannequin, p, cam)
        p.translation = np.array([0.1, 0.0, 0.0])
        k1 = project_keypoints(mannequin, p, cam)
        assert np.allclose(k1 - k0, [[0.1 / 0.01, 0.0]], atol=1e-9)

    def test_behind_camera(self, mannequin):
        cam = front_camera(512)
        p = BodyParams.zeros(mannequin)
        p.translation = np.array([0.0, 0.0, 10.0])
        with pytest.raises(BehindCamera):
            project_keypoints(mannequin, p, cam)

    def test_projection_jacobian(self):
        cam = front_camera(256)
        pts = np.random.default_rng(6).normal(scale=0.3, size=(5, 3))
        uv, J = project_with_jacobian(cam, pts)
        assert np.allclose(uv, np.column_stack(project(cam, pts)[:2]))
        for i in range(5):
            for c in range(2):
                fd = central_difference(lambda p: project(cam, p)[c], pts[i], 1e-6)
                assert np.allclose(J[i, c], fd, rtol=1e-6, atol=1e-6)
