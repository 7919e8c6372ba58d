import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hap.errors import InvalidArgument
from hap.geom import (PointCloud, SpatialIndex, TriMesh, ball_query, chamfer, closest_faces, fps, knn,
                      point_to_mesh, rotation_matrix)
from oracles import brute_ball, brute_chamfer, brute_fps, brute_knn, brute_point_to_mesh
from scenes import quad, random_rigid

coords = arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                elements=st.floats(-10, 10, allow_nan=False, width=32))
lattice = arrays(np.float64, st.tuples(st.integers(2, 40), st.just(3)),
                 elements=st.integers(-3, 3).map(float))


class TestContainers:
    def test_pointcloud_rejects_bad_attributes(self):
        with pytest.raises(InvalidArgument):
            PointCloud([[0, 0, np.nan]])
        with pytest.raises(InvalidArgument):
            PointCloud(np.zeros((2, 3)), colors=np.full((2, 3), 1.5))
        with pytest.raises(InvalidArgument):
            PointCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))
        with pytest.raises(InvalidArgument):
            PointCloud(np.zeros((2, 3)), colors=np.zeros((3, 3)))

    def test_trimesh_rejects_bad_faces(self):
        with pytest.raises(InvalidArgument):
            TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
        with pytest.raises(InvalidArgument):
            TriMesh(np.zeros((3, 3)), [[0, 1, 1]])

    def test_sample_surface_lies_on_mesh(self):
        m = quad()
        pts, face = m.sample_surface(500, np.random.default_rng(0))
        assert np.all(np.abs(pts[:, 2]) < 1e-15)
        assert np.all((pts[:, :2] >= 0) & (pts[:, :2] <= 1))
        assert set(np.unique(face)) <= {0, 1}


class TestFps:
    def test_square_corners(self):
        sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
        assert list(fps(sq, 2, start=0)) == [0, 3]

    def test_m_equals_n_is_permutation(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        assert sorted(fps(pts, 30, seed=4)) == list(range(30))

    def test_m_too_large(self):
        with pytest.raises(InvalidArgument):
            fps(np.zeros((3, 3)), 4)

    def test_deterministic_for_seed(self):
        pts = np.random.default_rng(2).normal(size=(80, 3))
        assert np.array_equal(fps(pts, 10, seed=9), fps(pts, 10, seed=9))

    def test_beats_random_subsets(self):
        rng = np.random.default_rng(3)
        pts = rng.random((100, 3))

        def min_pair(idx):
            p = pts[idx]
            d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
            return d[np.triu_indices(len(idx), 1)].min()

        chosen = min_pair(fps(pts, 10, seed=0))
        assert all(chosen >= min_pair(rng.choice(100, 10, replace=False)) for _ in range(1000))

    @given(coords, st.integers(0, 2**16))
    def test_second_pick_is_farthest_from_first(self, pts, seed):
        idx = fps(pts, 2, seed=seed)
        d = ((pts - pts[idx[0]]) ** 2).sum(1)
        assert d[idx[1]] == d.max()

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            pts = rng.integers(-2, 3, size=(40, 3)).astype(float)
            assert np.array_equal(fps(pts, 12, start=5), brute_fps(pts, 12, 5))


class TestQueries:
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)

    def test_knn_examples(self):
        idx = SpatialIndex(self.line)
        assert list(knn(idx, [0.9, 0, 0], 1)) == [1]
        assert list(knn(idx, [0.5, 0, 0], 2)) == [0, 1]
        assert sorted(knn(idx, [7, 0, 0], 3)) == [0, 1, 2]
        with pytest.raises(InvalidArgument):
            knn(idx, [0, 0, 0], 4)

    def test_ball_examples(self):
        pts = np.array([[i, 0, 0] for i in range(10)], float)
        idx = SpatialIndex(pts)
        assert list(ball_query(idx, pts[4], 1e-6, 1)) == [4]
        assert list(ball_query(idx, [0, 0, 0], 2.5, 30)) == [0, 1, 2]
        assert len(ball_query(idx, [0.5, 0.5, 0.5], 0.1, 5)) == 0

    @given(lattice, st.integers(0, 100))
    def test_knn_matches_scan_with_ties(self, pts, qseed):
        q = np.random.default_rng(qseed).integers(-3, 4, size=3).astype(float) * 0.5
        k = 1 + qseed % len(pts)
        assert np.array_equal(knn(SpatialIndex(pts), q, k), brute_knn(pts, q, k))

    @given(lattice, st.floats(0.1, 4.0), st.integers(1, 50))
    def test_ball_matches_scan(self, pts, r, k_max):
        q = pts[0] + 0.5
        assert np.array_equal(ball_query(SpatialIndex(pts), q, r, k_max), brute_ball(pts, q, r, k_max))

    @given(coords)
    def test_infinite_ball_equals_full_knn(self, pts):
        idx = SpatialIndex(pts)
        q = pts.mean(0)
        assert set(ball_query(idx, q, np.inf, len(pts))) == set(knn(idx, q, len(pts)))

    @given(lattice)
    def test_nearest_ties_to_lowest_index(self, pts):
        q = np.random.default_rng(len(pts)).integers(-3, 4, size=(5, 3)).astype(float)
        i, d2 = SpatialIndex(pts).nearest(q)
        for row in range(5):
            assert i[row] == brute_knn(pts, q[row], 1)[0]
            assert d2[row] == ((pts[i[row]] - q[row]) ** 2).sum()


class TestChamfer:
    def test_examples(self):
        a = np.random.default_rng(0).normal(size=(20, 3))
        assert chamfer(a, a) == 0.0
        assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0
        with pytest.raises(InvalidArgument):
            chamfer(np.zeros((0, 3)), a)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
        assert abs(chamfer(a, b) - brute_chamfer(a, b)) <= 1e-12

    @given(coords, coords)
    def test_symmetric(self, a, b):
        assert chamfer(a, b) == chamfer(b, a)

    def test_zero_iff_mutual_containment(self):
        a = np.random.default_rng(2).normal(size=(10, 3))
        assert chamfer(a, np.vstack([a, a[:3]])) == 0.0
        assert chamfer(a, a[:9]) > 0

    def test_rigid_invariance(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
        T = random_rigid(rng)
        move = lambda p: p @ T[:3, :3].T + T[:3, 3]
        assert abs(chamfer(a, b) - chamfer(move(a), move(b))) <= 1e-9


class TestPointToMesh:
    def test_examples(self):
        tri = TriMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0]], float), [[0, 1, 2]])
        d, mean = point_to_mesh(np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 1.0]]), tri)
        assert d[0] == 0.0 and d[1] == 1.0
        assert mean == 0.5
        with pytest.raises(InvalidArgument):
            point_to_mesh(np.zeros((1, 3)), TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))

    def test_regions_match_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.normal(size=(8, 3))
            f = np.array([rng.choice(8, 3, replace=False) for _ in range(6)])
            p = rng.normal(scale=2, size=(30, 3))
            d, _ = point_to_mesh(p, TriMesh(v, f))
            assert np.allclose(d ** 2, brute_point_to_mesh(p, v, f), rtol=0, atol=1e-12)

    def test_dense_sampling_oracle(self):
        rng = np.random.default_rng(6)
        m = quad()
        p = np.column_stack([rng.uniform(-0.5, 1.5, 128), rng.uniform(-0.5, 1.5, 128), rng.normal(size=128)])
        d, _ = point_to_mesh(p, m)
        g = np.linspace(0, 1, 1001)
        xx, yy = np.meshgrid(g, g)
        # closest point of the unit square is the clamped projection, so a
        # dense grid over it bounds the error by half the grid step
        cx, cy = np.clip(p[:, 0], 0, 1), np.clip(p[:, 1], 0, 1)
        ix, iy = np.round(cx * 1000).astype(int), np.round(cy * 1000).astype(int)
        dense = np.sqrt((xx[iy, ix] - p[:, 0]) ** 2 + (yy[iy, ix] - p[:, 1]) ** 2 + p[:, 2] ** 2)
        assert np.max(np.abs(d - dense)) <= 1e-3

    def test_closest_faces_barycentric_and_ties(self):
        m = quad()
        res = closest_faces(np.array([[0.5, 0.5, 1.0], [2, 2, 0]]), m.vertices, m.faces)
        # the diagonal point is shared by both faces: lowest id wins
        assert res.face[0] == 0
        assert np.allclose(res.point[0], [0.5, 0.5, 0])
        assert np.allclose((res.bary[:, :, None] * m.vertices[m.faces[res.face]]).sum(1), res.point)
        assert res.sqdist[1] == pytest.approx(2.0)

    def test_max_dist_bound(self):
        m = quad()
        res = closest_faces(np.array([[0.5, 0.5, 0.1], [0.5, 0.5, 3.0]]), m.vertices, m.faces, max_dist=1.0)
        assert res.face[0] >= 0 and res.face[1] == -1
        assert res.sqdist[1] == 1.0 and np.all(np.isnan(res.point[1]))

    @given(st.integers(0, 10_000))
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(6, 3))
        m = TriMesh(v, [[0, 1, 2], [2, 3, 4], [1, 4, 5]])
        p = rng.normal(size=(10, 3))
        T = random_rigid(rng)
        d0, _ = point_to_mesh(p, m)
        d1, _ = point_to_mesh(p @ T[:3, :3].T + T[:3, 3], m.transformed(T))
        assert np.max(np.abs(d0 - d1)) <= 1e-9


def test_rotation_matrix_orthonormal():
    for r in itertools.product([0.0, 0.3, -2.0], repeat=3):
        R = rotation_matrix(r)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-14) and np.isclose(np.linalg.det(R), 1)
