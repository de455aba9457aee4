import numpy as np
import pytest

from p2v import geometry
from p2v.errors import InvalidInputError

from conftest import random_cloud


def chamfer_oracle(a, b):
    """Straight double-loop chamfer, independent of the kernel path."""
    def one_way(src, dst):
        total = 0.0
        for p in src:
            best = min(float(((p - q) ** 2).sum()) for q in dst)
            total += best
        return total / len(src)
    return one_way(a, b) + one_way(b, a)


class TestChamfer:
    def test_identical_clouds_zero(self, rng):
        a = random_cloud(rng, 17)
        assert geometry.chamfer_distance(a, a) == 0.0

    def test_single_point_pair(self):
        # one point each, distance 1 apart: 1.0 + 1.0
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[1.0, 0.0, 0.0]])
        assert geometry.chamfer_distance(a, b) == 2.0

    def test_matches_double_loop_oracle(self, rng):
        for _ in range(25):
            a = random_cloud(rng, int(rng.integers(4, 40)), centered=False)
            b = random_cloud(rng, int(rng.integers(4, 40)), centered=False)
            got = geometry.chamfer_distance(a, b)
            want = chamfer_oracle(a, b)
            assert got == pytest.approx(want, rel=1e-12)

    def test_symmetric(self, rng):
        a = random_cloud(rng, 12)
        b = random_cloud(rng, 9)
        assert geometry.chamfer_distance(a, b) == pytest.approx(
            geometry.chamfer_distance(b, a), rel=1e-12)

    def test_subset_one_sided_zero(self, rng):
        # every point of a is in b, so the a-side term vanishes
        b = random_cloud(rng, 20)
        a = b[:8]
        one_sided = geometry.min_sqdist(a, b)
        assert np.all(one_sided == 0.0)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InvalidInputError):
            geometry.chamfer_distance(np.zeros((0, 3)), np.ones((2, 3)))
        with pytest.raises(InvalidInputError):
            geometry.chamfer_distance(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(InvalidInputError):
            geometry.chamfer_distance(np.array([[np.nan, 0, 0]]), np.ones((2, 3)))

    def test_backends_agree_exactly(self, rng):
        from p2v import _kernels_np
        a = random_cloud(rng, 33, centered=False)
        b = random_cloud(rng, 21, centered=False)
        via_selected = geometry.min_sqdist(a, b)
        via_numpy = _kernels_np.min_sqdist(np.ascontiguousarray(a), np.ascontiguousarray(b))
        assert np.array_equal(via_selected, via_numpy)


class TestRotation:
    def test_rotate_z_quarter_turn(self):
        pts = np.array([[1.0, 0.0, 2.0]])
        out = geometry.rotate_z(pts, np.pi / 2)
        assert out == pytest.approx(np.array([[0.0, 1.0, 2.0]]), abs=1e-12)

    def test_rotate_z_composes(self, rng):
        pts = random_cloud(rng, 10)
        ab = geometry.rotate_z(geometry.rotate_z(pts, 0.3), 0.5)
        once = geometry.rotate_z(pts, 0.8)
        assert ab == pytest.approx(once, abs=1e-12)

    def test_recovers_known_rotation(self, rng):
        # the worked example: b is a rotated by pi/3
        a = random_cloud(rng, 30)
        b = geometry.rotate_z(a, np.pi / 3)
        dist, angle = geometry.rotation_optimized_chamfer(a, b, grid_steps=36)
        assert dist <= 1e-9
        assert angle == pytest.approx(np.pi / 3, abs=1e-3)

    def test_never_worse_than_unrotated(self, rng):
        for _ in range(10):
            a = random_cloud(rng, 15)
            b = random_cloud(rng, 15)
            dist, _ = geometry.rotation_optimized_chamfer(a, b, grid_steps=12)
            assert dist <= geometry.chamfer_distance(a, b) + 1e-15

    def test_grid_only_matches_brute_force(self, rng):
        # with refinement off, the result is exactly the best grid angle
        a = random_cloud(rng, 12)
        b = random_cloud(rng, 14)
        steps = 10
        dist, angle = geometry.rotation_optimized_chamfer(a, b, grid_steps=steps, refine_tol=None)
        grid = [2.0 * np.pi * k / steps for k in range(steps)]
        brute = min((geometry.chamfer_distance(geometry.rotate_z(a, t), b), t) for t in grid)
        assert dist == brute[0]
        assert angle == pytest.approx(brute[1] % (2 * np.pi), abs=1e-15)

    def test_angle_in_range(self, rng):
        a = random_cloud(rng, 8)
        b = random_cloud(rng, 8)
        _, angle = geometry.rotation_optimized_chamfer(a, b, grid_steps=7)
        assert 0.0 <= angle < 2.0 * np.pi

    def test_refinement_improves_on_grid(self, rng):
        a = random_cloud(rng, 20)
        b = geometry.rotate_z(a, 0.777)  # off-grid angle
        coarse, _ = geometry.rotation_optimized_chamfer(a, b, grid_steps=8, refine_tol=None)
        fine, angle = geometry.rotation_optimized_chamfer(a, b, grid_steps=8, refine_tol=1e-9)
        assert fine <= coarse
        assert fine <= 1e-9
        assert angle == pytest.approx(0.777, abs=1e-3)

    def test_invalid_grid(self, rng):
        a = random_cloud(rng, 5)
        with pytest.raises(InvalidInputError):
            geometry.rotation_optimized_chamfer(a, a, grid_steps=0)


class TestCenter:
    def test_centered_mean_within_tolerance(self, rng):
        pts = random_cloud(rng, 50, centered=False) + 100.0
        centered, centroid = geometry.center(pts)
        diameter = np.linalg.norm(centered.max(axis=0) - centered.min(axis=0))
        assert np.abs(centered.mean(axis=0)).max() <= 1e-6 * diameter
        assert centered + centroid == pytest.approx(pts, rel=1e-12)


class TestMesh:
    def unit_square(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        return geometry.TriangleMesh(verts, faces)

    def test_face_areas(self):
        mesh = self.unit_square()
        assert mesh.face_areas() == pytest.approx([0.5, 0.5])

    def test_sample_surface_on_surface(self):
        mesh = self.unit_square()
        pts = geometry.sample_surface(mesh, 0, 500, rng_seed=3)
        assert pts.shape == (500, 3)
        assert np.all(pts[:, 2] == 0.0)
        assert np.all((pts[:, 0] >= -1e-12) & (pts[:, 0] <= 1 + 1e-12))
        assert np.all((pts[:, 1] >= -1e-12) & (pts[:, 1] <= 1 + 1e-12))

    def test_sample_surface_deterministic(self):
        mesh = self.unit_square()
        a = geometry.sample_surface(mesh, 0, 64, rng_seed=9)
        b = geometry.sample_surface(mesh, 0, 64, rng_seed=9)
        assert np.array_equal(a, b)

    def test_area_weighted_face_selection(self):
        # triangle areas 0.5 and 4.5, so the second should get 90% of
        # samples (binomial bound at ~5 sigma)
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 1], [0, 3, 1], [0, 0, 1]])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        mesh = geometry.TriangleMesh(verts, faces)
        assert mesh.face_areas() == pytest.approx([0.5, 4.5])
        n = 4000
        pts = geometry.sample_surface(mesh, 0, n, rng_seed=1)
        frac_big = float(np.mean(pts[:, 2] == 1.0))
        sigma = np.sqrt(0.9 * 0.1 / n)
        assert abs(frac_big - 0.9) < 5 * sigma

    def test_instance_filtering(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 5], [1, 0, 5], [1, 1, 5]])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        mesh = geometry.TriangleMesh(verts, faces, np.array([0, 7]))
        pts = geometry.sample_surface(mesh, 7, 100, rng_seed=0)
        assert np.all(pts[:, 2] == 5.0)

    def test_zero_area_instance_rejected(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        faces = np.array([[0, 1, 2]])
        mesh = geometry.TriangleMesh(verts, faces)
        with pytest.raises(InvalidInputError):
            geometry.sample_surface(mesh, 0, 10, rng_seed=0)

    def test_missing_instance_rejected(self):
        mesh = self.unit_square()
        with pytest.raises(InvalidInputError):
            geometry.sample_surface(mesh, 42, 10, rng_seed=0)
