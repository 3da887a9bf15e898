import numpy as np
import pytest

from enerf.exceptions import GeometryError
from enerf.geometry import (
    Intrinsics,
    Ray,
    RayBundle,
    RaySamples,
    WeightHistogram,
    batched_searchsorted,
    contract,
    image_rays,
    jitter_rng,
    look_at,
    piecewise_edges,
    ray_from_pixel,
    resample_pdf,
    sample_piecewise,
    stratify,
)


class TestContract:
    def test_identity_inside_unit_cube(self, rng):
        points = rng.uniform(-1.0, 1.0, size=(100, 3))
        np.testing.assert_array_equal(contract(points), points)

    def test_far_points_stay_inside(self, rng):
        directions = rng.normal(size=(100_000, 3))
        scales = 10.0 ** rng.uniform(0.0, 6.0, size=(100_000, 1))
        contracted = contract(directions / np.abs(directions).max(axis=-1, keepdims=True) * scales)
        assert np.all(np.abs(contracted).max(axis=-1) < 2.0)

    def test_continuous_at_boundary(self):
        inside = contract(np.array([1.0 - 1e-9, 0.3, -0.2]))
        outside = contract(np.array([1.0 + 1e-9, 0.3, -0.2]))
        assert np.max(np.abs(inside - outside)) < 1e-6

    def test_known_value(self):
        np.testing.assert_allclose(contract(np.array([4.0, 2.0, 0.0])), [1.75, 0.875, 0.0])

    def test_axis_points_approach_two_monotonically(self):
        t = np.array([1.5, 2.0, 5.0, 10.0, 1e2, 1e4, 1e8])
        contracted = contract(np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=-1))
        assert np.all(np.diff(contracted[:, 0]) > 0)
        assert np.all(contracted[:, 0] < 2.0)
        assert contracted[-1, 0] == pytest.approx(2.0, abs=1e-7)
        np.testing.assert_array_equal(contracted[:, 1:], 0.0)

    def test_keeps_signs_and_component_order(self, rng):
        points = rng.normal(size=(500, 3)) * rng.uniform(0.5, 50.0, size=(500, 1))
        contracted = contract(points)
        np.testing.assert_array_equal(np.sign(contracted), np.sign(points))
        np.testing.assert_array_equal(np.argmax(np.abs(contracted), axis=-1), np.argmax(np.abs(points), axis=-1))
        np.testing.assert_array_equal(np.argsort(np.abs(contracted), axis=-1), np.argsort(np.abs(points), axis=-1))

    def test_non_finite_input(self):
        with pytest.raises(GeometryError):
            contract(np.array([np.inf, 0.0, 0.0]))


class TestPiecewise:
    def test_edges_cover_both_segments(self):
        edges = piecewise_edges(np.array([0.1]), np.array([20.0]), n_uniform=4, n_log=4, t_split=1.0)
        assert edges.shape == (1, 9)
        np.testing.assert_allclose(edges[0, :5], np.linspace(0.1, 1.0, 5))
        ratios = edges[0, 5:] / edges[0, 4:-1]
        np.testing.assert_allclose(ratios, ratios[0])
        assert edges[0, -1] == 20.0

    def test_split_must_be_inside(self):
        with pytest.raises(GeometryError):
            piecewise_edges(np.array([0.1]), np.array([20.0]), 4, 4, t_split=25.0)

    def test_stratify_stays_ordered_and_keeps_ends(self, rng):
        edges = piecewise_edges(np.full(8, 0.1), np.full(8, 20.0), 16, 16, 1.0)
        jittered = stratify(edges, rng)
        assert np.all(np.diff(jittered, axis=-1) > 0)
        np.testing.assert_array_equal(jittered[:, [0, -1]], edges[:, [0, -1]])
        assert not np.array_equal(jittered, edges)

    def test_jitter_is_deterministic(self):
        ray = Ray([0, 0, 3], [0, 0, -1], 0.1, 20.0)
        a = sample_piecewise(ray, 8, 8, 1.0, jitter_rng(7, 3, 1))
        b = sample_piecewise(ray, 8, 8, 1.0, jitter_rng(7, 3, 1))
        c = sample_piecewise(ray, 8, 8, 1.0, jitter_rng(7, 4, 1))
        np.testing.assert_array_equal(a.edges, b.edges)
        assert not np.array_equal(a.edges, c.edges)


class TestResample:
    def test_batched_searchsorted_matches_numpy(self, rng):
        rows = np.sort(rng.uniform(0.0, 1.0, size=(5, 12)), axis=-1)
        values = rng.uniform(-0.1, 1.1, size=(5, 7))
        expected = np.stack([np.searchsorted(r, v, side="right") for r, v in zip(rows, values)])
        np.testing.assert_array_equal(batched_searchsorted(rows, values, side="right"), expected)

    def test_uniform_histogram_reproduces_edges(self):
        edges = np.linspace(0.0, 4.0, 9)
        hist = WeightHistogram(edges, np.full(8, 1.0 / 8))
        out = resample_pdf(hist, 8, padding=0.0)
        np.testing.assert_allclose(out.edges[0], edges, atol=1e-12)

    def test_mass_concentrates_samples(self):
        hist = WeightHistogram(np.arange(5.0), np.array([0.0, 1.0, 0.0, 0.0]))
        out = resample_pdf(hist, 4, padding=0.0)
        np.testing.assert_allclose(out.edges[0], [1.0, 1.25, 1.5, 1.75, 2.0])

    def test_padding_keeps_coverage(self):
        hist = WeightHistogram(np.arange(5.0), np.array([0.0, 1.0, 0.0, 0.0]))
        out = resample_pdf(hist, 16)
        assert out.edges[0, 0] == 0.0
        assert out.edges[0, -1] == 4.0
        inside = np.sum((out.midpoints[0] > 1.0) & (out.midpoints[0] < 2.0))
        assert inside > 8

    def test_jitter_needs_generator(self):
        hist = WeightHistogram(np.arange(3.0), np.array([0.5, 0.5]))
        with pytest.raises(GeometryError):
            resample_pdf(hist, 4, jitter=True)

    def test_jittered_edges_increase(self, rng):
        hist = WeightHistogram(np.tile(np.arange(9.0), (3, 1)), rng.dirichlet(np.ones(8), size=3) * 0.9)
        out = resample_pdf(hist, 12, jitter=True, rng=rng)
        assert out.edges.shape == (3, 13)
        assert np.all(np.diff(out.edges, axis=-1) > 0)

    def test_histogram_rejects_excess_mass(self):
        with pytest.raises(GeometryError):
            WeightHistogram(np.arange(3.0), np.array([0.8, 0.8]))

    def test_midpoints_follow_the_padded_histogram(self):
        gen = np.random.default_rng(7)
        edges = np.concatenate([[0.0], np.cumsum(gen.uniform(0.2, 1.5, size=8))])
        weights = gen.uniform(0.05, 1.0, size=8)
        weights *= 0.8 / weights.sum()
        out = resample_pdf(WeightHistogram(edges, weights), 100_000, jitter=True, rng=jitter_rng(3))

        counts, _ = np.histogram(out.midpoints[0], bins=edges)
        empirical = counts / counts.sum()
        padded = (weights + 1e-2) / (weights + 1e-2).sum()
        assert 0.5 * np.sum(np.abs(empirical - padded)) < 0.05


class TestCamera:
    def test_center_pixel_looks_down_negative_z(self):
        intr = Intrinsics.from_fov(8, 8, 40.0)
        ray = ray_from_pixel(intr, np.eye(4), (4.0, 4.0))
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_array_equal(ray.origin, [0.0, 0.0, 0.0])

    def test_image_axes(self):
        intr = Intrinsics(fx=4.0, fy=4.0, cx=4.0, cy=4.0)
        bundle = image_rays(intr, np.eye(4), 8, 8, 0.1, 20.0)
        assert len(bundle) == 64
        # First pixel is top-left: left (-x) and up (+y).
        assert bundle.directions[0, 0] < 0 and bundle.directions[0, 1] > 0
        # Pixel (7, 0) sits at the right end of the first row.
        assert bundle.directions[7, 0] > 0

    def test_look_at_faces_target(self):
        pose = look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0])
        intr = Intrinsics.from_fov(16, 16, 40.0)
        ray = ray_from_pixel(intr, pose, (8.0, 8.0))
        expected = -np.array([3.0, 1.0, 2.0]) / np.linalg.norm([3.0, 1.0, 2.0])
        np.testing.assert_allclose(ray.direction, expected, atol=1e-9)
        np.testing.assert_allclose(pose[:3, :3].T @ pose[:3, :3], np.eye(3), atol=1e-12)

    def test_rejects_non_rigid_pose(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        with pytest.raises(GeometryError, match="orthonormal"):
            ray_from_pixel(Intrinsics.from_fov(8, 8, 40.0), pose, (4.0, 4.0))

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(GeometryError):
            Intrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)


class TestRayValidation:
    def test_non_unit_direction(self):
        with pytest.raises(GeometryError, match="unit"):
            Ray([0, 0, 0], [0, 0, -2], 0.1, 20.0)

    def test_bad_bounds(self):
        with pytest.raises(GeometryError):
            RayBundle(np.zeros((2, 3)), np.tile([0.0, 0.0, -1.0], (2, 1)), 1.0, 0.5)

    def test_bundle_round_trip_through_rays(self):
        rays = [Ray([0, 0, 3], [0, 0, -1], 0.1, 20.0, 2), Ray([1, 0, 3], [1, 0, 0], 0.5, 10.0, 1)]
        bundle = RayBundle.from_rays(rays)
        assert bundle.ray(1).appearance_index == 1
        assert len(bundle.subset(np.array([1]))) == 1

    def test_samples_must_increase(self):
        with pytest.raises(GeometryError):
            RaySamples(np.array([0.0, 1.0, 1.0]))
