import numpy as np
import pytest

from enerf import diffcore as dc
from enerf.exceptions import LossError
from enerf.geometry import WeightHistogram
from enerf.objective import (
    INTERLEVEL_EPS,
    LossBreakdown,
    loss_interlevel,
    loss_total,
    metrics_psnr,
    metrics_ssim,
    outer_measure,
)
from enerf.renderer import composite


class TestInterlevel:
    def test_zero_when_proposal_bounds_nerf(self):
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([0.3, 0.3]))
        prop = WeightHistogram(np.array([0.0, 2.0]), np.array([0.9]))
        assert loss_interlevel(nerf, prop).item() == 0.0

    def test_hand_computed_penalty(self):
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0]))
        prop = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.5]))
        expected = 0.25 / (0.5 + INTERLEVEL_EPS)
        assert loss_interlevel(nerf, prop).item() == pytest.approx(expected, rel=1e-9)

    def test_outer_measure_counts_touching_intervals(self):
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0, 3.0]), np.array([0.2, 0.3, 0.4]))
        measure = outer_measure(nerf, np.array([[0.0, 1.5, 3.0]]))
        np.testing.assert_allclose(measure, [[0.5, 0.7]])

    def test_gradient_flows_to_proposal_weights_only(self):
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([0.8, 0.1]))
        weights = dc.tensor(np.array([[0.3, 0.2]]), requires_grad=True)
        dc.backward(loss_interlevel(nerf, WeightHistogram(np.array([0.0, 1.0, 2.0]), weights)))
        assert weights.grad[0, 0] < 0
        assert weights.grad[0, 1] == 0.0

    def test_span_mismatch(self):
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.5]))
        prop = WeightHistogram(np.array([0.0, 1.0, 3.0]), np.array([0.5, 0.5]))
        with pytest.raises(LossError, match="span"):
            loss_interlevel(nerf, prop)

    def test_ray_count_mismatch(self):
        nerf = WeightHistogram(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([[0.5], [0.5]]))
        prop = WeightHistogram(np.array([0.0, 1.0]), np.array([0.5]))
        with pytest.raises(LossError):
            loss_interlevel(nerf, prop)


def make_pixel(raw_sigma, raw_colors, deltas):
    colors = {name: dc.sigmoid(raw) for name, raw in raw_colors.items()}
    return composite(dc.exp(raw_sigma), deltas, colors)


class TestTotal:
    @pytest.fixture
    def batch(self, rng):
        raw_sigma = dc.tensor(rng.normal(size=(4, 5)), requires_grad=True)
        raw_colors = {
            name: dc.tensor(rng.normal(size=(4, 5, 3)), requires_grad=True) for name in ("fine", "mid", "coarse")
        }
        deltas = rng.uniform(0.05, 0.3, size=(4, 5))
        gt = rng.uniform(0.0, 1.0, size=(4, 3))
        return raw_sigma, raw_colors, deltas, gt

    def test_total_is_sum_of_columns(self, batch):
        raw_sigma, raw_colors, deltas, gt = batch
        pixel = make_pixel(raw_sigma, raw_colors, deltas)
        nerf = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0]))
        prop = WeightHistogram(np.array([0.0, 1.0, 2.0]), np.array([0.5, 0.5]))
        nerf = WeightHistogram(np.tile(nerf.edges, (4, 1)), np.tile(nerf.values, (4, 1)))
        prop = WeightHistogram(np.tile(prop.edges, (4, 1)), np.tile(prop.values, (4, 1)))

        breakdown = loss_total(pixel, gt, [(nerf, prop)])
        assert breakdown.prop > 0
        assert breakdown.total == pytest.approx(sum(breakdown.as_row()[c] for c in LossBreakdown.COLUMNS[1:]))
        assert breakdown.tensor.item() == pytest.approx(breakdown.total, rel=1e-9)
        assert breakdown.is_finite()

    def test_fine_mse_sums_components(self, batch):
        raw_sigma, raw_colors, deltas, gt = batch
        pixel = make_pixel(raw_sigma, raw_colors, deltas)
        breakdown = loss_total(pixel, gt, sh_terms=False)
        expected = np.mean(np.sum((pixel.fine.data - gt) ** 2, axis=-1))
        assert breakdown.fine_mse == pytest.approx(expected)

    def test_sh_terms_off_gives_exact_zeros(self, batch):
        raw_sigma, raw_colors, deltas, gt = batch
        breakdown = loss_total(make_pixel(raw_sigma, {"fine": raw_colors["fine"]}, deltas), gt, sh_terms=False)
        assert (breakdown.sh_fine, breakdown.sh_mid, breakdown.sh_coarse, breakdown.prop) == (0.0, 0.0, 0.0, 0.0)
        assert breakdown.total == breakdown.fine_mse

    def test_gradients(self, batch):
        raw_sigma, raw_colors, deltas, gt = batch

        def loss():
            return loss_total(make_pixel(raw_sigma, raw_colors, deltas), gt).tensor

        dc.backward(loss())
        for target in [raw_sigma, raw_colors["mid"]]:
            positions = list(np.ndindex(*target.shape))[:15]
            numeric = dc.numerical_gradient(loss, target, positions)
            analytic = np.array([target.grad[p] for p in positions])
            assert dc.gradients_match(analytic, numeric)

    def test_perfect_fit_costs_nothing(self, rng):
        gt = rng.uniform(0.1, 0.9, size=(4, 3))
        colors = {name: gt[:, None, :] for name in ("fine", "mid", "coarse")}
        pixel = composite(np.full((4, 3), 1e3), np.ones((4, 3)), colors)
        np.testing.assert_array_equal(pixel.fine.data, gt)

        nerf = WeightHistogram(np.tile([0.0, 1.0, 2.0, 3.0], (4, 1)), pixel.weights.data)
        prop = WeightHistogram(np.tile([0.0, 3.0], (4, 1)), np.ones((4, 1)))
        breakdown = loss_total(pixel, gt, [(nerf, prop)])
        assert breakdown.prop == 0.0
        assert breakdown.total == pytest.approx(0.0, abs=1e-12)
        assert breakdown.tensor.item() == pytest.approx(0.0, abs=1e-12)

    def test_coarse_term_ignores_which_channel_is_fine(self, batch):
        raw_sigma, raw_colors, deltas, gt = batch
        swapped = {"fine": raw_colors["mid"], "mid": raw_colors["fine"], "coarse": raw_colors["coarse"]}
        original = loss_total(make_pixel(raw_sigma, raw_colors, deltas), gt)
        exchanged = loss_total(make_pixel(raw_sigma, swapped, deltas), gt)
        assert exchanged.sh_coarse == pytest.approx(original.sh_coarse, rel=1e-12)
        assert exchanged.fine_mse != pytest.approx(original.fine_mse)

    def test_ground_truth_shape(self, batch):
        raw_sigma, raw_colors, deltas, _ = batch
        with pytest.raises(LossError):
            loss_total(make_pixel(raw_sigma, raw_colors, deltas), np.zeros((3, 3)))


class TestMetrics:
    def test_psnr(self):
        a = np.full((4, 4, 3), 0.5)
        assert metrics_psnr(a, a) == 99.0
        assert metrics_psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_ssim(self, rng):
        image = rng.uniform(size=(16, 16, 3))
        assert metrics_ssim(image, image) == pytest.approx(1.0)
        noisy = np.clip(image + rng.normal(0, 0.2, size=image.shape), 0, 1)
        assert metrics_ssim(image, noisy) < 0.9

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            metrics_psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(LossError):
            metrics_ssim(np.zeros((4, 4, 3)), np.zeros((4, 4)))
