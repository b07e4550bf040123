import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwsplat import losses, tape
from uwsplat.core import DivergedError, InvalidArgumentError
from uwsplat.losses import LossBreakdown, LossWeights
from uwsplat.tape import Tensor


def scalar(x):
    return float(x.value)


class TestBasicLoss:
    def test_identity_is_zero(self, rng):
        img = rng.random((16, 16, 3))
        assert scalar(losses.l_basic(img, img)) == pytest.approx(0.0, abs=1e-12)

    def test_constant_shift_l1_part(self):
        a = np.full((16, 16, 3), 0.4)
        b = a + 0.1
        val = scalar(losses.l1(a, b))
        assert val == pytest.approx(0.1, abs=1e-12)

    def test_symmetry(self, rng):
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        assert scalar(losses.l_basic(a, b)) == pytest.approx(scalar(losses.l_basic(b, a)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            losses.l_basic(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


class TestMetrics:
    def test_identical_images_cap(self, rng):
        img = rng.random((16, 16, 3))
        assert losses.psnr(img, img) == 100.0
        assert losses.ssim_np(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_difference_20db(self):
        a = np.full((16, 16, 3), 0.5)
        assert losses.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_ssim_near_constant(self, rng):
        a = np.full((16, 16, 3), 0.5)
        b = a + rng.normal(0.0, 1e-4, a.shape)
        assert losses.ssim_np(a, b) >= 0.99


class TestAbLoss:
    def test_all_terms_vanish(self):
        z = np.zeros((4, 4))
        val = losses.l_ab(z, np.ones((4, 4, 3)), z, np.ones((4, 4)), mu=1.0, d_far=20.0)
        assert scalar(val) == pytest.approx(0.0, abs=1e-14)

    def test_complementary_mse_is_zero(self, rng):
        """When B_s + T = 1 the value is independent of mu."""
        b_s = rng.uniform(0.1, 0.9, (6, 6))
        a_map = rng.random((6, 6, 3))
        depth = rng.uniform(0, 5, (6, 6))
        v0 = scalar(losses.l_ab(b_s, a_map, depth, 1.0 - b_s, mu=0.0, d_far=20.0))
        v9 = scalar(losses.l_ab(b_s, a_map, depth, 1.0 - b_s, mu=9.0, d_far=20.0))
        assert v0 == pytest.approx(v9, abs=1e-14)

    def test_hand_computed_2x2(self):
        d_far = 20.0
        b_s = np.array([[0.2, 0.4], [0.6, 0.8]])
        d_norm = np.array([[0.1, 0.2], [0.3, 0.4]])
        a_scalar = np.array([[0.9, 0.8], [0.7, 0.6]])
        a_map = np.repeat(a_scalar[:, :, None], 3, axis=2)
        t_map = 1.0 - b_s
        val = losses.l_ab(b_s, a_map, d_norm * d_far, t_map, mu=1.0, d_far=d_far)
        # mean(B_s*Dn) = 0.6/4 = 0.15; mean(A*Dn) = 0.70/4 = 0.175; MSE = 0
        assert scalar(val) == pytest.approx(0.15 - 0.175, abs=1e-12)


class TestEdgeLoss:
    def test_zero_scatter_is_zero(self, rng):
        depth = rng.uniform(2, 6, (8, 8))
        val = losses.l_edge(np.zeros((8, 8)), depth, lambda_edge=0.1, alpha_s=10.0)
        assert scalar(val) == pytest.approx(0.0, abs=1e-12)

    def test_constant_fields_zero(self):
        val = losses.l_edge(np.full((8, 8), 0.5), np.full((8, 8), 3.0),
                            lambda_edge=0.1, alpha_s=10.0)
        assert scalar(val) == pytest.approx(0.0, abs=1e-10)

    def test_aligned_step_bypasses_smoothness(self):
        """A depth-aligned scatter step: smoothness weight collapses there,
        so the smoothness term stays near zero while the magnitude term acts."""
        depth = np.full((10, 10), 2.0)
        depth[:, 5:] = 6.0
        b_s = np.full((10, 10), 0.2)
        b_s[:, 5:] = 0.6
        val_aligned = scalar(losses.l_edge(b_s, depth, lambda_edge=1.0, alpha_s=50.0))
        val_flat_depth = scalar(losses.l_edge(b_s, np.full((10, 10), 2.0),
                                              lambda_edge=1.0, alpha_s=50.0))
        # against flat depth the same scatter step pays the full smoothness cost
        assert val_flat_depth > val_aligned


class TestMultiScaleLoss:
    def test_identity_zero(self, rng):
        img = rng.random((8, 8, 3))
        assert scalar(losses.l_ms(img, img, lambda_ms=0.5)) == pytest.approx(0.0, abs=1e-14)

    def test_constant_offset(self):
        a = np.full((8, 8, 3), 0.3)
        val = scalar(losses.l_ms(a, a + 0.1, lambda_ms=0.5))
        assert val == pytest.approx(0.1 * 1.5, abs=1e-12)

    def test_checkerboard_cancels_at_coarse_scales(self):
        a = np.full((8, 8, 3), 0.5)
        yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        b = a + 0.1 * np.where((xx + yy) % 2 == 0, 1.0, -1.0)[:, :, None]
        val = scalar(losses.l_ms(a, b, lambda_ms=0.5))
        assert val == pytest.approx(0.1, abs=1e-10)


class TestWaterAdaptive:
    def test_endpoint_weights(self):
        assert losses.alpha_of_w(0.0) == pytest.approx(1.2)
        assert losses.beta_of_w(0.0) == pytest.approx(0.8)
        assert losses.alpha_of_w(1.0) == pytest.approx(0.8)
        assert losses.beta_of_w(1.0) == pytest.approx(1.2)
        assert losses.alpha_of_w(0.5) == pytest.approx(1.0)
        assert losses.beta_of_w(0.5) == pytest.approx(1.0)

    @given(st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=50, deadline=None)
    def test_weight_sum_invariant(self, w):
        assert losses.alpha_of_w(w) + losses.beta_of_w(w) == pytest.approx(2.0)

    def test_combination_arithmetic(self):
        wts = LossWeights(gamma_wat=1.0)
        val = losses.l_wat(Tensor(np.array(0.5)), Tensor(np.array(0.25)),
                           Tensor(np.array(-0.1)), w=0.0, weights=wts)
        assert scalar(val) == pytest.approx(1.2 * 0.5 + 0.8 * 0.25 - 0.1)

    def test_out_of_range_w_clamped(self, caplog):
        wts = LossWeights()
        val = losses.l_wat(Tensor(np.array(1.0)), Tensor(np.array(1.0)),
                           Tensor(np.array(0.0)), w=1.5, weights=wts)
        assert scalar(val) == pytest.approx(0.8 + 1.2)


class TestTotal:
    def test_zero_parts(self):
        parts = LossBreakdown(0, 0, 0, 0, 0, 0)
        assert losses.l_total(parts, LossWeights()) == 0.0

    def test_unit_parts_unit_weights(self):
        parts = LossBreakdown(1, 1, 1, 1, 1, 0)
        wts = LossWeights(w1=1, w2=1, w3=1, w4=1, w5=1)
        assert losses.l_total(parts, wts) == pytest.approx(5.0)

    def test_weighted_dot_product(self):
        # 0.5 + 0.05*(-0.02) + 0.05*0.3 + 0.01*0.1 + 0.2*0.2 = 0.5550
        parts = LossBreakdown(0.5, -0.02, 0.3, 0.1, 0.2, 0)
        assert losses.l_total(parts, LossWeights()) == pytest.approx(0.5550, abs=1e-12)

    def test_nonfinite_part_raises(self):
        parts = LossBreakdown(np.nan, 0, 0, 0, 0, 0)
        with pytest.raises(DivergedError):
            losses.l_total(parts, LossWeights())
