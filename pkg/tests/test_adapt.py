import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwsplat import adapt
from uwsplat.adapt import (
    ClassifierWeights,
    classify_water,
    controller,
    index_to_class,
    make_corpus,
    ratio_to_index,
    water_index_heuristic,
)


class TestClassifier:
    def test_zero_weights_uniform_probs(self):
        profile = classify_water(np.full((4, 4, 3), 0.3), ClassifierWeights())
        np.testing.assert_allclose(profile.probs, 1.0 / 3.0, atol=1e-12)
        assert profile.w == pytest.approx(0.5)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_simplex(self, seed):
        rng = np.random.default_rng(seed)
        cw = ClassifierWeights(w1=rng.normal(size=(adapt.HIDDEN, 3)),
                               b1=rng.normal(size=adapt.HIDDEN),
                               w2=rng.normal(size=(3, adapt.HIDDEN)),
                               b2=rng.normal(size=3))
        profile = classify_water(rng.random((3, 3, 3)), cw)
        assert profile.probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(profile.probs > 0.0) and np.all(profile.probs < 1.0)
        assert 0.0 <= profile.w <= 1.0

    def test_blue_tinted_image_is_clear(self, classifier):
        img = np.tile(np.array([0.1, 0.3, 0.6]), (8, 8, 1))
        profile = classify_water(img, classifier)
        assert profile.argmax_class == "clear"

    def test_green_dominant_image_is_turbid(self, classifier):
        img = np.tile(np.array([0.12, 0.45, 0.30]), (8, 8, 1))
        profile = classify_water(img, classifier)
        assert profile.argmax_class == "turbid"

    def test_agrees_with_ratio_heuristic_on_corpus(self, classifier):
        feats, labels = make_corpus(n_per_class=40, seed=99)
        for mean_rgb, label in zip(feats, labels):
            img = np.tile(mean_rgb, (2, 2, 1))
            profile = classify_water(img, classifier)
            heuristic_cls = index_to_class(water_index_heuristic(img))
            assert profile.argmax_class == adapt.CLASS_NAMES[label]
            assert heuristic_cls == adapt.CLASS_NAMES[label]

    def test_t_mod_interpolates_anchor_values(self, classifier):
        img = np.tile(np.array([0.1, 0.3, 0.6]), (8, 8, 1))
        profile = classify_water(img, classifier)
        assert 1.0 <= profile.t_mod <= 1.2

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            classify_water(np.zeros((0, 0, 3)), ClassifierWeights())


class TestRatioIndex:
    def test_endpoints_and_midpoint(self):
        assert ratio_to_index(1.3) == pytest.approx(0.0)
        assert ratio_to_index(0.8) == pytest.approx(1.0)
        assert ratio_to_index(1.05) == pytest.approx(0.5)

    @given(st.floats(min_value=0.0, max_value=3.0))
    @settings(max_examples=50, deadline=None)
    def test_clamped_to_unit_interval(self, ratio):
        assert 0.0 <= ratio_to_index(ratio) <= 1.0


def profile_for(w, cls_idx):
    probs = np.full(3, 0.05)
    probs[cls_idx] = 0.9
    return adapt.WaterProfile(probs=probs, w=w, bg_ratio=1.0)


class TestController:
    def test_pre_enable_physics_frozen(self):
        sched = controller(profile_for(0.0, 0), iteration=0, total=3000)
        assert not sched.water_path_enabled
        assert sched.lr_attenuation == 0.0 and sched.lr_scattering == 0.0
        assert sched.lr_gaussians > 0.0

    def test_flag_flips_exactly_at_fraction(self):
        total = 3000
        enable = 1000
        before = controller(profile_for(0.0, 0), enable - 1, total)
        after = controller(profile_for(0.0, 0), enable, total)
        assert not before.water_path_enabled
        assert after.water_path_enabled

    def test_clear_schedule_ends_at_5e5(self):
        sched = controller(profile_for(0.0, 0), 2999, 3000)
        assert sched.lr_attenuation == pytest.approx(5e-5)
        assert sched.lr_scattering == pytest.approx(5e-5)

    def test_clear_schedule_starts_at_1e4(self):
        sched = controller(profile_for(0.0, 0), 1000, 3000)
        assert sched.lr_attenuation == pytest.approx(1e-4)

    def test_turbid_holds_1e4(self):
        for it in (1000, 2000, 2999):
            sched = controller(profile_for(1.0, 2), it, 3000)
            assert sched.lr_attenuation == pytest.approx(1e-4)
            assert sched.lr_scattering == pytest.approx(1e-4)

    def test_medium_between_schedules(self):
        clear = controller(profile_for(0.0, 0), 2500, 3000)
        turbid = controller(profile_for(1.0, 2), 2500, 3000)
        medium = controller(profile_for(0.5, 1), 2500, 3000)
        assert clear.lr_attenuation < medium.lr_attenuation < turbid.lr_attenuation

    def test_caps_respected_everywhere(self):
        for cls_idx, w in ((0, 0.0), (1, 0.5), (2, 1.0)):
            for it in range(0, 3000, 97):
                sched = controller(profile_for(w, cls_idx), it, 3000)
                assert sched.lr_attenuation <= adapt.LR_CAP_ATTENUATION
                assert sched.lr_scattering <= adapt.LR_CAP_SCATTERING

    def test_loss_path_weights_follow_water_index(self):
        sched = controller(profile_for(0.0, 0), 0, 100)
        assert sched.alpha_w == pytest.approx(1.2)
        assert sched.beta_w == pytest.approx(0.8)

    def test_iteration_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            controller(profile_for(0.0, 0), 3000, 3000)


class TestFitting:
    def test_corpus_is_separable_by_fit(self, classifier):
        feats, labels = make_corpus(n_per_class=60, seed=5)
        correct = 0
        for mean_rgb, label in zip(feats, labels):
            profile = classify_water(np.tile(mean_rgb, (1, 1, 1)), classifier)
            correct += int(profile.argmax_class == adapt.CLASS_NAMES[label])
        assert correct / len(labels) >= 0.98

    def test_default_classifier_deterministic(self):
        a = adapt.default_classifier()
        b = adapt.default_classifier()
        np.testing.assert_array_equal(a.w1, b.w1)
        np.testing.assert_array_equal(a.b2, b.b2)
