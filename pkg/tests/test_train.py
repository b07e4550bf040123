import numpy as np
import pytest

from uwsplat import adapt, attenuation, scattering, synth, train
from uwsplat.core import DivergedError
from uwsplat.tape import ParamVector
from uwsplat.train import (
    AdamState,
    TrainConfig,
    adam_step,
    fit_physics,
    init_params,
    restore,
)


def make_params(values):
    return ParamVector({"gauss.means": np.asarray(values, dtype=np.float64)})


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = make_params([1.0, 2.0, 3.0])
        g = make_params([0.0, 0.0, 0.0])
        state = AdamState.like(p)
        out, state = adam_step(p, g, state, 0.1)
        np.testing.assert_array_equal(out.data, p.data)
        assert state.t == 1

    def test_first_step_magnitude(self):
        """Bias correction makes the very first step lr * g / (|g| + eps)."""
        p = make_params([0.0])
        g = make_params([1.0])
        out, _ = adam_step(p, g, AdamState.like(p), 0.1)
        assert out.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_constant_gradient_step_bounded_by_lr(self):
        p = make_params([0.0])
        state = AdamState.like(p)
        prev = 0.0
        for _ in range(50):
            p, state = adam_step(p, make_params([2.5]), state, 0.01)
            step = p.data[0] - prev
            assert abs(step) <= 0.01 * (1.0 + 1e-6)
            prev = p.data[0]
        assert p.data[0] < -0.4  # steadily descending

    def test_input_state_not_mutated(self):
        p = make_params([1.0])
        state = AdamState.like(p)
        adam_step(p, make_params([1.0]), state, 0.1)
        assert state.t == 0
        np.testing.assert_array_equal(state.m, 0.0)

    def test_nonfinite_gradient_raises_with_slot(self):
        p = make_params([1.0, 2.0])
        g = make_params([0.0, np.nan])
        with pytest.raises(DivergedError) as err:
            adam_step(p, g, AdamState.like(p), 0.1)
        assert err.value.context["slot"] == "gauss.means"


class TestProjection:
    def test_quats_renormalized_and_colors_clipped(self):
        p = ParamVector({"gauss.quats": np.array([[2.0, 0.0, 0.0, 0.0]]),
                         "gauss.colors": np.array([[-0.2, 0.5, 1.5]])})
        train._project_constraints(p)
        np.testing.assert_allclose(np.linalg.norm(p.get("gauss.quats"), axis=1), 1.0)
        assert p.get("gauss.colors")[0, 0] == 0.0

    def test_physics_ranges(self):
        p = ParamVector({"atten.gamma": np.array([1.7]), "atten.w_c": np.array([-0.3, 1.0, 1.0]),
                         "scat.lam": np.array([-0.5]), "scat.delta": np.array([-0.1])})
        train._project_constraints(p)
        assert p.get("atten.gamma")[0] == 1.0
        assert p.get("atten.w_c")[0] == 0.0
        assert p.get("scat.lam")[0] == 0.0
        assert p.get("scat.delta")[0] == 0.0


class TestConfig:
    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(enable_fraction=1.5).validate()

    def test_bad_lr_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_gaussians=0.0).validate()


def water_params(beta, b, b_inf):
    atten = attenuation.AttenuationParams(
        w_c=np.ones(3), theta_beta=np.log(np.expm1(np.asarray(beta))), gamma=0.0)
    scat = scattering.ScatterParams(
        b_inf_raw=np.log(np.asarray(b_inf) / (1.0 - np.asarray(b_inf))),
        theta_b=float(np.log(np.expm1(b))))
    return atten, scat


def neutral_profile():
    return adapt.WaterProfile(probs=np.array([1.0, 0.0, 0.0]), w=0.0, bg_ratio=1.3)


class TestRestore:
    def test_inverts_unclipped_degradation(self, rng):
        beta = np.array([0.30, 0.12, 0.07])
        b, b_inf = 0.08, np.array([0.10, 0.30, 0.45])
        clean = rng.uniform(0.05, 0.5, (12, 12, 3))
        depth = rng.uniform(2.0, 6.0, (12, 12))
        degraded = synth.degrade(clean, depth, beta, b, b_inf)
        atten, scat = water_params(beta, b, b_inf)
        restored, valid = restore(degraded, depth, atten, scat,
                                  neutral_profile(), neutral=True)
        assert valid.all()
        np.testing.assert_allclose(restored, clean, atol=1e-10)

    def test_no_water_identity(self, rng):
        img = rng.random((8, 8, 3))
        atten, scat = water_params(np.full(3, 1e-9), 1e-9, np.full(3, 0.5))
        restored, valid = restore(img, np.full((8, 8), 5.0), atten, scat,
                                  neutral_profile(), neutral=True)
        np.testing.assert_allclose(restored, img, atol=1e-7)

    def test_opaque_pixels_flagged_invalid(self):
        beta = np.array([3.0, 3.0, 3.0])
        atten, scat = water_params(beta, 0.1, np.full(3, 0.3))
        depth = np.full((6, 6), 1.0)
        depth[:, 3:] = 10.0  # A = e^-30 << a_min there
        img = np.full((6, 6, 3), 0.4)
        restored, valid = restore(img, depth, atten, scat,
                                  neutral_profile(), neutral=True)
        assert valid[:, :3].all()
        assert not valid[:, 3:].any()
        assert np.isfinite(restored).all()

    def test_output_always_in_unit_range(self, rng):
        atten, scat = water_params(np.array([0.5, 0.3, 0.2]), 0.2, np.full(3, 0.4))
        restored, _ = restore(rng.random((8, 8, 3)), rng.uniform(0, 15, (8, 8)),
                              atten, scat, neutral_profile(), neutral=True)
        assert restored.min() >= 0.0 and restored.max() <= 1.0


class TestFitPhysics:
    def test_recovers_parameters_on_tiny_scene(self):
        spec = synth.spec_for_class("medium", seed=2, n_gaussians=36,
                                    width=28, height=28, n_views=2)
        bundle = synth.generate_scene(spec)
        rec = fit_physics(bundle.clean, bundle.depth, bundle.degraded, iters=200)
        assert rec["b"] == pytest.approx(spec.b, rel=0.10)
        np.testing.assert_allclose(rec["beta_c"], spec.beta_c, rtol=0.10)
        np.testing.assert_allclose(rec["b_inf"], spec.b_inf, atol=0.05)

    def test_returned_params_round_trip(self):
        spec = synth.spec_for_class("clear", seed=1, n_gaussians=25,
                                    width=24, height=24, n_views=2)
        bundle = synth.generate_scene(spec)
        rec = fit_physics(bundle.clean, bundle.depth, bundle.degraded, iters=100)
        p = rec["params"]
        np.testing.assert_allclose(np.logaddexp(0.0, p.get("atten.theta_beta")),
                                   rec["beta_c"], atol=1e-9)


@pytest.fixture(scope="module")
def short_run(small_bundle):
    cfg = TrainConfig(iterations=12, enable_fraction=0.5, eval_interval=4, seed=0)
    return train.train(small_bundle, cfg), cfg


class TestTrainLoop:

    def test_checkpoint_reaches_final_iteration(self, short_run):
        (ckpt, logs), cfg = short_run
        assert ckpt.iteration == cfg.iterations

    def test_logs_at_eval_intervals_and_final(self, short_run):
        (ckpt, logs), cfg = short_run
        its = [row[0] for row in logs]
        assert its == [0, 4, 8, 11]
        for row in logs:
            assert len(row) == 8
            assert np.isfinite(row[1:]).all()

    def test_loss_decreases(self, short_run, small_bundle):
        (ckpt, logs), cfg = short_run
        assert logs[-1][1] < logs[0][1]  # basic loss falls

    def test_determinism(self, small_bundle):
        cfg = TrainConfig(iterations=6, enable_fraction=0.5, eval_interval=3, seed=0)
        a, logs_a = train.train(small_bundle, cfg)
        b, logs_b = train.train(small_bundle, cfg)
        np.testing.assert_array_equal(a.params.data, b.params.data)
        assert logs_a == logs_b

    def test_physics_frozen_before_enable(self, small_bundle):
        cfg = TrainConfig(iterations=4, enable_fraction=0.9, eval_interval=2, seed=0)
        ckpt, _ = train.train(small_bundle, cfg)
        init = init_params(small_bundle, cfg)
        np.testing.assert_array_equal(ckpt.params.get("atten.theta_beta"),
                                      init.get("atten.theta_beta"))
        assert not np.array_equal(ckpt.params.get("gauss.means"),
                                  init.get("gauss.means"))

    def test_too_few_views_rejected(self, small_bundle):
        lone = synth.SceneBundle(spec=small_bundle.spec, cloud=small_bundle.cloud,
                                 cameras=small_bundle.cameras[:1],
                                 clean=small_bundle.clean[:1],
                                 depth=small_bundle.depth[:1],
                                 degraded=small_bundle.degraded[:1])
        with pytest.raises(ValueError):
            train.train(lone, TrainConfig(iterations=2))
