import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirforge import autodiff as ad
from dirforge import diffusion as dm
from dirforge import world

from gradcheck import numeric_grad, rel_error


# ---------------------------------------------------------------- schedules


def test_linear_alpha_bar_product_loop():
    s = dm.linear_schedule(100, 1e-4, 0.02)
    prod = 1.0
    for t in range(1, 101):
        prod *= 1.0 - s.betas[t]
    assert abs(prod - s.alpha_bars[100]) < 1e-12


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 300), lo=st.floats(1e-5, 0.05), span=st.floats(0.0, 0.5))
def test_schedule_invariants(T, lo, span):
    s = dm.linear_schedule(T, lo, min(lo + span, 0.99))
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bars[-1] > 0
    np.testing.assert_allclose(s.alpha_bars, np.cumprod(1.0 - s.betas), rtol=0, atol=0)
    assert s.sigmas[1] == 0.0


@pytest.mark.parametrize("T", [10, 100, 1000])
def test_cosine_schedule_valid(T):
    s = dm.cosine_schedule(T)
    assert np.all(np.diff(s.betas[1:]) >= 0) and s.betas[-1] <= 0.999
    # a window ending at 0.4 T sits in the low-noise regime
    assert s.alpha_bars[int(0.4 * T)] > 0.6


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        dm.NoiseSchedule(3, np.array([0.0, 0.2, 0.1, 0.3]))
    with pytest.raises(ValueError):
        dm.NoiseSchedule(2, np.array([0.0, 0.1, 1.0]))
    with pytest.raises(ValueError):
        dm.make_schedule("quadratic")


def test_schedule_json_round_trip():
    s = dm.cosine_schedule(50)
    back = dm.NoiseSchedule.from_json(s.to_json())
    np.testing.assert_array_equal(back.alpha_bars, s.alpha_bars)


def test_forward_noise_identities(rng):
    s = dm.cosine_schedule(100)
    x0 = rng.standard_normal(256)
    np.testing.assert_array_equal(dm.forward_noise(s, x0, 7, np.zeros(256)), np.sqrt(s.alpha_bars[7]) * x0)
    ab = s.alpha_bars[1]
    eps = rng.standard_normal(256)
    assert np.allclose(dm.forward_noise(s, x0, 1, eps), np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        dm.forward_noise(s, x0, 0, eps)
    with pytest.raises(ValueError):
        dm.forward_noise(s, x0, 101, eps)


# ---------------------------------------------------------------- denoiser


def test_basis_is_orthonormal_and_sorted(tiny_denoiser):
    b = tiny_denoiser.basis
    np.testing.assert_allclose(b.axes.T @ b.axes, np.eye(256), atol=1e-5)
    assert np.all(np.diff(b.std) <= 1e-6)


def test_untrained_skip_path_is_wiener_estimate(rng):
    # Gaussian data with a known covariance: the optimal noise estimate is
    # sqrt(1 - ab) (ab C + (1 - ab) I)^-1 (x_t - sqrt(ab) mu)
    a = rng.standard_normal((256, 256)) * 0.05
    data = rng.standard_normal((4000, 256)) @ a + 0.1
    s = dm.cosine_schedule(100)
    m = dm.init_denoiser(rng, s, dm.DenoiserConfig(hidden=16, n_layers=2, components=8), dm.fit_basis(data))
    b = m.basis
    cov = b.axes @ np.diag(b.std**2) @ b.axes.T
    x_t = rng.standard_normal((3, 256))
    for t in (1, 30, 90):
        ab = s.alpha_bars[t]
        expect = np.sqrt(1 - ab) * np.linalg.solve(ab * cov + (1 - ab) * np.eye(256), (x_t - np.sqrt(ab) * b.mean).T).T
        np.testing.assert_allclose(dm._eps(m, x_t, t, None), expect, atol=1e-5)


def test_predict_noise_shapes_and_determinism(tiny_denoiser, rng):
    x = rng.standard_normal((4, 256))
    a = dm._eps(tiny_denoiser, x, 5, None)
    np.testing.assert_array_equal(a, dm._eps(tiny_denoiser, x, 5, None))
    assert a.shape == x.shape
    assert dm._eps(tiny_denoiser, x[0], 5, None).shape == (256,)
    with pytest.raises(ad.ShapeError):
        dm.predict_noise(tiny_denoiser, x, 5, np.ones(3))
    with pytest.raises(ad.ShapeError):
        dm.predict_noise(tiny_denoiser, np.ones((2, 100)), 5)
    with pytest.raises(ValueError):
        dm.predict_noise(tiny_denoiser, x, 0)


def test_predict_noise_finite_far_from_data(tiny_denoiser, rng):
    for scale in (1, 3, 10):
        out = dm._eps(tiny_denoiser, rng.standard_normal((8, 256)) * scale, 50, rng.standard_normal(16))
        assert np.all(np.isfinite(out))


def test_predict_noise_gradient_wrt_condition(tiny_denoiser, rng):
    x, c, probe = rng.standard_normal((2, 256)), rng.standard_normal(16), rng.standard_normal((2, 256))
    ct = ad.Tensor(c, requires_grad=True)
    ad.backward(ad.tensor_sum(ad.mul(dm.predict_noise(tiny_denoiser, x, 20, ct), probe)))
    fd = numeric_grad(lambda v: float(np.sum(dm._eps(tiny_denoiser, x, 20, v) * probe)), c)
    assert rel_error(ct.grad, fd) < 1e-6


def test_training_beats_zero_predictor(tiny_denoiser, tiny_world, tiny_encoder):
    from dirforge import encoder as en

    held = world.render(world.sample_styles(np.random.default_rng(77), 256))
    c = en.embed(tiny_encoder, held).data
    cond = dm.denoising_loss(tiny_denoiser, tiny_denoiser.schedule, held, c)
    uncond = dm.denoising_loss(tiny_denoiser, tiny_denoiser.schedule, held, None)
    # eps_hat = 0 scores E|eps|^2 = 256
    assert cond < 256 / 10 and uncond < 256 / 10
    assert tiny_denoiser.history[-1]["loss"] < tiny_denoiser.history[0]["loss"]


def test_training_rejects_width_mismatch(tiny_world):
    images, _ = tiny_world
    with pytest.raises(ValueError):
        dm.train_denoiser(images[:10], np.zeros((10, 8)), dm.cosine_schedule(10), dm.DenoiserConfig(steps=1))


def test_save_load_bit_exact(tmp_path, tiny_denoiser, rng):
    p = dm.save_denoiser(tmp_path / "m.gtfw", tiny_denoiser)
    back = dm.load_denoiser(p)
    assert back.checksum() == tiny_denoiser.checksum()
    x = rng.standard_normal((2, 256))
    np.testing.assert_array_equal(dm._eps(back, x, 9, None), dm._eps(tiny_denoiser, x, 9, None))
    with pytest.raises(ValueError):
        dm.load_denoiser(p, k=4)


# ---------------------------------------------------------------- guidance


def test_cfg_identities(tiny_denoiser, rng):
    m, x, c = tiny_denoiser, rng.standard_normal((3, 256)), rng.standard_normal(16)
    null, cond = dm._eps(m, x, 10, None), dm._eps(m, x, 10, c)
    np.testing.assert_array_equal(dm.cfg_predict(m, x, 10, c, 1.0), cond)
    np.testing.assert_array_equal(dm.cfg_predict(m, x, 10, c, 0.0), null)
    np.testing.assert_array_equal(dm.cfg_predict(m, x, 10, np.zeros(16), 3.0), null)
    e0, e1 = dm.cfg_predict(m, x, 10, c, 0.0), dm.cfg_predict(m, x, 10, c, 1.0)
    for g in (0.3, 2.0, 7.5):
        assert np.max(np.abs(dm.cfg_predict(m, x, 10, c, g) - e0 - g * (e1 - e0))) <= 1e-12
    with pytest.raises(ValueError):
        dm.cfg_predict(m, x, 10, c, -1.0)


# ---------------------------------------------------------------- sampling


def test_sampling_deterministic_and_counts_draws(tiny_denoiser):
    s = tiny_denoiser.schedule
    n1, n2 = dm.SeededNoise(0, range(3)), dm.SeededNoise(0, range(3))
    a = dm.sample(tiny_denoiser, s, n1)
    b = dm.sample(tiny_denoiser, s, n2)
    np.testing.assert_array_equal(a, b)
    assert n1.draws == s.T


def test_runs_are_independent_streams(tiny_denoiser):
    s = tiny_denoiser.schedule
    both = dm.sample(tiny_denoiser, s, dm.SeededNoise(0, [0, 1]))
    one = dm.sample(tiny_denoiser, s, dm.SeededNoise(0, [1]))
    # same stream, different batch shape: equal up to BLAS rounding
    np.testing.assert_allclose(both[1], one[0], rtol=0, atol=1e-9)


def test_identity_hook_changes_nothing(tiny_denoiser):
    s, c = tiny_denoiser.schedule, np.ones(16) * 0.25
    a = dm.sample(tiny_denoiser, s, dm.SeededNoise(3, [0]), c, 1.5)
    b = dm.sample(tiny_denoiser, s, dm.SeededNoise(3, [0]), c, 1.5, hook=lambda x, t, e: e)
    np.testing.assert_array_equal(a, b)


def test_hook_shape_checked(tiny_denoiser):
    with pytest.raises(ad.ShapeError):
        dm.sample(tiny_denoiser, tiny_denoiser.schedule, dm.SeededNoise(0, [0]), hook=lambda x, t, e: e[:, :10])


def test_unconditional_samples_cover_world_ranges(tiny_denoiser):
    imgs = dm.sample(tiny_denoiser, tiny_denoiser.schedule, dm.SeededNoise(5, range(48)))
    est, conf = world.read_attributes_batch(imgs)
    est = est[conf > 0]
    ref = world.read_attributes_batch(world.render(world.sample_styles(np.random.default_rng(5), 48)))[0]
    # coarse check for a 300-step model: sample means within a third of the
    # range of the world means
    assert np.all(np.abs(np.nanmean(est, 0) - ref.mean(0)) < 0.35 * world.SPAN)


# ---------------------------------------------------------------- inversion


def test_inversion_round_trip(tiny_denoiser):
    s = tiny_denoiser.schedule
    x0 = np.vstack([world.render(world.sample_styles(np.random.default_rng(8), 4)), np.full((1, 256), 0.5)])
    rec = dm.invert(tiny_denoiser, s, x0, seed=2)
    out = dm.sample(tiny_denoiser, s, rec.replay())
    assert np.max(np.abs(out - x0)) < 1e-8


def test_inversion_of_generated_image(tiny_denoiser):
    s = tiny_denoiser.schedule
    x0 = dm.sample(tiny_denoiser, s, dm.SeededNoise(1, [0]))
    out = dm.sample(tiny_denoiser, s, dm.invert(tiny_denoiser, s, x0).replay())
    assert np.max(np.abs(out - x0)) < 1e-8


def test_inversion_rejects_bad_shape(tiny_denoiser):
    with pytest.raises(ad.ShapeError):
        dm.invert(tiny_denoiser, tiny_denoiser.schedule, np.zeros(10))


def test_config_dict_round_trip():
    cfg = dm.DenoiserConfig(hidden=32)
    assert dm.DenoiserConfig(**dm.config_dict(cfg)) == cfg
    assert dataclasses.asdict(cfg)["hidden"] == 32
