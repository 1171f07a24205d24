"""Noise schedule, forward marginal statistics, capped-SNR weighting,
reverse sampling, conditioning, and training oracles for the DDPM stage."""

import numpy as np
import pytest

from diar.autodiff import grad_check, make_rng
from diar.diffusion import (
    Denoiser,
    DiffusionConfig,
    LatentDiffusion,
    NoiseSchedule,
    diffusion_loss_given,
    forward_diffuse,
    min_snr_weight,
    reverse_sample,
    train_denoiser_on_pairs,
)


def small_cfg(**kw):
    base = dict(steps=20, latent_dim=4, obs_dim=4, embed_dim=8, seed=0)
    base.update(kw)
    return DiffusionConfig(**base)


def const_model(c: np.ndarray, steps: int = 20) -> LatentDiffusion:
    """Denoiser hard-wired to output the constant vector c."""
    cfg = small_cfg(steps=steps, latent_dim=len(c))
    den = Denoiser(cfg)
    for p in den.params().values():
        p.data[:] = 0.0
    den.head.b.data[:] = np.asarray(c)
    return LatentDiffusion(
        denoiser=den,
        sched=NoiseSchedule.linear(steps),
        z_mean=np.zeros(len(c)),
        z_std=np.ones(len(c)),
        cfg=cfg,
    )


# -- schedule -----------------------------------------------------------------


@pytest.mark.parametrize("steps", [100, 500])
def test_schedule_invariants(steps):
    s = NoiseSchedule.linear(steps)
    assert s.alpha_bars[0] == 1.0
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert ((s.betas > 0) & (s.betas < 1)).all()
    assert s.alpha_bars[-1] < 0.05  # signal mostly destroyed at T


def test_schedule_canonical_endpoints_at_500():
    s = NoiseSchedule.linear(500)
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(2e-2)


def test_schedule_rejects_bad_steps():
    with pytest.raises(ValueError):
        NoiseSchedule.linear(0)


# -- forward process ----------------------------------------------------------


def test_forward_diffuse_j0_identity():
    sched = NoiseSchedule.linear(20)
    z0 = make_rng(1).normal(size=(5, 4))
    eps = make_rng(2).normal(size=(5, 4))
    np.testing.assert_array_equal(forward_diffuse(z0, 0, eps, sched), z0)


def test_forward_diffuse_out_of_range():
    sched = NoiseSchedule.linear(20)
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros((1, 4)), 21, np.zeros((1, 4)), sched)


@pytest.mark.parametrize("j_kind", ["first", "mid", "last"])
def test_forward_marginal_moments_monte_carlo(j_kind):
    sched = NoiseSchedule.linear(50)
    j = {"first": 1, "mid": 25, "last": 50}[j_kind]
    n = 10_000
    z0 = np.full((n, 1), 1.3)
    eps = make_rng(3, j).standard_normal((n, 1))
    zj = forward_diffuse(z0, j, eps, sched)
    ab = sched.alpha_bars[j]
    mean_se = np.sqrt((1 - ab) / n)
    assert abs(zj.mean() - np.sqrt(ab) * 1.3) < 3 * mean_se
    var = zj.var()
    var_se = (1 - ab) * np.sqrt(2.0 / (n - 1))
    assert abs(var - (1 - ab)) < 3 * var_se


# -- capped SNR weight ---------------------------------------------------------


def test_min_snr_weight_examples_and_bounds():
    sched = NoiseSchedule(
        betas=np.array([0.1, 0.1]), alpha_bars=np.array([1.0, 0.9, 0.81])
    )
    snr1 = sched.snr(1)
    assert snr1 == pytest.approx(9.0)
    assert min_snr_weight(sched, 1, 5.0) == pytest.approx(5.0 / 9.0)
    real = NoiseSchedule.linear(100)
    w = min_snr_weight(real, np.arange(1, 101), 5.0)
    assert ((w > 0) & (w <= 1.0)).all()
    low_snr = real.snr(np.arange(1, 101)) <= 5.0
    np.testing.assert_array_equal(w[low_snr], 1.0)


# -- losses --------------------------------------------------------------------


def test_loss_zero_when_denoiser_exact():
    c = np.array([0.3, -1.0, 0.5, 2.0])
    model = const_model(c)
    z0 = np.tile(c, (6, 1))
    obs = make_rng(4).normal(size=(6, 4))
    j = np.arange(1, 7)
    eps = make_rng(5).standard_normal(z0.shape)
    drop = np.zeros(6, bool)
    loss = diffusion_loss_given(model.denoiser, model.sched, obs, z0, j, eps, drop, 5.0)
    assert loss.data == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_matches_finite_differences(seed):
    rng = make_rng(seed, 50)
    cfg = small_cfg(latent_dim=2, embed_dim=4, seed=seed)
    den = Denoiser(cfg)
    sched = NoiseSchedule.linear(cfg.steps)
    n = int(rng.integers(1, 3))
    obs = rng.normal(size=(n, 4))
    z0 = rng.normal(size=(n, 2))
    j = rng.integers(1, cfg.steps + 1, n)
    eps = rng.standard_normal((n, 2))
    drop = rng.random(n) < 0.5

    def f():
        return diffusion_loss_given(den, sched, obs, z0, j, eps, drop, 5.0)

    assert grad_check(f, den.params()) < 1e-4


# -- reverse sampling ----------------------------------------------------------


def test_single_step_schedule_returns_model_output():
    c = np.array([1.0, -2.0, 0.25])
    model = const_model(c, steps=1)
    out = model.sample(np.zeros(4), 3, make_rng(6))
    np.testing.assert_allclose(out, np.tile(c, (3, 1)), atol=1e-12)


def test_constant_denoiser_collapses_to_constant():
    c = np.array([0.7, -0.4, 1.2, 0.0])
    model = const_model(c, steps=20)
    out = model.sample(np.zeros(4), 8, make_rng(7))
    np.testing.assert_allclose(out, np.tile(c, (8, 1)), atol=1e-6)


def test_sampling_deterministic_given_rng():
    model = const_model(np.array([0.1, 0.2]), steps=5)
    a = model.sample(np.ones(4), 4, make_rng(8))
    b = model.sample(np.ones(4), 4, make_rng(8))
    np.testing.assert_array_equal(a, b)
    assert reverse_sample(np.ones(4), 1, model, make_rng(9)).shape == (1, 2)


def test_sample_requires_positive_count():
    model = const_model(np.array([0.0]), steps=3)
    with pytest.raises(ValueError):
        model.sample(np.zeros(4), 0, make_rng(10))


# -- training oracles ----------------------------------------------------------


def _two_cluster_data(n=2048, latent=8, seed=5):
    rng = make_rng(seed)
    states = np.zeros((n, 4))
    states[:, 0] = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    z0 = np.where(states[:, 0:1] < 0, -2.0, 2.0) * np.ones((n, latent))
    return states, z0


@pytest.fixture(scope="module")
def cluster_model():
    states, z0 = _two_cluster_data()
    cfg = DiffusionConfig(steps=50, latent_dim=8, epochs=25, lr=3e-4, batch=128, seed=1)
    model, history = train_denoiser_on_pairs(states, z0, cfg)
    return model, history


def test_training_loss_decreases(cluster_model):
    _, history = cluster_model
    assert history[-1]["loss"] <= 0.5 * history[0]["loss"]


def test_conditional_samples_recover_clusters(cluster_model):
    model, _ = cluster_model
    rng = make_rng(20)
    for sign in (-1.0, 1.0):
        obs = np.zeros(4)
        obs[0] = sign
        zs = model.sample(obs, 200, rng)
        frac = np.mean(np.abs(zs.mean(axis=1) - 2.0 * sign) < 0.5)
        assert frac >= 0.95


def test_zero_epochs_returns_init():
    states, z0 = _two_cluster_data(n=64)
    cfg = small_cfg(latent_dim=8, epochs=0)
    model, history = train_denoiser_on_pairs(states, z0, cfg)
    fresh = Denoiser(cfg)
    for (k, a), (_, b) in zip(model.denoiser.params().items(), fresh.params().items()):
        np.testing.assert_array_equal(a.data, b.data)
    assert history == []


def test_full_condition_dropout_makes_sampler_state_blind():
    """With drop_prob=1 the conditioning path never trains (zero-initialized
    projection stays zero), so samples are bitwise identical across states."""
    states, z0 = _two_cluster_data(n=512)
    cfg = DiffusionConfig(steps=20, latent_dim=8, epochs=5, lr=3e-4, drop_prob=1.0, seed=2)
    model, _ = train_denoiser_on_pairs(states, z0, cfg)
    s_neg, s_pos = np.zeros(4), np.zeros(4)
    s_neg[0], s_pos[0] = -1.0, 1.0
    a = model.sample(s_neg, 16, make_rng(21))
    b = model.sample(s_pos, 16, make_rng(21))
    np.testing.assert_array_equal(a, b)


def test_guidance_direction_shifts_toward_condition(cluster_model):
    """Positive guidance exaggerates the conditional prediction."""
    model, _ = cluster_model
    obs = np.zeros(4)
    obs[0] = 1.0
    plain = model.sample(obs, 64, make_rng(22)).mean()
    guided = model.sample(obs, 64, make_rng(22), guidance_w=1.0).mean()
    assert guided >= plain - 0.25  # guided stays at least as committed
