"""Tests for the outer EM loop: initialization, E/M steps, composition."""

import numpy as np
import pytest

from diffem.channels import CorruptionChannel
from diffem.diffusion import NoiseSchedule
from diffem.em import (
    EMConfig,
    TrainConfig,
    build_model,
    corrupt_batch,
    e_step,
    encode_conditioning,
    gaussian_marginal_loglik,
    init_corrupted_prior,
    init_gaussian_prior,
    m_step,
    run_em,
    train_unconditional,
)
from diffem.rng import stream
from diffem.samplers import SamplerConfig, sample


SCHEDULE = NoiseSchedule(0.01, 10.0)


def make_observations(channel, X, seed):
    rng = stream(seed, "obs")
    return [channel.observe(x, rng) for x in X]


class ExactGaussianDenoiser:
    """Drop-in denoiser computing E[X0 | X_t, Y] for a Gaussian prior
    N(mu, cov) and a fixed linear channel y = A x + sigma_y eps.

    The conditional posterior x | y is N(m_y, C); combined with the VE
    perturbation x_t = x + sigma_t z this gives the exact denoiser
    (C^-1 + I/sigma_t^2)^-1 (C^-1 m_y + x_t / sigma_t^2).
    """

    def __init__(self, mu, cov, A, sigma_y, schedule):
        self.schedule = schedule
        self.ema = None
        self.mu = np.asarray(mu, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.A = np.asarray(A, dtype=np.float64)
        self.sigma_y = float(sigma_y)
        self.dim_x = self.cov.shape[0]
        prec = np.linalg.inv(self.cov)
        self.post_prec = prec + self.A.T @ self.A / self.sigma_y**2
        self.post_cov = np.linalg.inv(self.post_prec)
        self.base = prec @ self.mu

    def posterior_mean(self, y):
        return self.post_cov @ (self.base + self.A.T @ y / self.sigma_y**2)

    def denoise(self, x_t, t, cond=None, use_ema=False):
        sig_sq = self.schedule.sigma_sq(t)
        m = np.stack([self.posterior_mean(y) for y in np.atleast_2d(cond)])
        C = np.linalg.inv(self.post_prec + np.eye(self.dim_x) / sig_sq)
        return (m @ self.post_prec.T + x_t / sig_sq) @ C.T


class TestCorruptBatch:
    def test_mask_shapes_and_statistics(self):
        rng = stream(0, "t")
        ch = CorruptionChannel("mask", dim_x=6, sigma_y=0.0, rho=0.3)
        X = np.ones((4000, 6))
        out = corrupt_batch(ch, X, rng)
        assert out.shape == (4000, 12)
        bits = out[:, 6:]
        assert set(np.unique(bits)) <= {0.0, 1.0}
        # kept fraction is 1 - rho up to 4 sigma binomial error
        frac = bits.mean()
        assert abs(frac - 0.7) < 4 * np.sqrt(0.7 * 0.3 / bits.size)
        # y rows are the masked values when sigma_y = 0
        np.testing.assert_array_equal(out[:, :6], bits)

    def test_sphere_unit_rows(self):
        rng = stream(1, "t")
        ch = CorruptionChannel("sphere", dim_x=5, sigma_y=0.0, rows=2)
        X = rng.standard_normal((50, 5))
        out = corrupt_batch(ch, X, rng)
        assert out.shape == (50, 2 + 10)
        A = out[:, 2:].reshape(50, 2, 5)
        np.testing.assert_allclose(
            np.linalg.norm(A, axis=2), 1.0, atol=1e-12
        )
        np.testing.assert_allclose(
            out[:, :2], np.einsum("nrd,nd->nr", A, X), atol=1e-12
        )

    def test_fixed_channel_exact_when_noiseless(self):
        rng = stream(2, "t")
        A = rng.standard_normal((3, 4))
        ch = CorruptionChannel("fixed", dim_x=4, sigma_y=0.0, matrix=A)
        X = rng.standard_normal((10, 4))
        np.testing.assert_allclose(corrupt_batch(ch, X, rng), X @ A.T)

    def test_noise_level(self):
        rng = stream(3, "t")
        A = np.eye(2)
        ch = CorruptionChannel("fixed", dim_x=2, sigma_y=0.5, matrix=A)
        X = np.zeros((20000, 2))
        out = corrupt_batch(ch, X, rng)
        assert out.std() == pytest.approx(0.5, rel=0.05)

    def test_encode_conditioning_matches_observe(self):
        rng = stream(4, "t")
        ch = CorruptionChannel("mask", dim_x=3, sigma_y=0.1, rho=0.5)
        obs = [ch.observe(rng.standard_normal(3), rng) for _ in range(5)]
        cond = encode_conditioning(obs)
        assert cond.shape == (5, 6)
        np.testing.assert_array_equal(cond[0, :3], obs[0].y)
        np.testing.assert_array_equal(cond[0, 3:], obs[0].desc.encoding())


class TestInitGaussianPrior:
    def test_identity_channel_low_noise_matches_empirical(self):
        rng = stream(10, "data")
        X = rng.standard_normal((2000, 3)) @ np.diag([1.0, 2.0, 0.5]) + 1.0
        ch = CorruptionChannel(
            "fixed", dim_x=3, sigma_y=1e-3, matrix=np.eye(3)
        )
        obs = make_observations(ch, X, 11)
        fit, dataset = init_gaussian_prior(obs, ch, stream(12, "init"))
        ys = np.stack([o.y for o in obs])
        np.testing.assert_allclose(fit.mean, ys.mean(axis=0), atol=1e-2)
        np.testing.assert_allclose(fit.cov, np.cov(ys.T, bias=True), atol=2e-2)
        assert dataset.shape == (2000, 3)
        assert np.all(np.isfinite(dataset))

    def test_one_dim_deconvolution(self):
        # x ~ N(3, 4), y = x + eps with sigma_y = 1: the fitted prior should
        # approach mu_X = mu_Y and Sigma_X = Sigma_Y - 1
        rng = stream(13, "data")
        X = 3.0 + 2.0 * rng.standard_normal((10000, 1))
        ch = CorruptionChannel(
            "fixed", dim_x=1, sigma_y=1.0, matrix=np.eye(1)
        )
        obs = make_observations(ch, X, 14)
        fit, _ = init_gaussian_prior(obs, ch, stream(15, "init"))
        assert fit.mean[0] == pytest.approx(3.0, abs=0.1)
        assert fit.cov[0, 0] == pytest.approx(4.0, abs=0.3)

    def test_loglik_weakly_increases(self):
        rng = stream(16, "data")
        X = rng.standard_normal((200, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        ch = CorruptionChannel(
            "fixed", dim_x=2, sigma_y=0.5,
            matrix=np.array([[1.0, 0.2], [0.1, 0.9]]),
        )
        obs = make_observations(ch, X, 17)
        lls = []
        for k in range(1, 7):
            fit, _ = init_gaussian_prior(
                obs, ch, stream(18, "init"), iterations=k
            )
            lls.append(
                gaussian_marginal_loglik(obs, fit.mean, fit.cov, ch.sigma_y)
            )
        diffs = np.diff(lls)
        assert np.all(diffs >= -1e-8)

    def test_requires_positive_sigma_y(self):
        ch = CorruptionChannel("fixed", dim_x=2, sigma_y=0.0, matrix=np.eye(2))
        obs = make_observations(ch, np.zeros((3, 2)), 19)
        with pytest.raises(ValueError, match="sigma_y"):
            init_gaussian_prior(obs, ch, stream(20, "init"))


class TestInitCorruptedPrior:
    def test_identity_noiseless_equals_clean(self):
        rng = stream(21, "data")
        X = rng.standard_normal((8, 3))
        ch = CorruptionChannel("fixed", dim_x=3, sigma_y=0.0, matrix=np.eye(3))
        obs = make_observations(ch, X, 22)
        np.testing.assert_allclose(init_corrupted_prior(obs, ch), X)

    def test_dimension_mismatch_rejected(self):
        ch = CorruptionChannel("sphere", dim_x=5, sigma_y=0.1, rows=2)
        obs = make_observations(ch, np.zeros((3, 5)), 23)
        with pytest.raises(ValueError, match="dim_y == dim_x"):
            init_corrupted_prior(obs, ch)


class TestEStep:
    def test_conjugate_oracle_posterior_mean(self):
        # exact denoiser wired in: reconstruction mean must match the
        # average analytic posterior mean up to Monte Carlo error
        mu = np.array([1.0, -0.5])
        cov = np.array([[1.0, 0.3], [0.3, 0.8]])
        A = np.array([[1.0, 0.5]])
        sigma_y = 0.7
        ch = CorruptionChannel("fixed", dim_x=2, sigma_y=sigma_y, matrix=A)
        rng = stream(30, "data")
        X = rng.multivariate_normal(mu, cov, size=400)
        obs = make_observations(ch, X, 31)
        model = ExactGaussianDenoiser(mu, cov, A, sigma_y, SCHEDULE)
        cfg = SamplerConfig(kind="euler", steps=128)
        recon = e_step(model, obs, cfg, master=32, iteration=0)
        assert recon.shape == (400, 2)
        target = np.stack([model.posterior_mean(o.y) for o in obs]).mean(axis=0)
        sd = np.sqrt(np.diag(model.post_cov) / 400)
        assert np.all(np.abs(recon.mean(axis=0) - target) < 4 * sd + 0.05)

    def test_deterministic(self):
        mu = np.zeros(2)
        cov = np.eye(2)
        A = np.eye(2)
        ch = CorruptionChannel("fixed", dim_x=2, sigma_y=0.5, matrix=A)
        obs = make_observations(ch, np.zeros((5, 2)), 33)
        model = ExactGaussianDenoiser(mu, cov, A, 0.5, SCHEDULE)
        cfg = SamplerConfig(kind="euler", steps=32)
        r1 = e_step(model, obs, cfg, master=34, iteration=1)
        r2 = e_step(model, obs, cfg, master=34, iteration=1)
        np.testing.assert_array_equal(r1, r2)
        r3 = e_step(model, obs, cfg, master=34, iteration=2)
        assert not np.array_equal(r1, r3)

    def test_single_observation(self):
        A = np.eye(2)
        ch = CorruptionChannel("fixed", dim_x=2, sigma_y=0.5, matrix=A)
        obs = make_observations(ch, np.zeros((1, 2)), 35)
        model = ExactGaussianDenoiser(np.zeros(2), np.eye(2), A, 0.5, SCHEDULE)
        recon = e_step(model, obs, SamplerConfig(steps=16), master=36, iteration=0)
        assert recon.shape == (1, 2)


class TestMStep:
    def setup_method(self):
        self.ch = CorruptionChannel(
            "fixed", dim_x=2, sigma_y=0.3, matrix=np.eye(2)
        )
        self.model = build_model(self.ch, SCHEDULE, (16,), stream(40, "m"))
        rng = stream(41, "data")
        self.data = rng.standard_normal((128, 2)) + np.array([2.0, -1.0])
        self.cfg = TrainConfig(epochs=20, batch_size=64, lr_init=3e-3)

    def test_loss_descends(self):
        _, losses = m_step(self.data, self.ch, self.model, self.cfg, 42, 0)
        tenth = max(1, len(losses) // 10)
        assert losses[-tenth:].mean() <= losses[:tenth].mean()

    def test_cold_start_differs_from_warm(self):
        warm, _ = m_step(self.data, self.ch, self.model, self.cfg, 43, 0)
        cold, _ = m_step(
            self.data, self.ch, self.model,
            TrainConfig(epochs=20, batch_size=64, lr_init=3e-3, warm=False),
            43, 0,
        )
        assert not np.array_equal(warm.params["w_out"], cold.params["w_out"])

    def test_deterministic(self):
        a, la = m_step(self.data, self.ch, self.model, self.cfg, 44, 0)
        b, lb = m_step(self.data, self.ch, self.model, self.cfg, 44, 0)
        np.testing.assert_array_equal(la, lb)
        for k in a.params.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_does_not_mutate_input_model(self):
        before = self.model.params["w_out"].copy()
        m_step(self.data, self.ch, self.model, self.cfg, 45, 0)
        np.testing.assert_array_equal(self.model.params["w_out"], before)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            m_step(np.empty((0, 2)), self.ch, self.model, self.cfg, 46, 0)

    def test_ema_tracked_when_enabled(self):
        cfg = TrainConfig(epochs=2, batch_size=64, ema_decay=0.99)
        out, _ = m_step(self.data, self.ch, self.model, cfg, 47, 0)
        assert out.ema is not None
        assert not np.array_equal(out.ema["w_out"], out.params["w_out"])


class TestRunEm:
    def _setup(self):
        ch = CorruptionChannel(
            "fixed", dim_x=2, sigma_y=0.5, matrix=np.eye(2)
        )
        rng = stream(50, "data")
        X = rng.standard_normal((96, 2)) + 1.0
        obs = make_observations(ch, X, 51)
        train = TrainConfig(epochs=4, batch_size=32)
        cfg = EMConfig(
            iterations=1, sampler=SamplerConfig(kind="euler", steps=16),
            train=train,
        )
        return ch, obs, cfg

    def test_k1_equals_manual_composition(self):
        from dataclasses import replace

        ch, obs, cfg = self._setup()
        master = 52
        state = run_em(obs, ch, cfg, SCHEDULE, (16,), master)

        _, dataset = init_gaussian_prior(
            obs, ch, stream(master, "init"),
            iterations=cfg.gaussian_init_iters,
        )
        model = build_model(ch, SCHEDULE, (16,), stream(master, "model-init"))
        model, _ = m_step(
            dataset, ch, model, replace(cfg.train, warm=False), master, -1
        )
        recon = e_step(
            model, obs, cfg.sampler, master, 0,
            init_mean=dataset.mean(axis=0),
        )
        model, _ = m_step(recon, ch, model, cfg.train, master, 0)

        np.testing.assert_array_equal(state.dataset, recon)
        for k in model.params.params:
            np.testing.assert_array_equal(state.model.params[k], model.params[k])

    def test_history_and_callbacks(self):
        ch, obs, cfg = self._setup()
        from dataclasses import replace

        cfg = replace(cfg, iterations=2)
        seen = []
        state = run_em(
            obs, ch, cfg, SCHEDULE, (16,), 53,
            metric_fn=lambda k, d: {"mean0": float(d.mean())},
            callback=lambda s, r: seen.append(r["iteration"]),
        )
        assert [r["iteration"] for r in state.history] == [0, 1, 2]
        assert state.history[0]["phase"] == "init"
        assert all("mean0" in r for r in state.history[1:])
        assert seen == [0, 1, 2]

    def test_fresh_samples_needs_sampler(self):
        ch, obs, cfg = self._setup()
        from dataclasses import replace

        with pytest.raises(ValueError, match="sampler"):
            run_em(obs, ch, replace(cfg, fresh_samples=True),
                   SCHEDULE, (16,), 54)

    def test_dataset_aligned_with_observations(self):
        ch, obs, cfg = self._setup()
        state = run_em(obs, ch, cfg, SCHEDULE, (16,), 55)
        assert state.dataset.shape == (len(obs), ch.dim_x)


class TestTrainUnconditional:
    def test_point_mass_concentrates(self):
        ch = CorruptionChannel(
            "fixed", dim_x=2, sigma_y=0.1, matrix=np.eye(2)
        )
        point = np.array([0.5, -1.5])
        data = np.tile(point, (256, 1))
        proto = build_model(ch, SCHEDULE, (32, 32), stream(60, "m"))
        cfg = TrainConfig(epochs=60, batch_size=128, lr_init=3e-3)
        model = train_unconditional(data, proto, cfg, 61)
        out = sample(
            model, None, SamplerConfig(kind="euler", steps=128),
            stream(62, "s"), n=500,
        )
        assert np.allclose(out.mean(axis=0), point, atol=0.3)
        assert out.var(axis=0).max() < 10 * SCHEDULE.sigma0

    def test_deterministic(self):
        ch = CorruptionChannel("fixed", dim_x=1, sigma_y=0.1, matrix=np.eye(1))
        data = stream(63, "d").standard_normal((64, 1))
        proto = build_model(ch, SCHEDULE, (8,), stream(64, "m"))
        cfg = TrainConfig(epochs=2, batch_size=32)
        a = train_unconditional(data, proto, cfg, 65)
        b = train_unconditional(data, proto, cfg, 65)
        for k in a.params.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
