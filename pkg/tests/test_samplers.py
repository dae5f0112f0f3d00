import numpy as np
import pytest

from diffem.diffusion import NoiseSchedule
from diffem.metrics import gaussian_frechet
from diffem.oracle import Gaussian, GaussianPosteriorModel, GaussianScoreModel
from diffem.rng import RowStreams, stream
from diffem.samplers import (
    SamplerConfig,
    SamplerDivergence,
    sample,
    sample_ancestral,
    sample_reverse_euler,
    sample_reverse_pc,
)

SCHED = NoiseSchedule(1e-3, 10.0)


def gaussian_oracle(mean, cov):
    return GaussianScoreModel(Gaussian(mean, cov), SCHED)


@pytest.fixture
def rng():
    return np.random.default_rng(13)


@pytest.mark.parametrize("kind", ["euler", "pc", "ancestral"])
def test_samplers_recover_gaussian_target(kind):
    mean = np.array([1.5, -0.5])
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    model = gaussian_oracle(mean, cov)
    cfg = SamplerConfig(kind=kind, steps=256)
    x = sample(model, None, cfg, stream(2, f"samp-{kind}"), n=4000)
    target = np.random.default_rng(0).multivariate_normal(mean, cov, 20000)
    assert gaussian_frechet(x, target) < 0.05


def test_euler_equals_pc_with_zero_correctors():
    model = gaussian_oracle(np.zeros(2), np.eye(2))
    a = sample_reverse_euler(model, None, 64, stream(4, "bit"), n=16)
    b = sample_reverse_pc(model, None, 64, stream(4, "bit"), n=16,
                          corrector_steps=0)
    assert np.array_equal(a, b)


def test_sampling_is_reproducible():
    model = gaussian_oracle(np.zeros(3), np.eye(3))
    cfg = SamplerConfig(kind="pc", steps=32)
    a = sample(model, None, cfg, stream(7, "r"), n=8)
    b = sample(model, None, cfg, stream(7, "r"), n=8)
    assert np.array_equal(a, b)


def test_row_streams_make_items_batch_independent():
    model = gaussian_oracle(np.zeros(2), np.eye(2))
    cfg = SamplerConfig(kind="euler", steps=16)
    full = sample(model, None, cfg, RowStreams(5, "b", range(8)), n=8)
    part = sample(model, None, cfg, RowStreams(5, "b", [3, 6]), n=2)
    assert np.array_equal(part[0], full[3])
    assert np.array_equal(part[1], full[6])


def test_conditional_posterior_sampling(rng):
    # prior N(0, I2), observe y = A x + noise; samples should match the
    # closed-form posterior moments
    A = np.array([[1.0, 0.0]])
    sigma_y = 0.5
    prior = Gaussian(np.zeros(2), np.eye(2))
    model = GaussianPosteriorModel(prior, A, sigma_y, SCHED)
    y = np.array([2.0])
    cond = np.repeat(y[None, :], 6000, axis=0)
    cfg = SamplerConfig(kind="pc", steps=256)
    x = sample(model, cond, cfg, stream(11, "cond"))
    C = np.linalg.inv(np.eye(2) + A.T @ A / sigma_y**2)
    m = C @ (A.T @ y / sigma_y**2)
    assert np.max(np.abs(x.mean(axis=0) - m)) < 0.05
    assert np.max(np.abs(np.cov(x.T) - C)) < 0.05


def test_mean_shift_initialization_centers_start():
    model = gaussian_oracle(np.full(2, 5.0), np.eye(2))
    cfg = SamplerConfig(kind="pc", steps=128)
    shifted = sample(model, None, cfg, stream(3, "ms"), n=2000,
                     init_mean=np.full(2, 5.0))
    assert np.max(np.abs(shifted.mean(axis=0) - 5.0)) < 0.2


def test_divergence_detection():
    class ExplodingModel:
        schedule = SCHED
        dim_x = 2

        def denoise(self, x_t, t, cond=None, use_ema=False):
            out = np.full_like(np.atleast_2d(x_t), np.nan)
            return out

    with pytest.raises(SamplerDivergence) as exc:
        sample_reverse_euler(ExplodingModel(), None, 8, stream(0, "div"), n=3)
    assert sorted(exc.value.rows) == [0, 1, 2]


def test_corrector_skips_zero_score_rows():
    class ZeroScoreModel:
        schedule = SCHED
        dim_x = 2

        def denoise(self, x_t, t, cond=None, use_ema=False):
            return np.atleast_2d(x_t)  # score identically zero

    x = sample_reverse_pc(ZeroScoreModel(), None, 8, stream(0, "zs"), n=4,
                          corrector_steps=2, readout="raw")
    assert np.all(np.isfinite(x))


def test_ancestral_raw_state_has_small_terminal_noise():
    model = gaussian_oracle(np.zeros(1), np.array([[1e-8]]))
    x = sample_ancestral(model, None, 256, stream(9, "anc"), n=2000)
    # essentially a point mass; residual spread is terminal-noise scale
    assert np.std(x) < 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="nope")
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(kind="pc", snr=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(readout="huh")


def test_unconditional_requires_n():
    model = gaussian_oracle(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        sample_reverse_euler(model, None, 8, stream(0, "n"))
