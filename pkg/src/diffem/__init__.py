"""DiffEM: diffusion models learned from corrupted observations via EM,
with exact-arithmetic oracles for the supporting convergence theory."""

from .autodiff import Tape
from .channels import (
    CorruptionChannel,
    MatrixDescriptor,
    Observation,
    blur_matrix,
    channel_log_likelihood,
)
from .diffusion import (
    DenoiserArch,
    DenoiserModel,
    LossWeighting,
    NoiseSchedule,
    init_mlp_params,
    score_from_denoiser,
    sm_loss_batch,
)
from .em import (
    EMConfig,
    EMState,
    TrainConfig,
    build_model,
    e_step,
    init_corrupted_prior,
    init_gaussian_prior,
    m_step,
    run_em,
    train_unconditional,
)
from .manifold import curve, generate_manifold_dataset, manifold_channel
from .metrics import (
    gaussian_frechet,
    mse,
    psnr,
    richardson_lucy,
    sinkhorn_divergence,
)
from .optim import ParamStore, adam_step, ema_update, global_norm
from .oracle import (
    DiscreteModel,
    Gaussian,
    GaussianLinearModel,
    GaussianPosteriorModel,
    GaussianScoreModel,
    discrete_em_step,
    estimate_kappa,
    gaussian_em_step,
    kl_discrete,
    kl_gaussian,
    mixture_posterior_mean,
    run_perturbed_em,
    theory_suite,
    verify_lemma1,
    verify_prop1,
    verify_prop2,
    verify_prop3_lemma3,
)
from .rng import RowStreams, stream, stream_seed
from .samplers import SamplerConfig, SamplerDivergence, sample

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
