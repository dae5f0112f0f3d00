"""The outer EM loop: initialization, E-step reconstruction sampling,
M-step conditional score-matching training, and the final unconditional
prior training.

Every random draw is keyed by (master seed, purpose tag, iteration/item
index), so runs are reproducible and resumable regardless of batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .channels import CorruptionChannel, Observation
from .diffusion import (
    DenoiserArch,
    DenoiserModel,
    LossWeighting,
    NoiseSchedule,
    init_mlp_params,
    sm_loss_batch,
)
from .optim import adam_step, ema_update
from .oracle import Gaussian
from .rng import RowStreams, stream
from .samplers import SamplerConfig, SamplerDivergence, sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    clip_norm: float = 1.0
    alpha: float = 3.0
    beta: float = 3.0
    ema_decay: float = 0.0  # 0 disables EMA
    warm: bool = True

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.lr_init <= 0:
            raise ValueError("training hyperparameters must be positive")

    @property
    def weighting(self) -> LossWeighting:
        return LossWeighting(self.alpha, self.beta)


@dataclass(frozen=True)
class EMConfig:
    iterations: int = 8
    init: str = "gaussian-prior"  # gaussian-prior | corrupted-prior | warm-start
    fresh_samples: bool = False
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gaussian_init_iters: int = 16
    mean_shift_init: bool = True  # shift reverse-time init by the dataset mean

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.init not in ("gaussian-prior", "corrupted-prior", "warm-start"):
            raise ValueError(f"unknown init strategy '{self.init}'")


@dataclass
class EMState:
    iteration: int
    model: DenoiserModel
    dataset: np.ndarray
    history: list = field(default_factory=list)


def encode_conditioning(observations) -> np.ndarray:
    """Stack (y, A-encoding) rows for a list of Observations."""
    return np.stack(
        [np.concatenate([o.y, o.desc.encoding()]) for o in observations]
    )


def corrupt_batch(channel: CorruptionChannel, X: np.ndarray, rng) -> np.ndarray:
    """Fresh Y ~ Q(.|X) for a whole batch, returned as conditioning rows."""
    n, d = X.shape
    if channel.kind == "mask":
        bits = (rng.random((n, d)) >= channel.rho).astype(np.float64)
        y = bits * X
        if channel.sigma_y > 0:
            y = y + channel.sigma_y * rng.standard_normal(y.shape)
        return np.concatenate([y, bits], axis=1)
    if channel.kind == "sphere":
        A = rng.standard_normal((n, channel.rows, d))
        A /= np.linalg.norm(A, axis=2, keepdims=True)
        y = np.einsum("nrd,nd->nr", A, X)
        if channel.sigma_y > 0:
            y = y + channel.sigma_y * rng.standard_normal(y.shape)
        return np.concatenate([y, A.reshape(n, -1)], axis=1)
    # constant-matrix channels (blur, fixed): no per-item encoding
    A = channel.constant_matrix()
    y = X @ A.T
    if channel.sigma_y > 0:
        y = y + channel.sigma_y * rng.standard_normal(y.shape)
    return y


def build_model(channel: CorruptionChannel, schedule: NoiseSchedule,
                hidden: tuple[int, ...], rng,
                embed_width: int = 16) -> DenoiserModel:
    arch = DenoiserArch(
        dim_x=channel.dim_x, dim_y=channel.dim_y,
        desc_width=channel.desc_width, hidden=hidden,
        embed_width=embed_width,
    )
    return DenoiserModel(
        arch=arch, schedule=schedule, params=init_mlp_params(arch, rng)
    )


# ---------------------------------------------------------------------------
# initialization strategies


def _dense_matrices(observations):
    return [o.desc.as_dense() for o in observations]


def gaussian_marginal_loglik(observations, mu, cov, sigma_y) -> float:
    """Observed-data log-likelihood sum_i log N(y_i; A_i mu, A_i cov A_i^T + s^2 I)."""
    total = 0.0
    for obs, A in zip(observations, _dense_matrices(observations)):
        m = A @ mu
        S = A @ cov @ A.T + sigma_y**2 * np.eye(A.shape[0])
        resid = obs.y - m
        chol = np.linalg.cholesky(S)
        alpha = np.linalg.solve(chol, resid)
        total += -0.5 * (
            alpha @ alpha
            + 2.0 * np.sum(np.log(np.diag(chol)))
            + len(resid) * np.log(2 * np.pi)
        )
    return float(total)


def init_gaussian_prior(observations, channel: CorruptionChannel, rng,
                        iterations: int = 16):
    """Fit N(mu, Sigma) to the observations by closed-form EM, then draw one
    posterior sample per observation as the initial dataset."""
    if channel.sigma_y <= 0:
        raise ValueError(
            "Gaussian-prior initialization needs sigma_y > 0; "
            "apply a small sigma_y floor to the channel"
        )
    d = channel.dim_x
    mats = _dense_matrices(observations)
    ys = [o.y for o in observations]
    mu = np.zeros(d)
    cov = np.eye(d)
    inv_var = 1.0 / channel.sigma_y**2
    constant_A = channel.kind in ("blur", "fixed")
    for _ in range(iterations):
        prec = np.linalg.inv(cov)
        prec_mu = prec @ mu
        if constant_A:
            ata = mats[0].T @ mats[0]
            C = np.linalg.inv(prec + inv_var * ata)
            means = [C @ (prec_mu + inv_var * mats[0].T @ y) for y in ys]
            covs = [C] * len(ys)
        else:
            means, covs = [], []
            for A, y in zip(mats, ys):
                C = np.linalg.inv(prec + inv_var * A.T @ A)
                covs.append(C)
                means.append(C @ (prec_mu + inv_var * A.T @ y))
        means_arr = np.stack(means)
        mu = means_arr.mean(axis=0)
        centered = means_arr - mu
        cov = sum(covs) / len(covs) + centered.T @ centered / len(covs)
    # one posterior sample per observation
    dataset = np.empty((len(observations), d))
    for i, (m, C) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(C + 1e-12 * np.eye(d))
        dataset[i] = m + chol @ rng.standard_normal(d)
    return Gaussian(mu, cov), dataset


def init_corrupted_prior(observations, channel: CorruptionChannel) -> np.ndarray:
    """Initial dataset X' = y verbatim; valid only when dim_y == dim_x."""
    if channel.dim_y != channel.dim_x:
        raise ValueError(
            "corrupted-prior initialization requires dim_y == dim_x"
        )
    return np.stack([o.y for o in observations])


# ---------------------------------------------------------------------------
# E and M steps


def e_step(model: DenoiserModel, observations, sampler_cfg: SamplerConfig,
           master: int, iteration: int, init_mean=None) -> np.ndarray:
    """One reconstruction per observation, per-item random streams.

    A diverged item is retried once with a fresh stream before failing.
    """
    n = len(observations)
    cond = encode_conditioning(observations)
    streams = RowStreams(master, f"estep{iteration}", range(n))
    try:
        return sample(
            model, cond, sampler_cfg, streams, init_mean=init_mean,
            use_ema=model.ema is not None,
        )
    except SamplerDivergence as exc:
        rows = exc.rows
        retry_streams = RowStreams(master, f"estep{iteration}-retry", rows)
        retried = sample(
            model, cond[rows], sampler_cfg, retry_streams,
            init_mean=init_mean, use_ema=model.ema is not None,
        )
        # items outside the diverged set must be recomputed without the bad rows
        keep = [i for i in range(n) if i not in set(rows)]
        keep_streams = RowStreams(master, f"estep{iteration}", keep)
        kept = sample(
            model, cond[keep], sampler_cfg, keep_streams,
            init_mean=init_mean, use_ema=model.ema is not None,
        )
        out = np.empty((n, model.dim_x))
        out[keep] = kept
        out[rows] = retried
        return out


def m_step(dataset: np.ndarray, channel: CorruptionChannel,
           model: DenoiserModel, cfg: TrainConfig, master: int,
           iteration: int):
    """Train the conditional denoiser on the reconstructed dataset.

    Corruption is resampled every time an example is visited.  Returns the
    updated model and the per-step training losses.
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    n = dataset.shape[0]
    if n == 0:
        raise ValueError("empty reconstruction dataset")
    if cfg.warm:
        params = model.params.clone()
        ema = model.ema.clone() if model.ema is not None else None
    else:
        params = init_mlp_params(model.arch, stream(master, f"minit{iteration}"))
        ema = None
    work = replace(model, params=params, ema=ema, conditional=True)
    rng = stream(master, f"mstep{iteration}")
    batches_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    losses = np.empty(total_steps)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            x0 = dataset[idx]
            cond = corrupt_batch(channel, x0, rng)
            loss, grads = sm_loss_batch(work, cfg.weighting, x0, cond, rng)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at step {step} (batch of {len(idx)})"
                )
            frac = step / max(1, total_steps - 1)
            lr = cfg.lr_init + frac * (cfg.lr_final - cfg.lr_init)
            work.params = adam_step(work.params, grads, lr, cfg.clip_norm)
            if cfg.ema_decay > 0:
                if work.ema is None:
                    work.ema = work.params.clone()
                else:
                    work.ema = ema_update(work.ema, work.params, cfg.ema_decay)
            losses[step] = loss
            step += 1
    return work, losses[:step]


def train_unconditional(dataset: np.ndarray, model: DenoiserModel,
                        cfg: TrainConfig, master: int,
                        tag: str = "uncond") -> DenoiserModel:
    """Train a fresh unconditional model (conditioning slots zeroed) on the
    reconstructed dataset, with the same loss machinery."""
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    n = dataset.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    params = init_mlp_params(model.arch, stream(master, f"{tag}-init"))
    work = replace(model, params=params, ema=None, conditional=False)
    rng = stream(master, f"{tag}-train")
    batches_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            loss, grads = sm_loss_batch(work, cfg.weighting, dataset[idx], None, rng)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            frac = step / max(1, total_steps - 1)
            lr = cfg.lr_init + frac * (cfg.lr_final - cfg.lr_init)
            work.params = adam_step(work.params, grads, lr, cfg.clip_norm)
            if cfg.ema_decay > 0:
                work.ema = (
                    work.params.clone() if work.ema is None
                    else ema_update(work.ema, work.params, cfg.ema_decay)
                )
            step += 1
    return work


# ---------------------------------------------------------------------------
# the outer loop


def run_em(observations, channel: CorruptionChannel, config: EMConfig,
           schedule: NoiseSchedule, hidden: tuple[int, ...], master: int,
           observation_sampler=None, metric_fn=None, callback=None,
           initial_model: DenoiserModel | None = None,
           initial_dataset: np.ndarray | None = None,
           initial_mean: np.ndarray | None = None,
           start_iteration: int = 0) -> EMState:
    """Run initialization plus K alternating E/M steps.

    observation_sampler(k) -> list[Observation] supplies fresh observations
    per iteration when config.fresh_samples is set.  metric_fn(k, dataset)
    -> dict is evaluated on each reconstruction dataset; callback(state)
    fires after each iteration (checkpoint persistence hooks in here).
    Passing initial_model/initial_dataset with start_iteration resumes a
    run mid-trajectory; initial_mean overrides the reverse-time
    initialization mean for the first resumed E-step (checkpoints carry it
    at full precision, dataset files do not).
    """
    if config.fresh_samples and observation_sampler is None:
        raise ValueError("fresh_samples mode needs an observation sampler")
    history = []

    if initial_model is not None:
        model = initial_model
        dataset = initial_dataset
    else:
        if config.init == "gaussian-prior":
            _, dataset = init_gaussian_prior(
                observations, channel, stream(master, "init"),
                iterations=config.gaussian_init_iters,
            )
        elif config.init == "corrupted-prior":
            dataset = init_corrupted_prior(observations, channel)
        else:
            raise ValueError(
                "warm-start init needs an explicit initial_model"
            )
        model = build_model(
            channel, schedule, hidden, stream(master, "model-init")
        )
        model, init_losses = m_step(
            dataset, channel, model,
            replace(config.train, warm=False), master, iteration=-1,
        )
        state = EMState(iteration=0, model=model, dataset=dataset, history=history)
        record = {"iteration": 0, "phase": "init",
                  "train_loss_first": float(np.mean(init_losses[: max(1, len(init_losses) // 10)])),
                  "train_loss_last": float(np.mean(init_losses[-max(1, len(init_losses) // 10):]))}
        history.append(record)
        if callback is not None:
            callback(state, record)

    for k in range(start_iteration, config.iterations):
        if config.fresh_samples:
            observations = observation_sampler(k)
        if k == start_iteration and initial_mean is not None:
            init_mean = (
                np.asarray(initial_mean, dtype=np.float64)
                if config.mean_shift_init else None
            )
        else:
            init_mean = dataset.mean(axis=0) if (
                config.mean_shift_init and dataset is not None
            ) else None
        dataset = e_step(
            model, observations, config.sampler, master, k,
            init_mean=init_mean,
        )
        model, losses = m_step(
            dataset, channel, model, config.train, master, k
        )
        record = {
            "iteration": k + 1,
            "phase": "em",
            "train_loss_first": float(np.mean(losses[: max(1, len(losses) // 10)])),
            "train_loss_last": float(np.mean(losses[-max(1, len(losses) // 10):])),
        }
        if metric_fn is not None:
            record.update(metric_fn(k, dataset))
        history.append(record)
        state = EMState(iteration=k + 1, model=model, dataset=dataset,
                        history=history)
        if callback is not None:
            callback(state, record)
    return EMState(iteration=config.iterations, model=model, dataset=dataset,
                   history=history)
