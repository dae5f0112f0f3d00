"""Variance-exploding diffusion machinery.

Noise schedule (log-linear in t), Beta-density loss weighting, the MLP
conditional denoiser, forward perturbation, and the conditional
score-matching loss in its denoiser form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, layernorm, silu
from .optim import ParamStore


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma_t^2 = exp((1-t) log lo + t log hi) on t in [0, 1].

    The verbatim reading uses lo = sigma0, hi = sigma1 (so sigma_sq(0) equals
    sigma0 itself, not its square); set squared_endpoints=True for the
    squared-endpoint reading lo = sigma0^2, hi = sigma1^2.
    """

    sigma0: float
    sigma1: float
    squared_endpoints: bool = False

    def __post_init__(self):
        if not 0 < self.sigma0 < self.sigma1:
            raise ValueError("need 0 < sigma0 < sigma1")

    @property
    def _endpoints(self):
        if self.squared_endpoints:
            return self.sigma0**2, self.sigma1**2
        return self.sigma0, self.sigma1

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
        return t

    def sigma_sq(self, t):
        t = self._check_t(t)
        lo, hi = self._endpoints
        out = np.exp((1.0 - t) * np.log(lo) + t * np.log(hi))
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        return np.sqrt(self.sigma_sq(t))

    def g_sq(self, t):
        """g(t)^2 = d sigma_t^2 / dt, analytic for the log-linear schedule."""
        lo, hi = self._endpoints
        return self.sigma_sq(t) * np.log(hi / lo)


def beta_pdf(t, alpha: float, beta: float):
    """Density of Beta(alpha, beta) at t."""
    t = np.asarray(t, dtype=np.float64)
    logb = (
        math.lgamma(alpha + beta) - math.lgamma(alpha) - math.lgamma(beta)
    )
    with np.errstate(divide="ignore"):
        logp = logb + (alpha - 1.0) * np.log(t) + (beta - 1.0) * np.log1p(-t)
    out = np.exp(logp)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossWeighting:
    """lambda_t = (sigma_t^2 + 1) * BetaPDF(t; alpha, beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")

    def lambda_t(self, t, schedule: NoiseSchedule):
        return (schedule.sigma_sq(t) + 1.0) * beta_pdf(t, self.alpha, self.beta)


def perturb(x0, t, schedule: NoiseSchedule, rng):
    """Forward noising: x_t = x0 + sigma_t * z, z ~ N(0, I)."""
    x0 = np.asarray(x0, dtype=np.float64)
    return x0 + schedule.sigma(t) * rng.standard_normal(x0.shape)


def score_from_denoiser(d_out, x_t, t, schedule: NoiseSchedule):
    """Tweedie: score = (E[X0 | x_t, y] - x_t) / sigma_t^2."""
    sig_sq = schedule.sigma_sq(t)
    sig_sq = np.asarray(sig_sq)
    if sig_sq.ndim == 1:
        sig_sq = sig_sq[:, None]
    return (d_out - x_t) / sig_sq


def sigma_embedding(sigma_sq, width: int = 16) -> np.ndarray:
    """Sinusoidal embedding of log(sigma_t), `width` features per row."""
    half = width // 2
    log_sigma = 0.5 * np.log(np.atleast_1d(np.asarray(sigma_sq, dtype=np.float64)))
    freqs = 0.25 * 2.0 ** np.arange(half)
    phase = log_sigma[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


@dataclass(frozen=True)
class DenoiserArch:
    """MLP layout: concat(x_t, y, A-encoding, sigma-embedding) -> x0 estimate."""

    dim_x: int
    dim_y: int
    desc_width: int
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_width: int = 16

    @property
    def cond_width(self) -> int:
        return self.dim_y + self.desc_width

    @property
    def input_width(self) -> int:
        return self.dim_x + self.cond_width + self.embed_width


def init_mlp_params(arch: DenoiserArch, rng) -> ParamStore:
    widths = (arch.input_width,) + arch.hidden
    params = {}
    for i in range(len(arch.hidden)):
        fan_in = widths[i]
        params[f"w{i}"] = rng.standard_normal((fan_in, widths[i + 1])) / np.sqrt(fan_in)
        params[f"b{i}"] = np.zeros(widths[i + 1])
        params[f"ln{i}_g"] = np.ones(widths[i + 1])
        params[f"ln{i}_b"] = np.zeros(widths[i + 1])
    params["w_out"] = rng.standard_normal((widths[-1], arch.dim_x)) / np.sqrt(widths[-1])
    params["b_out"] = np.zeros(arch.dim_x)
    return ParamStore(params=params)


@dataclass
class DenoiserModel:
    """Conditional denoiser d(x_t, t | y): an MLP over concatenated features.

    In unconditional mode the (y, A-encoding) slots are zeroed, so the model
    output is invariant to whatever conditioning values the caller supplies.
    """

    arch: DenoiserArch
    schedule: NoiseSchedule
    params: ParamStore
    conditional: bool = True
    ema: ParamStore | None = None

    @property
    def dim_x(self) -> int:
        return self.arch.dim_x

    def features(self, x_t, t, cond=None) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        if x_t.shape[1] != self.arch.dim_x:
            raise ValueError(
                f"x_t width {x_t.shape[1]} != model dim_x {self.arch.dim_x}"
            )
        sig_sq = np.broadcast_to(np.asarray(self.schedule.sigma_sq(t)), (n,))
        emb = sigma_embedding(sig_sq, self.arch.embed_width)
        if not self.conditional or cond is None:
            cond_block = np.zeros((n, self.arch.cond_width))
        else:
            cond_block = np.atleast_2d(np.asarray(cond, dtype=np.float64))
            if cond_block.shape != (n, self.arch.cond_width):
                raise ValueError(
                    f"conditioning block has shape {cond_block.shape}, "
                    f"expected ({n}, {self.arch.cond_width})"
                )
        return np.concatenate([x_t, cond_block, emb], axis=1)

    def _forward_plain(self, params: ParamStore, feats: np.ndarray) -> np.ndarray:
        h = feats
        for i in range(len(self.arch.hidden)):
            z = h @ params[f"w{i}"] + params[f"b{i}"]
            h = silu(layernorm(z) * params[f"ln{i}_g"] + params[f"ln{i}_b"])
        return h @ params["w_out"] + params["b_out"]

    def denoise(self, x_t, t, cond=None, use_ema=False) -> np.ndarray:
        params = self.ema if (use_ema and self.ema is not None) else self.params
        out = self._forward_plain(params, self.features(x_t, t, cond))
        return out if np.ndim(x_t) == 2 else out[0]

    def forward_tape(self, tape: Tape, feats: np.ndarray):
        """Taped forward pass; returns (output node, dict of parameter leaves)."""
        leaves = {name: tape.leaf(p, name) for name, p in self.params.params.items()}
        h = tape.leaf(feats, "features")
        for i in range(len(self.arch.hidden)):
            z = tape.add(tape.matmul(h, leaves[f"w{i}"]), leaves[f"b{i}"])
            normed = tape.add(
                tape.multiply(tape.layernorm(z), leaves[f"ln{i}_g"]),
                leaves[f"ln{i}_b"],
            )
            h = tape.silu(normed)
        out = tape.add(tape.matmul(h, leaves["w_out"]), leaves["b_out"])
        return out, leaves


def sm_loss_batch(model: DenoiserModel, weighting: LossWeighting, x0, cond, rng,
                  with_grad: bool = True):
    """Monte Carlo estimate of the denoiser-form score-matching loss.

    Per example: t ~ Beta(alpha, beta) (importance-sampling the Beta factor
    of the weight), x_t = x0 + sigma_t z, and the squared error
    ||d(x_t, t | y) - x0||^2 weighted by (sigma_t^2 + 1) / sigma_t^2.
    Returns (loss, grads) when with_grad, else just the loss value.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.beta(weighting.alpha, weighting.beta, size=n)
    z = rng.standard_normal(x0.shape)
    sig_sq = model.schedule.sigma_sq(t)
    x_t = x0 + np.sqrt(sig_sq)[:, None] * z
    w = (sig_sq + 1.0) / sig_sq
    feats = model.features(x_t, t, cond)

    if not with_grad:
        d = model._forward_plain(model.params, feats)
        return float(np.mean(w * np.sum((d - x0) ** 2, axis=1)))

    tape = Tape()
    d, leaves = model.forward_tape(tape, feats)
    neg_x0 = tape.leaf(-x0, "neg_x0")
    resid = tape.add(d, neg_x0)
    sqrt_w = tape.leaf(np.sqrt(w)[:, None], "sqrt_w")
    scaled = tape.multiply(resid, sqrt_w)
    ss = tape.sum_of_squares(scaled)
    loss = tape.multiply(ss, tape.leaf(1.0 / n, "inv_n"))
    grads = tape.grad(loss, leaves)
    return float(loss.value), grads


def loss_term_score_form(model, weighting, x0, t, z, cond=None):
    """Score-form integrand lambda_t ||sigma_t s(x_t) + z||^2 for one sample."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    sig_sq = model.schedule.sigma_sq(t)
    x_t = x0 + np.sqrt(sig_sq) * z
    d = model.denoise(x_t, t, cond)
    s = (d - x_t) / sig_sq
    lam = weighting.lambda_t(t, model.schedule)
    return float(lam * np.sum((np.sqrt(sig_sq) * s + z) ** 2))


def loss_term_denoiser_form(model, weighting, x0, t, z, cond=None):
    """Denoiser-form integrand lambda'_t ||d(x_t) - x0||^2, lambda' = lambda/sigma^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    sig_sq = model.schedule.sigma_sq(t)
    x_t = x0 + np.sqrt(sig_sq) * z
    d = model.denoise(x_t, t, cond)
    lam = weighting.lambda_t(t, model.schedule) / sig_sq
    return float(lam * np.sum((d - x0) ** 2))
