"""Reverse-time samplers: Euler-Maruyama, predictor-corrector, ancestral.

All samplers are batched: the model is evaluated on an (n, d) state matrix
and the rng only ever produces (n, d) normal draws, so a RowStreams adapter
gives per-item determinism.  With corrector_steps=0 the predictor-corrector
sampler follows exactly the same draw sequence as plain Euler, making the
two bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplerDivergence(RuntimeError):
    """Non-finite state during reverse integration."""

    def __init__(self, step: int, rows):
        self.step = step
        self.rows = list(rows)
        super().__init__(
            f"non-finite state at reverse step {step} (items {self.rows[:8]}"
            + ("..." if len(self.rows) > 8 else "")
            + ")"
        )


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "euler"  # euler | pc | ancestral
    steps: int = 512
    corrector_steps: int = 1
    snr: float = 0.1
    readout: str = "denoiser"  # denoiser | raw

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind not in ("euler", "pc", "ancestral"):
            raise ValueError(f"unknown sampler kind '{self.kind}'")
        if self.kind == "pc" and (self.corrector_steps < 0 or self.snr <= 0):
            raise ValueError("pc sampler needs corrector_steps >= 0 and snr > 0")
        if self.readout not in ("denoiser", "raw"):
            raise ValueError(f"unknown readout '{self.readout}'")


def _init_state(model, n, rng, init_mean):
    sig1 = np.sqrt(model.schedule.sigma_sq(1.0))
    x = sig1 * rng.standard_normal((n, model.dim_x))
    if init_mean is not None:
        x = x + np.asarray(init_mean, dtype=np.float64)
    return x


def _check_finite(x, step):
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        raise SamplerDivergence(step, np.flatnonzero(bad))


def _score(model, x, t, cond, use_ema):
    d = model.denoise(x, t, cond, use_ema=use_ema)
    return (d - x) / model.schedule.sigma_sq(t)


def sample_reverse_pc(model, cond, steps, rng, n=None, corrector_steps=0,
                      snr=0.1, init_mean=None, readout="denoiser",
                      use_ema=False):
    """Euler-Maruyama predictor with optional Langevin corrector steps.

    Integrates the reverse SDE on a uniform t-grid from 1 to 0.  With the
    default denoiser readout, the returned sample is the denoiser's
    posterior-mean estimate at t_min = 1/steps; raw readout integrates the
    final step and returns the state at t=0.
    """
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        n = cond.shape[0]
    if n is None:
        raise ValueError("n is required for unconditional sampling")
    sched = model.schedule
    dt = 1.0 / steps
    x = _init_state(model, n, rng, init_mean)
    t = 1.0
    for i in range(steps):
        t_next = (steps - i - 1) * dt
        s = _score(model, x, t, cond, use_ema)
        z = rng.standard_normal(x.shape)
        x = x + sched.g_sq(t) * s * dt + np.sqrt(sched.g_sq(t) * dt) * z
        _check_finite(x, i)
        for _ in range(corrector_steps):
            s = _score(model, x, t_next, cond, use_ema)
            z = rng.standard_normal(x.shape)
            s_norm = np.linalg.norm(s, axis=1)
            z_norm = np.linalg.norm(z, axis=1)
            ok = s_norm > 0  # rows with zero score are skipped outright
            if not ok.any():
                continue
            # batch-averaged norms: a per-row ratio is heavy-tailed in low
            # dimension and destabilizes the chain
            eta = 2.0 * (snr * z_norm[ok].mean() / s_norm[ok].mean()) ** 2
            x[ok] = x[ok] + eta * s[ok] + np.sqrt(2.0 * eta) * z[ok]
            _check_finite(x, i)
        t = t_next
        if readout == "denoiser" and i == steps - 2:
            return model.denoise(x, dt, cond, use_ema=use_ema)
    if readout == "denoiser":
        # steps == 1: never reached t_min before the final step
        return model.denoise(x, dt, cond, use_ema=use_ema)
    return x


def sample_reverse_euler(model, cond, steps, rng, n=None, init_mean=None,
                         readout="denoiser", use_ema=False):
    """Plain Euler-Maruyama integration of the reverse SDE."""
    return sample_reverse_pc(
        model, cond, steps, rng, n=n, corrector_steps=0,
        init_mean=init_mean, readout=readout, use_ema=use_ema,
    )


def sample_ancestral(model, cond, steps, rng, n=None, init_mean=None,
                     use_ema=False):
    """VE ancestral sampling on a uniform grid t_N=1 > ... > t_0=0.

    Each transition posterior-samples x_{t-} given x_t using the Gaussian
    implied by the VE forward process and the denoiser's x0 estimate:
    mean = r x_t + (1-r) d, var = sigma^2(t-) (1-r), r = sigma^2(t-)/sigma^2(t).
    """
    if cond is not None:
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        n = cond.shape[0]
    if n is None:
        raise ValueError("n is required for unconditional sampling")
    sched = model.schedule
    x = _init_state(model, n, rng, init_mean)
    for i in range(steps, 0, -1):
        t_hi = i / steps
        t_lo = (i - 1) / steps
        ratio = sched.sigma_sq(t_lo) / sched.sigma_sq(t_hi)
        d = model.denoise(x, t_hi, cond, use_ema=use_ema)
        mean = ratio * x + (1.0 - ratio) * d
        var = sched.sigma_sq(t_lo) * (1.0 - ratio)
        x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        _check_finite(x, steps - i)
    return x


def sample(model, cond, config: SamplerConfig, rng, n=None, init_mean=None,
           use_ema=False):
    """Dispatch on SamplerConfig.kind."""
    if config.kind == "ancestral":
        return sample_ancestral(
            model, cond, config.steps, rng, n=n, init_mean=init_mean,
            use_ema=use_ema,
        )
    corrector = config.corrector_steps if config.kind == "pc" else 0
    return sample_reverse_pc(
        model, cond, config.steps, rng, n=n, corrector_steps=corrector,
        snr=config.snr, init_mean=init_mean, readout=config.readout,
        use_ema=use_ema,
    )
