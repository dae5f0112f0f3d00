"""Parameter store, Adam with global-norm clipping, and EMA updates.

Adam constants are the canonical defaults (beta1=0.9, beta2=0.999, eps=1e-8).
All updates return a new ParamStore; the input is never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ParamStore:
    """Named parameter tensors plus per-parameter Adam moment buffers."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        # canonical key order so numerical reductions over the store are
        # independent of how the dicts were assembled (fresh vs loaded)
        self.params = {k: self.params[k] for k in sorted(self.params)}
        self.m = {k: self.m[k] for k in sorted(self.m)}
        self.v = {k: self.v[k] for k in sorted(self.v)}
        for name, p in self.params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
            if name not in self.v:
                self.v[name] = np.zeros_like(p)
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ValueError(f"moment buffer shape mismatch for '{name}'")
        if self.step < 0:
            raise ValueError("step counter must be >= 0")

    def clone(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    return np.sqrt(sq)


def adam_step(store: ParamStore, grads, lr: float, clip_norm: float) -> ParamStore:
    """One Adam update with gradient clipped to global norm `clip_norm`."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for '{name}'")
        if g.shape != store.params[name].shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")

    norm = global_norm(grads)
    scale = clip_norm / norm if norm > clip_norm else 1.0

    out = store.clone()
    out.step += 1
    bc1 = 1.0 - ADAM_BETA1**out.step
    bc2 = 1.0 - ADAM_BETA2**out.step
    for name in grads:
        g = grads[name] * scale
        out.m[name] = ADAM_BETA1 * out.m[name] + (1.0 - ADAM_BETA1) * g
        out.v[name] = ADAM_BETA2 * out.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = out.m[name] / bc1
        v_hat = out.v[name] / bc2
        out.params[name] = out.params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


def ema_update(shadow: ParamStore, store: ParamStore, decay: float) -> ParamStore:
    """shadow <- decay * shadow + (1 - decay) * params, per tensor."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    out = shadow.clone()
    for name, p in store.params.items():
        if shadow.params[name].shape != p.shape:
            raise ValueError(f"shape mismatch for '{name}' in EMA update")
        out.params[name] = decay * shadow.params[name] + (1.0 - decay) * p
    return out
