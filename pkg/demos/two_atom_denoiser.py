"""Train a conditional denoiser on a two-atom prior and compare it with the
exact posterior mean.

Clean data are +-1 with equal probability, observed through an identity
channel with noise 0.5.  The score-matching population minimizer is
E[X0 | X_t, Y], which for this prior has a closed form (two-term Bayes),
so the trained network can be checked pointwise against an exact oracle.

Run:  python demos/two_atom_denoiser.py      (about a minute)
"""

import numpy as np

from diffem.channels import CorruptionChannel
from diffem.diffusion import NoiseSchedule
from diffem.em import TrainConfig, build_model, m_step
from diffem.oracle import mixture_posterior_mean
from diffem.rng import stream


def main():
    schedule = NoiseSchedule(0.01, 10.0)
    channel = CorruptionChannel("fixed", dim_x=1, sigma_y=0.5,
                                matrix=np.eye(1))
    rng = stream(200, "data")
    atoms = np.array([-1.0, 1.0])
    x0 = atoms[rng.integers(0, 2, size=4096)][:, None]

    model = build_model(channel, schedule, (64, 64), stream(201, "m"))
    cfg = TrainConfig(epochs=400, batch_size=512, lr_init=3e-3,
                      lr_final=1e-5, ema_decay=0.999)
    model, losses = m_step(x0, channel, model, cfg, 202, 0)
    print(f"trained {len(losses)} steps, "
          f"loss {np.mean(losses[:100]):.3f} -> {np.mean(losses[-100:]):.3f}")

    probe = stream(203, "probe")
    print(f"{'t':>6} {'x_t':>8} {'y':>8} {'network':>9} {'exact':>9} "
          f"{'error':>8}")
    errors = []
    for _ in range(10):
        t = probe.uniform(0.25, 0.75)
        sigma_t = float(np.sqrt(schedule.sigma_sq(t)))
        x_clean = atoms[probe.integers(0, 2)]
        y = x_clean + 0.5 * probe.standard_normal()
        x_t = x_clean + sigma_t * probe.standard_normal()
        pred = model.denoise(np.array([[x_t]]), t, np.array([[y]]),
                             use_ema=True)[0, 0]
        exact = mixture_posterior_mean(
            [0.5, 0.5], [[-1.0], [1.0]], [[[0.0]], [[0.0]]],
            [[1.0]], 0.5, sigma_t, [x_t], [y],
        )[0]
        errors.append(abs(pred - exact))
        print(f"{t:6.3f} {x_t:8.3f} {y:8.3f} {pred:9.4f} {exact:9.4f} "
              f"{errors[-1]:8.5f}")
    print(f"max abs error over probes: {max(errors):.5f}")


if __name__ == "__main__":
    main()
