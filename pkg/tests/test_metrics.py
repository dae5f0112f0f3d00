import numpy as np
import pytest
from scipy.optimize import linprog

from diffem.channels import blur_matrix
from diffem.metrics import (
    SinkhornConfig,
    gaussian_frechet,
    mse,
    psnr,
    richardson_lucy,
    rl_kl_fidelity,
    sinkhorn_divergence,
)


@pytest.fixture
def rng():
    return np.random.default_rng(23)


def exact_ot_lp(x, y):
    """Unregularized squared-Euclidean OT cost via linear programming."""
    n, m = x.shape[0], y.shape[0]
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2).ravel()
    A_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m:(i + 1) * m] = 1.0
        A_eq.append(row)
        b_eq.append(1.0 / n)
    for j in range(m):
        row = np.zeros(n * m)
        row[j::m] = 1.0
        A_eq.append(row)
        b_eq.append(1.0 / m)
    res = linprog(cost, A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.success
    return res.fun


class TestSinkhorn:
    def test_self_divergence_is_zero(self, rng):
        a = rng.standard_normal((64, 3))
        assert abs(sinkhorn_divergence(a, a)) <= 1e-9

    def test_symmetry(self, rng):
        a = rng.standard_normal((48, 2))
        b = rng.standard_normal((48, 2)) + 0.5
        s_ab = sinkhorn_divergence(a, b)
        s_ba = sinkhorn_divergence(b, a)
        assert abs(s_ab - s_ba) < 1e-9
        assert s_ab > -1e-9

    def test_point_masses_at_distance_r(self):
        # duplicated rows satisfy the n >= 2 invariant
        r = 1.7
        a = np.zeros((2, 2))
        b = np.zeros((2, 2))
        b[:, 0] = r
        cfg = SinkhornConfig(regularization=1e-4)
        val = sinkhorn_divergence(a, b, cfg)
        assert val == pytest.approx(r**2, rel=0.01)

    def test_matches_lp_oracle_on_gaussians(self, rng):
        a = rng.standard_normal((128, 2))
        b = rng.standard_normal((128, 2)) @ np.diag([0.5, 1.5]) + [1.0, 0.0]
        lp = exact_ot_lp(a, b)
        sk = sinkhorn_divergence(a, b)
        assert sk == pytest.approx(lp, rel=0.10)

    def test_dimension_and_size_validation(self, rng):
        with pytest.raises(ValueError):
            sinkhorn_divergence(rng.standard_normal((4, 2)),
                                rng.standard_normal((4, 3)))
        with pytest.raises(ValueError):
            sinkhorn_divergence(rng.standard_normal((1, 2)),
                                rng.standard_normal((4, 2)))
        with pytest.raises(ValueError):
            SinkhornConfig(regularization=0.0)

    def test_convergence_flag(self, rng):
        a = rng.standard_normal((16, 2))
        b = rng.standard_normal((16, 2))
        cfg = SinkhornConfig(regularization=0.5)
        val, ok = sinkhorn_divergence(a, b, cfg, return_flag=True)
        assert ok
        starved = SinkhornConfig(regularization=0.5, max_iterations=1)
        _, ok2 = sinkhorn_divergence(a, b, starved, return_flag=True)
        assert not ok2


class TestGaussianFrechet:
    def test_identical_sets(self, rng):
        a = rng.standard_normal((100, 3))
        assert gaussian_frechet(a, a) == pytest.approx(0.0, abs=1e-9)

    def test_mean_shift_one_dim(self, rng):
        a = rng.standard_normal((200000, 1))
        b = a + 1.0
        assert gaussian_frechet(a, b) == pytest.approx(1.0, abs=1e-6)

    def test_commuting_diagonal_hand_value(self, rng):
        # diag(1,4) vs diag(4,1): (1-2)^2 + (2-1)^2 = 2
        n = 400000
        a = rng.standard_normal((n, 2)) * [1.0, 2.0]
        b = rng.standard_normal((n, 2)) * [2.0, 1.0]
        assert gaussian_frechet(a, b) == pytest.approx(2.0, rel=0.02)

    def test_triangle_inequality_spot_check(self, rng):
        for _ in range(20):
            sets = [rng.standard_normal((60, 2)) * rng.uniform(0.5, 2)
                    + rng.standard_normal(2) for _ in range(3)]
            dab = np.sqrt(gaussian_frechet(sets[0], sets[1]))
            dbc = np.sqrt(gaussian_frechet(sets[1], sets[2]))
            dac = np.sqrt(gaussian_frechet(sets[0], sets[2]))
            assert dac <= dab + dbc + 1e-9


class TestRichardsonLucy:
    def test_identity_kernel_fixed_point(self, rng):
        y = rng.random(16) + 0.1
        out = richardson_lucy(y, np.eye(16), iterations=5)
        assert np.max(np.abs(out - y)) < 1e-9

    def test_deblurring_reduces_mse(self, rng):
        H = W = 8
        truth = np.zeros((H, W))
        truth[2, 3] = 1.0
        truth[5, 5] = 0.7
        truth[6, 1] = 0.4
        K = blur_matrix(2.0, H, W)
        blurred = K @ truth.ravel()
        restored = richardson_lucy(blurred, K, iterations=30)
        assert mse(restored, truth.ravel()) < mse(blurred, truth.ravel())

    def test_flux_conservation(self, rng):
        K = blur_matrix(1.5, 6, 6)
        y = rng.random(36)
        out = richardson_lucy(y, K, iterations=20)
        assert out.sum() == pytest.approx(y.sum(), rel=1e-6)

    def test_kl_fidelity_non_increasing(self, rng):
        K = blur_matrix(2.0, 8, 8)
        truth = rng.random(64)
        y = K @ truth
        x = y.copy()
        prev = rl_kl_fidelity(y, K, x)
        for _ in range(25):
            x = richardson_lucy(y, K, iterations=1) if False else x
            forward = np.maximum(K @ x, 1e-12)
            x = x * (K.T @ (y / forward))
            cur = rl_kl_fidelity(y, K, x)
            assert cur <= prev + 1e-9
            prev = cur

    def test_negative_input_shift_round_trip(self):
        y = np.array([-0.5, 0.5, 1.0, 0.0])
        out = richardson_lucy(y, np.eye(4), iterations=3)
        assert np.max(np.abs(out - y)) < 1e-9

    def test_iteration_validation(self):
        with pytest.raises(ValueError):
            richardson_lucy(np.ones(4), np.eye(4), iterations=0)


class TestMsePsnr:
    def test_mse_basics(self, rng):
        a = rng.standard_normal((5, 5))
        assert mse(a, a) == 0.0
        assert mse(a, a + 0.3) == pytest.approx(0.09, abs=1e-12)
        with pytest.raises(ValueError):
            mse(a, np.zeros((4, 4)))

    def test_psnr(self, rng):
        a = np.zeros(10)
        b = np.full(10, 0.1)
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-9)
        assert psnr(a, a) == np.inf
        with pytest.raises(ValueError):
            psnr(a, b, peak=0.0)
