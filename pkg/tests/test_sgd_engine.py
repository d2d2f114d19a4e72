import math

import numpy as np
import pytest

from mclt_sgd.errors import DivergenceDetected, IndexOrder, InvalidParams
from mclt_sgd.rng import seed_stream
from mclt_sgd.sgd_engine import (StepSchedule, catalog_problem, gaussian_noise, logcosh_ridge_problem,
                                 martingale_part, quadratic_problem, rademacher_noise, run_batch,
                                 run_linear, run_sgd, schedule_partial_sums)


class TestSchedule:
    def test_values(self):
        s = StepSchedule(0.5, 0.6)
        assert float(s.eta(1)) == 0.5
        assert float(s.eta(32)) == pytest.approx(0.5 * 32**-0.6)
        assert float(s.eta(0)) == 0.5
        np.testing.assert_allclose(s.etas(3), [0.5, 0.5, 0.5 * 2**-0.6, 0.5 * 3**-0.6])

    def test_partial_sums(self):
        s = StepSchedule(1.0, 0.5)
        assert schedule_partial_sums(s, 1, 4) == pytest.approx(1 + 2**-0.5 + 3**-0.5 + 0.5)
        with pytest.raises(IndexOrder):
            schedule_partial_sums(s, 3, 2)

    @pytest.mark.parametrize("eta0,c3", [(0.0, 0.5), (1.0, 1.0), (1.0, -0.1)])
    def test_invalid(self, eta0, c3):
        with pytest.raises(InvalidParams):
            StepSchedule(eta0, c3)


class TestNoise:
    def test_rademacher_third_moment(self):
        assert rademacher_noise(np.eye(2)).third_moment() == pytest.approx(2**1.5)

    def test_gaussian_third_moment_isotropic(self):
        assert gaussian_noise(np.eye(1)).third_moment() == pytest.approx(2 * math.sqrt(2 / math.pi))

    def test_gaussian_third_moment_anisotropic(self):
        nz = gaussian_noise(np.diag([1.0, 4.0]))
        x = nz.draw(seed_stream(0, 0), 400_000)
        mc = np.linalg.norm(x, axis=1) ** 3
        assert abs(nz.third_moment() - mc.mean()) < 4 * mc.std() / math.sqrt(mc.size)

    def test_draw_covariance(self):
        v = np.array([[2.0, 0.5], [0.5, 1.0]])
        for nz in (gaussian_noise(v), rademacher_noise(v)):
            x = nz.draw(seed_stream(1, 0), 200_000)
            np.testing.assert_allclose(np.cov(x, rowvar=False), v, atol=0.03)

    def test_zero_noise(self):
        nz = gaussian_noise(np.zeros((2, 2)))
        assert nz.is_zero and nz.trace == 0.0
        np.testing.assert_array_equal(nz.draw(seed_stream(0, 0), 3), np.zeros((3, 2)))


class TestEngines:
    def test_zero_noise_linear_is_deterministic_contraction(self):
        A = np.diag([1.0, 2.0])
        s = StepSchedule(0.4, 0.0)
        tr = run_linear(A, np.zeros(2), s, [1.0, 1.0], 5, gaussian_noise(np.zeros((2, 2))), 0)
        np.testing.assert_allclose(tr.deltas[5], [0.6**5, 0.2**5], atol=1e-15)
        np.testing.assert_allclose(tr.delta_bar, tr.deltas[:5].mean(axis=0), atol=1e-15)

    def test_averaging_identity(self):
        p = catalog_problem("linear_2d")
        tr = run_sgd(p, StepSchedule(0.5, 0.6), [0.3, -0.2], 200, 4)
        np.testing.assert_allclose(tr.delta_bar, tr.deltas[:-1].mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(tr.theta_bar, tr.delta_bar + p.theta_star)

    def test_single_matches_batch(self):
        p = catalog_problem("linear_2d")
        s = StepSchedule(0.5, 0.6)
        tr = run_sgd(p, s, [0.3, -0.2], 50, 4)
        b = run_batch(p, s, [0.3, -0.2], 50, 1, 4, threads=1)
        np.testing.assert_allclose(b.delta_bar[0], tr.delta_bar, atol=1e-15)

    def test_martingale_part(self):
        p = catalog_problem("logcosh_ridge_2d")
        tr = run_sgd(p, StepSchedule(0.5, 0.6), [0.0, 0.0], 20, 1)
        np.testing.assert_array_equal(martingale_part(p, tr), -tr.noise)

    def test_divergence(self):
        p = quadratic_problem(np.eye(1), np.zeros(1), gaussian_noise(np.eye(1)))
        with pytest.warns(RuntimeWarning):
            with pytest.raises(DivergenceDetected):
                run_sgd(p, StepSchedule(5.0, 0.0), [1.0], 200, 0)

    def test_threads_do_not_change_results(self):
        p = catalog_problem("linear_2d")
        s = StepSchedule(0.5, 0.6)
        a = run_batch(p, s, [0, 0], 100, 5000, 2, [10, 100], threads=1)
        b = run_batch(p, s, [0, 0], 100, 5000, 2, [10, 100], threads=3)
        np.testing.assert_array_equal(a.delta_bar, b.delta_bar)
        np.testing.assert_array_equal(a.delta_at, b.delta_at)

    def test_checkpoint_average(self):
        p = catalog_problem("linear_1d")
        s = StepSchedule(0.5, 0.6)
        b = run_batch(p, s, [1.0], 40, 4, 0, [40])
        np.testing.assert_allclose(b.delta_bar_at[:, 0], b.delta_bar, atol=1e-15)


class TestLogcosh:
    def test_minimizer_and_constants(self):
        p = catalog_problem("logcosh_ridge_2d")
        assert np.linalg.norm(p.grad(p.theta_star)) <= 1e-12
        assert p.mu == 0.5
        w = np.linalg.eigvalsh(p.hessian_at_min)
        assert p.mu <= w[0] and w[-1] <= p.L

    def test_gradient_matches_value(self):
        p = catalog_problem("logcosh_ridge_2d")
        x = np.array([0.2, -0.1])
        eps = 1e-6
        num = [(p.value(x + e) - p.value(x - e)) / (2 * eps) for e in eps * np.eye(2)]
        np.testing.assert_allclose(p.grad(x), num, atol=1e-8)

    def test_rejects_nonpositive_ridge(self):
        with pytest.raises(InvalidParams):
            logcosh_ridge_problem(np.eye(2), np.zeros(2), 0.0, gaussian_noise(np.eye(2)))

    def test_wrong_minimizer_rejected(self):
        with pytest.raises(InvalidParams):
            logcosh_ridge_problem(np.eye(2), np.ones(2), 0.5, gaussian_noise(np.eye(2)),
                                  theta_star=np.zeros(2))
