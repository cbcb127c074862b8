import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpzo.core import FunctionObjective, InvalidArgumentError, RngStream, gaussian_vector
from sharpzo.estimators import (EstimationError, Method, cge_estimate, rge_estimate,
                                sam_perturbation)
from sharpzo.objectives import make_quadratic


def sphere(d):
    return FunctionObjective(lambda w: 0.5 * float(w @ w), d)


def const(d, c=5.0):
    return FunctionObjective(lambda w: c, d)


class TestCGE:
    def test_exact_on_sphere(self):
        for mu in (1e-5, 1e-3, 0.1):
            est = cge_estimate(sphere(2), np.array([3.0, 4.0]), mu)
            np.testing.assert_allclose(est.grad, [3.0, 4.0], rtol=1e-9)

    def test_cubic_central_difference(self):
        # ((1+mu)^3 - (1-mu)^3) / (2 mu) = 3 + mu^2
        mu = 1e-3
        obj = FunctionObjective(lambda w: float(w[0] ** 3), 1)
        est = cge_estimate(obj, np.array([1.0]), mu)
        assert est.grad[0] == pytest.approx(3.000001, abs=1e-8)

    def test_constant_is_zero(self):
        est = cge_estimate(const(4), np.ones(4), 1e-3)
        assert np.array_equal(est.grad, np.zeros(4))

    def test_query_count(self):
        obj = sphere(7)
        est = cge_estimate(obj, np.ones(7), 1e-4)
        assert est.queries_used == 14
        assert obj.counter.total_evals == 14
        assert est.method is Method.CGE

    def test_nonfinite_reports_coordinate(self):
        obj = FunctionObjective(lambda w: math.inf if w[2] > 0.5 else 0.0, 3)
        with pytest.raises(EstimationError) as info:
            cge_estimate(obj, np.array([0.0, 0.0, 0.5]), 1e-3)
        assert info.value.coordinate == 2

    def test_bad_mu(self):
        with pytest.raises(InvalidArgumentError):
            cge_estimate(sphere(2), np.ones(2), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000),
           st.floats(1e-6, 1e-1))
    def test_exact_on_random_quadratics(self, d, seed, mu):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((d, d))
        H = M @ M.T + np.eye(d)
        b = rng.standard_normal(d)
        w = rng.standard_normal(d)
        obj = FunctionObjective(lambda x: 0.5 * float(x @ H @ x) + float(b @ x), d)
        exact = H @ w + b
        got = cge_estimate(obj, w, mu).grad
        scale = max(np.linalg.norm(exact), 1.0)
        assert np.linalg.norm(got - exact) / scale < 1e-8

    def test_matched_minibatch_cancels_loss_noise(self):
        obj = make_quadratic(5, 10.0, noise_std=0.0, seed=3)
        noisy = make_quadratic(5, 10.0, noise_std=0.5, seed=3)
        w = np.linspace(-1, 1, 5)
        # gradient noise survives, but the estimate is reproducible per stream
        a = cge_estimate(noisy, w, 1e-3, RngStream(1)).grad
        b = cge_estimate(noisy, w, 1e-3, RngStream(1)).grad
        assert np.array_equal(a, b)
        assert not np.allclose(a, cge_estimate(obj, w, 1e-3).grad)


class TestRGE:
    def test_constant_is_zero(self):
        est = rge_estimate(const(3), np.ones(3), 1e-3, 4, RngStream(0))
        assert np.array_equal(est.grad, np.zeros(3))

    def test_forced_direction_linear(self):
        obj = FunctionObjective(lambda w: float(w[0]), 2)
        est = rge_estimate(obj, np.zeros(2), 1e-3, 1, directions=[[1.0, 1.0]])
        np.testing.assert_allclose(est.grad, [1.0, 1.0], rtol=1e-12)

    def test_query_count(self):
        obj = sphere(5)
        est = rge_estimate(obj, np.ones(5), 1e-3, 3, RngStream(2))
        assert est.queries_used == 6 == obj.counter.total_evals
        assert est.q == 3

    def test_mask_freezes_coordinate(self):
        est = rge_estimate(sphere(2), np.array([1.0, 1.0]), 1e-3, 1, RngStream(9),
                           mask=np.array([True, False]))
        assert est.grad[1] == 0.0
        assert est.method is Method.MASKED_RGE

    def test_literal_eq4_leaks_into_masked_coordinate(self):
        est = rge_estimate(sphere(2), np.array([1.0, 1.0]), 1e-3, 1, RngStream(9),
                           mask=np.array([True, False]), literal_eq4=True)
        assert est.grad[1] != 0.0

    def test_mask_length_checked(self):
        with pytest.raises(InvalidArgumentError):
            rge_estimate(sphere(3), np.ones(3), 1e-3, 1, RngStream(0), mask=np.ones(2, bool))

    def test_unbiased_on_sphere(self):
        obj = sphere(2)
        w = np.array([1.0, 0.0])
        n = 20_000
        root = RngStream(123)
        g = np.array([rge_estimate(obj, w, 1e-3, 1, root.child(i)).grad for i in range(n)])
        np.testing.assert_allclose(g.mean(axis=0), [1.0, 0.0], atol=0.05)

    def test_q_averages_draws(self):
        obj = sphere(3)
        w = np.array([0.5, -1.0, 2.0])
        s = RngStream(4)
        avg = rge_estimate(obj, w, 1e-3, 3, s).grad
        # on the sphere the central quotient along u is exactly u.w
        us = [gaussian_vector(s.child(j, 0), 3) for j in range(3)]
        expected = np.mean([float(u @ w) * u for u in us], axis=0)
        np.testing.assert_allclose(avg, expected, rtol=1e-8, atol=1e-10)

    def test_masked_variance_is_lower(self):
        obj = make_quadratic(8, 10.0, seed=1)
        w = np.zeros(8)
        mask = np.array([True, False] * 4)
        root = RngStream(77)
        n = 4000
        dense = np.array([rge_estimate(obj, w, 1e-3, 1, root.child(0, i)).grad for i in range(n)])
        masked = np.array([rge_estimate(obj, w, 1e-3, 1, root.child(1, i), mask).grad
                           for i in range(n)])
        assert masked.var(axis=0).sum() < dense.var(axis=0).sum()


class TestSAM:
    def test_normalizes(self):
        np.testing.assert_allclose(sam_perturbation([3.0, 4.0], 0.1), [0.06, 0.08], rtol=1e-12)

    def test_zero_rho(self):
        assert np.array_equal(sam_perturbation([3.0, 4.0], 0.0), np.zeros(2))

    def test_zero_gradient(self):
        assert np.array_equal(sam_perturbation(np.zeros(3), 0.1), np.zeros(3))

    def test_below_tau(self):
        assert np.array_equal(sam_perturbation([1e-13, 0.0], 0.1), np.zeros(2))

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16),
           st.floats(0.0, 10.0))
    def test_norm_is_zero_or_rho(self, g, rho):
        out = sam_perturbation(g, rho)
        n = np.linalg.norm(out)
        assert n == 0.0 or abs(n - rho) <= 1e-12 * max(rho, 1.0)
