import math

import numpy as np
import pytest

from smallnoise.approx import (
    MCEstimate,
    coupled_discrepancies,
    decreasing_beyond_noise,
    epsilon_sweep,
    estimate_strong_error,
    exceedance_probability,
    gronwall_check,
    gronwall_premise_holds,
    moment_bound,
    moment_bound_check,
)
from smallnoise.errors import DivergenceError, InvalidInputError
from smallnoise.model import check_dissipativity, cubic_problem
from smallnoise.randomness import TimeGrid

GRID = TimeGrid.from_dt(1.0, 1e-3)


def ou_terminal_oracle(eps, t=1.0):
    # Euler on the OU flow stays linear: X_T - x_T is Gaussian with variance
    # eps^2 dt sum_k (1-dt)^{2k}, plus the Euler vs RK4 bias squared
    dt = GRID.dt
    n = int(round(t / dt))
    var = eps * eps * dt * sum((1 - dt) ** (2 * k) for k in range(n))
    bias = (1 - dt) ** n - math.exp(-t)
    return var + bias * bias


def reflection_exceed(a, T=1.0):
    s = sum((-1) ** k / (2 * k + 1) * math.exp(-(2 * k + 1) ** 2 * math.pi ** 2 * T / (8 * a * a))
            for k in range(60))
    return 1.0 - 4.0 / math.pi * s


class TestMCEstimate:
    def test_from_samples(self):
        e = MCEstimate.from_samples([1.0, 2.0, 3.0, 4.0])
        assert e.mean == 2.5 and e.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
        assert e.band(2) == (e.mean - 2 * e.stderr, e.mean + 2 * e.stderr)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            MCEstimate.from_samples([])


class TestStrongError:
    def test_ou_terminal_matches_oracle(self, ou):
        est = estimate_strong_error(ou, 0.1, GRID, 10.0, 20_000, 0)
        # continuous-time value eps^2 (1 - e^{-2}) / 2 is within a fraction of a percent
        assert est.within(ou_terminal_oracle(0.1), k=4)
        assert ou_terminal_oracle(0.1) == pytest.approx(0.01 * (1 - math.exp(-2)) / 2, rel=2e-3)

    def test_zero_noise(self, ou):
        est = estimate_strong_error(ou, 0.0, GRID, 10.0, 100, 0)
        assert est.mean < 1e-6 and est.stderr < 1e-20

    def test_pure_noise(self, pure_noise):
        est = estimate_strong_error(pure_noise, 0.2, GRID, 100.0, 20_000, 1)
        assert est.within(0.04, k=4)

    def test_em_scheme_same_when_inactive(self, ou):
        a = estimate_strong_error(ou, 0.1, GRID, 50.0, 500, 3)
        b = estimate_strong_error(ou, 0.1, GRID, None, 500, 3, scheme="em")
        assert a == b

    def test_worker_count_irrelevant(self, cubic):
        a = estimate_strong_error(cubic, 0.2, GRID, 10.0, 2000, 5, mode="sup", workers=1)
        b = estimate_strong_error(cubic, 0.2, GRID, 10.0, 2000, 5, mode="sup", workers=8)
        assert a == b

    def test_em_divergence_raises(self):
        p = cubic_problem()
        with pytest.raises(DivergenceError) as info:
            estimate_strong_error(p, 1.0, TimeGrid(20.0, 40), None, 100, 0, scheme="em")
        assert len(info.value.path_indices) > 0

    def test_bad_mode(self, ou):
        with pytest.raises(InvalidInputError):
            estimate_strong_error(ou, 0.1, GRID, 10.0, 10, 0, mode="mean")


class TestSweep:
    def test_ou_slope(self, ou):
        sw = epsilon_sweep(ou, [0.2, 0.1, 0.05, 0.025], GRID, 10.0, 4000, 0)
        assert sw.epsilons == [0.2, 0.1, 0.05, 0.025]
        assert abs(sw.slope_fit - 2.0) < 0.05
        assert sw.first_moment_bound(0.1) == pytest.approx(0.1 * math.sqrt(sw.a_estimate))

    def test_pure_noise_exact_slope(self, pure_noise):
        # with common random numbers the error is exactly eps^2 |W_T|^2
        sw = epsilon_sweep(pure_noise, [0.4, 0.2, 0.1], GRID, 100.0, 500, 0)
        assert sw.slope_fit == pytest.approx(2.0, abs=1e-9)

    def test_independent_seeds_differ(self, ou):
        a = epsilon_sweep(ou, [0.2, 0.1, 0.05], GRID, 10.0, 300, 0)
        b = epsilon_sweep(ou, [0.2, 0.1, 0.05], GRID, 10.0, 300, 0, independent_seeds=True)
        assert a.sq_error_estimates[1] != b.sq_error_estimates[1]

    @pytest.mark.parametrize("eps", [[0.1, 0.05], [0.1, 0.1, 0.05], [0.1, 0.05, 0.0]])
    def test_rejects_bad_lists(self, ou, eps):
        with pytest.raises(InvalidInputError):
            epsilon_sweep(ou, eps, GRID, 10.0, 10, 0)


class TestMomentBound:
    def test_bound_formula(self):
        np.testing.assert_allclose(moment_bound([1.0], 1.0, 0.1, [0.0, 1.0]),
                                   [2.0, 2.0 * math.exp(2.01)])

    def test_ou_curve_matches_closed_form(self, ou):
        curve, passed = moment_bound_check(ou, 0.1, 1.0, GRID, 10.0, 20_000, 0)
        assert passed
        # 1 + E X_1^2 = 1 + e^{-2} + eps^2 (1 - e^{-2}) / 2, up to O(dt)
        exact = 1 + math.exp(-2) + 0.01 * (1 - math.exp(-2)) / 2
        assert abs(curve.mean[-1] - exact) < 4 * curve.stderr[-1] + 1e-3
        assert curve.second_moment[0].mean == 2.0

    def test_static_case_equality(self, static):
        curve, passed = moment_bound_check(static, 0.5, 0.0, GRID, 10.0, 50, 0)
        assert passed
        np.testing.assert_array_equal(curve.mean, curve.bound)

    @pytest.mark.parametrize("eps", [0.0, 0.3, 1.0])
    def test_cubic_within_bound(self, cubic, eps):
        K = 1.0
        assert check_dissipativity(cubic, K, 10.0, 1000).satisfied_on_sample
        _, passed = moment_bound_check(cubic, eps, K, GRID, 10.0, 2000, 0)
        assert passed

    def test_monotone_in_K(self, ou):
        results = [moment_bound_check(ou, 1.0, K, GRID, 10.0, 500, 0)[1] for K in (0.2, 0.5, 1.0, 2.0)]
        first = results.index(True)
        assert all(results[first:])

    def test_chunked_stats_match_direct(self, ou):
        grid = TimeGrid(1.0, 20)
        curve, _ = moment_bound_check(ou, 0.5, 1.0, grid, 10.0, 300, 2)
        from smallnoise.ensemble import run_ensemble
        out = run_ensemble(ou, 0.5, grid, 300, 2, lambda c: {"s": c.result.states}, level=10.0)
        m = 1.0 + np.sum(out["s"] ** 2, axis=-1)
        np.testing.assert_allclose(curve.mean, m.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(curve.stderr, m.std(axis=0, ddof=1) / math.sqrt(300), rtol=1e-9)


class TestExceedance:
    def test_zero_diffusion(self, static):
        assert exceedance_probability(static, 0.5, 0.01, GRID, 10.0, 100, 0).mean == 0.0

    def test_pure_noise_reflection_series(self, pure_noise):
        # continuous-time P(max_{[0,1]} |W| > 2)
        assert reflection_exceed(2.0) == pytest.approx(0.0910, abs=1e-4)
        # grid monitoring sees a barrier shifted outward by 0.5826 sqrt(dt)
        oracle = reflection_exceed(2.0 + 0.5826 * math.sqrt(GRID.dt))
        est = exceedance_probability(pure_noise, 0.1, 0.2, GRID, 100.0, 20_000, 0)
        assert est.within(oracle, k=4)
        assert est.stderr == pytest.approx(math.sqrt(est.mean * (1 - est.mean) / 20_000))

    def test_monotone_in_delta(self, cubic):
        sup, _ = coupled_discrepancies(cubic, 0.3, GRID, 10.0, 2000, 0)
        probs = [np.mean(sup > d) for d in (0.05, 0.1, 0.2, 0.4)]
        assert probs == sorted(probs, reverse=True)
        direct = exceedance_probability(cubic, 0.3, 0.1, GRID, 10.0, 2000, 0).mean
        assert direct == probs[1]

    def test_halving_eps_decreases(self, ou):
        vals = [exceedance_probability(ou, e, 0.1, GRID, 10.0, 5000, 0) for e in (0.2, 0.1, 0.05)]
        assert decreasing_beyond_noise([v.mean for v in vals], [v.stderr for v in vals])

    def test_bad_delta(self, ou):
        with pytest.raises(InvalidInputError):
            exceedance_probability(ou, 0.1, 0.0, GRID, 10.0, 10, 0)


class TestGronwall:
    def test_equality_curve(self):
        t = np.linspace(0, 1, 101)
        assert gronwall_check(2 * np.exp(t), t, 2.0, 1.0)

    def test_constant_curve(self):
        t = np.linspace(0, 1, 11)
        assert gronwall_check(np.ones(11), t, 1.0, 0.0)

    def test_violation(self):
        t = np.linspace(0, 1, 11)
        assert not gronwall_check(np.exp(2 * t), t, 1.0, 1.0)

    def test_negative_curve_rejected(self):
        with pytest.raises(InvalidInputError):
            gronwall_check([-1.0, 0.0], [0.0, 1.0], 1.0, 1.0)

    def test_premise_implies_conclusion(self):
        t = np.linspace(0, 2, 401)
        m = 1 + 0.5 * t
        assert gronwall_premise_holds(m, t, 1.0, 1.0)
        assert gronwall_check(m, t, 1.0, 1.0)


class TestDecreasing:
    def test_clear_drop(self):
        assert decreasing_beyond_noise([1.0, 0.5, 0.1], [0.01, 0.01, 0.01])

    def test_drop_within_noise(self):
        assert not decreasing_beyond_noise([1.0, 0.99], [0.01, 0.01])

    def test_at_zero(self):
        assert decreasing_beyond_noise([0.5, 0.0, 0.0], [0.01, 0.0, 0.0])
