import math

import numpy as np
import pytest

from gffpin.errors import ValidationError
from gffpin.renewal1d import (
    bridge_second_moment,
    f_pmf,
    gap_tail_rate,
    mass_1d,
    renewal_mean,
    renewal_model,
    simulate_gaps,
    solve_lambda,
    variance_1d,
)

GRID = (1.0, 0.3, 0.1, 0.03, 0.01)


class TestReturnDensity:
    def test_unit_value(self):
        assert math.isclose(f_pmf(1), 1.0 / math.sqrt(2.0 * math.pi),
                            rel_tol=1e-15)

    def test_gaussian_scaling(self):
        assert math.isclose(f_pmf(4), f_pmf(1) / 2.0, rel_tol=1e-15)

    def test_algebraic_identity(self):
        k = np.arange(1, 50)
        assert np.allclose(k * f_pmf(k) ** 2, 1.0 / (2.0 * math.pi))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            f_pmf(0)


class TestTiltSolve:
    def test_small_eps_expansion(self):
        lam = solve_lambda(0.1)
        assert abs(lam - 0.005) <= 0.1 * 0.005

    def test_collapse_at_eps_001(self):
        lam = solve_lambda(0.01)
        assert 0.9 <= 2.0 * lam / 0.01**2 <= 1.1

    @pytest.mark.parametrize("eps", GRID)
    def test_defining_equation_residual(self, eps):
        model = renewal_model(eps)
        assert model.residual() <= 1e-10

    def test_monotone_in_eps(self):
        lams = [solve_lambda(e) for e in GRID]
        assert all(a > b for a, b in zip(lams, lams[1:]))

    def test_collapse_is_monotone(self):
        ratios = [2.0 * solve_lambda(e) / e**2 for e in GRID]
        gaps = [abs(r - 1.0) for r in ratios]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))

    def test_explicit_kmax_must_cover_tail(self):
        with pytest.raises(ValidationError):
            solve_lambda(0.1, k_max=50)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValidationError):
            solve_lambda(0.0)


class TestRenewalMean:
    def test_cubic_scaling(self):
        model = renewal_model(0.01)
        assert 0.8 <= renewal_mean(model) * 0.01**3 <= 1.2

    def test_finite_at_eps_one(self):
        m = renewal_mean(renewal_model(1.0))
        assert 0.0 < m < math.inf

    def test_increases_as_eps_shrinks(self):
        means = [renewal_mean(renewal_model(e)) for e in (0.3, 0.1, 0.03)]
        assert means[0] < means[1] < means[2]


class TestVariance:
    def test_bridge_term(self):
        assert bridge_second_moment(1, 2) == 0.5

    def test_quadratic_scaling(self):
        model = renewal_model(0.01)
        assert 0.8 <= variance_1d(model) * 2.0 * 0.01**2 <= 1.2

    def test_collapse_monotone(self):
        vals = [variance_1d(renewal_model(e)) * 2.0 * e * e for e in GRID]
        gaps = [abs(v - 1.0) for v in vals]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))

    def test_eps_halving_ratio(self):
        v1 = variance_1d(renewal_model(0.1))
        v2 = variance_1d(renewal_model(0.05))
        assert abs(v2 / v1 - 4.0) <= 0.15 * 4.0


class TestMass:
    def test_equals_tilt(self):
        assert mass_1d(0.05) == solve_lambda(0.05)

    def test_expansion_window(self):
        lam = mass_1d(0.01)
        assert 0.9 <= 2.0 * lam / 0.01**2 <= 1.1

    def test_gap_tail_cross_check(self):
        model = renewal_model(0.1)
        gaps = simulate_gaps(model, 200_000, seed=3)
        rate, se = gap_tail_rate(gaps)
        assert abs(rate - model.lam) <= 2.0 * se

    def test_gap_sampler_deterministic(self):
        model = renewal_model(0.3)
        a = simulate_gaps(model, 1000, seed=5)
        b = simulate_gaps(model, 1000, seed=5)
        assert np.array_equal(a, b)
