"""Hockey-stick quadrature oracle and the adaptivity counterexample."""

import math

import numpy as np
import pytest

from corrdp.gaussian import GaussianMechanismSpec, analytic_delta
from corrdp.oracle import (
    LowDimPair,
    QuadratureError,
    adaptivity_counterexample_check,
    hockey_stick_quadrature,
    mixture_pair_for_modes,
)
from corrdp.strategies import ParticipationSchema, identity, mode_vectors

from helpers import grid_hockey_stick

SINGLE_UNIT = LowDimPair(np.array([[1.0]]), np.array([1.0]), 1.0)


class TestLowDimPair:
    def test_validation(self):
        with pytest.raises(ValueError, match="weight"):
            LowDimPair(np.ones((2, 2)), np.array([1.0]), 1.0)
        with pytest.raises(ValueError, match="sum"):
            LowDimPair(np.ones((2, 2)), np.array([0.5, 0.6]), 1.0)
        with pytest.raises(ValueError, match="sigma"):
            LowDimPair(np.ones((1, 1)), np.array([1.0]), 0.0)
        with pytest.raises(ValueError, match="modes"):
            LowDimPair(np.ones((5, 2)), np.full(5, 0.2), 1.0)

    def test_effective_dim_is_span_rank(self):
        pair = LowDimPair(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
                          np.array([0.5, 0.5]), 1.0)
        assert pair.effective_dim == 1


class TestHockeyStick:
    def test_alpha_zero_is_total_mass(self):
        assert hockey_stick_quadrature(SINGLE_UNIT, 0.0) == 1.0

    def test_identical_distributions_at_alpha_one(self):
        pair = LowDimPair(np.zeros((2, 3)), np.array([0.5, 0.5]), 1.0)
        assert hockey_stick_quadrature(pair, 1.0) == 0.0

    @pytest.mark.parametrize("eps", [0.25, 1.0, 3.0])
    def test_single_mode_matches_analytic_gaussian(self, eps):
        got = hockey_stick_quadrature(SINGLE_UNIT, math.exp(eps))
        want = analytic_delta(eps, GaussianMechanismSpec(1.0, 1.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_reference_value_at_alpha_e(self):
        got = hockey_stick_quadrature(SINGLE_UNIT, math.e)
        assert got == pytest.approx(0.126936737507, abs=1e-6)

    def test_swap_equals_forward_for_symmetric_pair(self):
        # A single Gaussian against a Gaussian is symmetric under reflection.
        forward = hockey_stick_quadrature(SINGLE_UNIT, math.e)
        swapped = hockey_stick_quadrature(SINGLE_UNIT, math.e, swap=True)
        assert swapped == pytest.approx(forward, abs=1e-10)

    def test_sigma_rescaling_invariance(self):
        pair_a = LowDimPair(np.array([[0.8, 0.3], [0.1, 0.9]]),
                            np.array([0.5, 0.5]), 1.0)
        pair_b = LowDimPair(3.0 * pair_a.modes, pair_a.weights, 3.0)
        for alpha in (0.5, 1.0, math.e):
            assert hockey_stick_quadrature(pair_a, alpha) == pytest.approx(
                hockey_stick_quadrature(pair_b, alpha), abs=1e-10)

    def test_nonincreasing_in_alpha_and_bounded(self):
        pair = LowDimPair(np.array([[1.0, 0.2], [0.4, 0.7], [0.0, 1.1]]),
                          np.array([0.3, 0.3, 0.4]), 0.9)
        values = [hockey_stick_quadrature(pair, a)
                  for a in np.linspace(0.0, 6.0, 15)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("seed,num_modes", [(0, 2), (1, 3), (2, 3)])
    def test_agrees_with_midpoint_grid(self, seed, num_modes):
        rng = np.random.default_rng(seed)
        modes = rng.uniform(-1.0, 1.5, (num_modes, num_modes))
        weights = np.full(num_modes, 1.0 / num_modes)
        pair = LowDimPair(modes, weights, 1.1)
        for alpha in (0.7, 2.0):
            exact = hockey_stick_quadrature(pair, alpha)
            coarse = grid_hockey_stick(modes, weights, 1.1, alpha,
                                       points_per_axis=220 if num_modes < 3 else 120)
            assert exact == pytest.approx(coarse, abs=5e-4)

    def test_four_dimensional_pair(self):
        # Rank-4 span exercises the spherical rule; cross-check on a product
        # pair whose divergence factorizes is unavailable, so compare with MC.
        rng = np.random.default_rng(5)
        modes = rng.uniform(0.0, 0.8, (4, 4))
        pair = LowDimPair(modes, np.full(4, 0.25), 1.0)
        assert pair.effective_dim == 4
        exact = hockey_stick_quadrature(pair, math.exp(0.5), tol=1e-7)
        samples = 400_000
        z = rng.standard_normal((samples, 4))
        idx = rng.integers(0, 4, samples)
        x = modes[idx] + z
        sq = 0.5 * (modes * modes).sum(axis=1)
        scores = x @ modes.T - sq[None, :]
        peak = scores.max(axis=1)
        log_ratio = peak + np.log(np.exp(scores - peak[:, None]).mean(axis=1))
        terms = np.maximum(1.0 - np.exp(0.5 - log_ratio), 0.0)
        se = terms.std(ddof=1) / math.sqrt(samples)
        assert abs(terms.mean() - exact) < 4.0 * se

    def test_zero_weight_modes_are_dropped(self):
        pair = LowDimPair(np.array([[1.0], [50.0]]), np.array([1.0, 0.0]), 1.0)
        got = hockey_stick_quadrature(pair, math.e)
        assert got == pytest.approx(0.126936737507, abs=1e-9)

    def test_dimension_limit_enforced(self):
        pair = mixture_pair_for_modes(np.eye(5)[:, :4], 1.0)
        assert pair.effective_dim == 4
        with pytest.raises(ValueError):
            LowDimPair(np.eye(5), np.full(5, 0.2), 1.0)

    def test_rejects_negative_alpha(self):
        with pytest.raises(ValueError):
            hockey_stick_quadrature(SINGLE_UNIT, -0.5)

    @pytest.mark.parametrize("dim", [1, 2, 3, 4])
    def test_angular_rule_reproduces_gaussian_mass(self, dim):
        # Radial closed forms + angular weights must integrate a full
        # Gaussian to exactly 1; validates every piece but the root find.
        from corrdp.oracle import _radial_moment, _sphere_rule

        rng = np.random.default_rng(dim)
        center = rng.uniform(-2.0, 2.0, dim)
        dirs, weights = _sphere_rule(dim, 3)
        along = dirs @ center
        perp = ((center[None, :] - along[:, None] * dirs) ** 2).sum(axis=1)
        radial = _radial_moment(dim - 1,
                                np.full(len(weights), np.linalg.norm(center) + 40.0),
                                along)
        mass = (2 * math.pi) ** (-dim / 2) * float(
            weights @ (np.exp(-0.5 * perp) * radial))
        assert mass == pytest.approx(1.0, abs=1e-12)


class TestCounterexample:
    def test_opposed_signs_dominate_strictly(self):
        for sigma in (0.5, 1.0, 2.0):
            opposed, aligned = adaptivity_counterexample_check(sigma, math.exp(0.5))
            assert opposed > aligned

    def test_pinned_values_at_unit_sigma(self):
        opposed, aligned = adaptivity_counterexample_check(1.0, math.exp(0.5))
        assert opposed == pytest.approx(0.2875844946, abs=1e-6)
        assert aligned == pytest.approx(0.1797198915, abs=1e-6)

    def test_alpha_zero_gives_total_masses(self):
        assert adaptivity_counterexample_check(1.0, 0.0) == (1.0, 1.0)

    def test_huge_sigma_flattens_both(self):
        alpha = math.exp(0.5)
        opposed, aligned = adaptivity_counterexample_check(200.0, alpha)
        # Both approach max(1 - alpha, 0) = 0.
        assert opposed < 1e-2 and aligned < 1e-2

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            adaptivity_counterexample_check(0.0, 1.0)
