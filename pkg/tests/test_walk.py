import math
import os
import unittest
from fractions import Fraction

import numpy as np

from app.core.errors import BudgetExceeded, DomainError
from app.core.fourier import l2_bound
from app.core.lattice import IntMatrix
from app.core.walk import (
    IncrementMeasure,
    WalkConfig,
    empirical_distribution,
    empirical_tv,
    entropy_lower_bound,
    evolve_distribution,
    exact_distribution,
    fannes_audenaert_gap,
    mixing_time,
    shannon_entropy,
    simulate_walk,
    splitmix64,
    state_count,
    transition_graph_ergodicity,
    tv_to_uniform,
)

FULL = os.environ.get("AFFINE_WALKS_FULL") == "1"

FIBONACCI = IntMatrix.from_rows([[1, 1], [1, 0]])
CAT = IntMatrix.from_rows([[2, 1], [1, 1]])
LAZY = IncrementMeasure.uniform([(0, 0), (1, 0), (-1, 0)])


class TestIncrementMeasure(unittest.TestCase):
    def test_rational_weights_must_sum_to_one(self):
        with self.assertRaises(DomainError):
            IncrementMeasure.from_pairs([(0, 0), (1, 0)], [Fraction(1, 3)] * 2)

    def test_float_weights_tolerance(self):
        mu = IncrementMeasure.from_pairs([(0,), (1,)], [0.25, 0.75])
        self.assertFalse(mu.exact)
        with self.assertRaises(DomainError):
            IncrementMeasure.from_pairs([(0,), (1,)], [0.25, 0.7])

    def test_duplicate_points_rejected(self):
        with self.assertRaises(DomainError):
            IncrementMeasure.uniform([(0, 0), (0, 0)])

    def test_entropy(self):
        self.assertAlmostEqual(LAZY.entropy, math.log(3), places=12)
        self.assertEqual(IncrementMeasure.dirac((1, 2)).entropy, 0.0)


class TestExactEvolution(unittest.TestCase):
    def test_start_is_a_point_mass(self):
        for n in (3, 5, 8):
            p0 = exact_distribution(FIBONACCI, LAZY, n, 0)
            self.assertAlmostEqual(tv_to_uniform(p0), 1 - n**-2, places=12)

    def test_mass_is_conserved_and_tv_decreases(self):
        previous = 1.0
        for t, p in enumerate(evolve_distribution(FIBONACCI, LAZY, 7)):
            self.assertAlmostEqual(float(p.probabilities.sum()), 1.0, places=12)
            tv = tv_to_uniform(p)
            self.assertLessEqual(tv, previous + 1e-12)
            previous = tv
            if t == 40:
                break
        self.assertLess(previous, 1e-3)

    def test_one_step_by_hand(self):
        p1 = exact_distribution(FIBONACCI, LAZY, 5, 1).grid()
        expected = np.zeros((5, 5))
        for x in (0, 1, 4):
            expected[x, 0] = 1 / 3
        np.testing.assert_allclose(p1, expected, atol=1e-15)

    def test_budget(self):
        with self.assertRaises(BudgetExceeded):
            state_count(1000, 3, cap=10**6)
        with self.assertRaises(BudgetExceeded):
            exact_distribution(FIBONACCI, LAZY, 100, 1, cap=1000)


class TestBounds(unittest.TestCase):
    def test_sandwich_on_small_moduli(self):
        for n in range(5, 12):
            for t, p in enumerate(evolve_distribution(FIBONACCI, LAZY, n)):
                tv = tv_to_uniform(p)
                lower = entropy_lower_bound(LAZY, n, 2, t, "derived").clamped
                upper = l2_bound(LAZY, FIBONACCI, n, t).tv_bound
                self.assertLessEqual(lower, tv + 1e-9, msg=f"n={n}, t={t}")
                self.assertLessEqual(tv, upper + 1e-9, msg=f"n={n}, t={t}")
                if t == 20:
                    break

    def test_entropy_grows_at_most_by_the_increment_entropy(self):
        n = 11
        for t, p in enumerate(evolve_distribution(CAT, LAZY, n)):
            entropy = shannon_entropy(p)
            self.assertLessEqual(entropy, t * LAZY.entropy + 1e-9, msg=f"t={t}")
            self.assertLessEqual(entropy, 2 * math.log(n) + 1e-9)
            if t == 10:
                break

    def test_lower_bound_modes(self):
        derived = entropy_lower_bound(LAZY, 50, 2, 3, "derived")
        literal = entropy_lower_bound(LAZY, 50, 2, 3, "paper-literal")
        self.assertGreaterEqual(derived.raw, literal.raw)
        self.assertEqual(literal.clamped, max(0.0, literal.raw))
        with self.assertRaises(ValueError):
            entropy_lower_bound(LAZY, 50, 2, 3, "other")

    def test_lower_bound_at_time_zero(self):
        bound = entropy_lower_bound(LAZY, 16, 2, 0)
        self.assertAlmostEqual(bound.raw, 1 - math.log(2) / (2 * math.log(16)))

    def test_fannes_audenaert_gap(self):
        N = 64
        self.assertEqual(fannes_audenaert_gap(0.0, N), 0.0)
        self.assertAlmostEqual(fannes_audenaert_gap(math.log(N), N), (N - 1) / N)
        eps = fannes_audenaert_gap(1.5, N)
        h = -eps * math.log(eps) - (1 - eps) * math.log(1 - eps)
        self.assertAlmostEqual(eps * math.log(N - 1) + h, 1.5, places=10)
        self.assertLess(fannes_audenaert_gap(1.0, N), eps)
        with self.assertRaises(DomainError):
            fannes_audenaert_gap(10.0, N)


class TestSimulation(unittest.TestCase):
    def test_reproducible_and_thread_independent(self):
        config = WalkConfig(FIBONACCI, LAZY, 11, 12, seed=5, replicates=10_000)
        single = simulate_walk(config, threads=1)
        pooled = simulate_walk(config, threads=4)
        np.testing.assert_array_equal(single, pooled)
        np.testing.assert_array_equal(single, simulate_walk(config))

    def test_seed_changes_paths(self):
        first = simulate_walk(WalkConfig(CAT, LAZY, 11, 6, seed=1, replicates=500))
        second = simulate_walk(WalkConfig(CAT, LAZY, 11, 6, seed=2, replicates=500))
        self.assertFalse(np.array_equal(first, second))

    def test_empirical_tv_of_a_point_mass(self):
        states = np.zeros((10, 2), dtype=np.int64)
        self.assertAlmostEqual(empirical_tv(states, 3), 8 / 9)

    def test_monte_carlo_close_to_exact(self):
        n, t = 7, 20
        replicates = 10**6 if FULL else 20_000
        states = simulate_walk(WalkConfig(FIBONACCI, LAZY, n, t, 3, replicates))
        exact = tv_to_uniform(exact_distribution(FIBONACCI, LAZY, n, t))
        tolerance = 3 * math.sqrt(n**2 / replicates)
        self.assertLess(abs(empirical_tv(states, n) - exact), tolerance)

    def test_replicate_paths_ignore_the_replicate_count(self):
        few = simulate_walk(WalkConfig(CAT, LAZY, 13, 9, seed=4, replicates=10))
        many = simulate_walk(WalkConfig(CAT, LAZY, 13, 9, seed=4, replicates=5000))
        np.testing.assert_array_equal(few, many[:10])

    def test_empirical_distribution_matches_exact(self):
        n, t = 5, 6
        replicates = 10**6 if FULL else 20_000
        states = simulate_walk(WalkConfig(FIBONACCI, LAZY, n, t, 8, replicates))
        empirical = empirical_distribution(states, n)
        self.assertEqual(empirical.size, n**2)
        self.assertAlmostEqual(float(empirical.probabilities.sum()), 1.0, places=12)
        exact = exact_distribution(FIBONACCI, LAZY, n, t)
        gap = 0.5 * np.abs(empirical.probabilities - exact.probabilities).sum()
        self.assertLess(gap, 0.05)

    def test_float_weights_are_sampled_in_proportion(self):
        mu = IncrementMeasure.from_pairs([(0, 0), (1, 0), (0, 1)], [0.5, 0.25, 0.25])
        states = simulate_walk(WalkConfig(CAT, mu, 7, 1, 2, 40_000))
        empirical = empirical_distribution(states, 7)
        exact = exact_distribution(CAT, mu, 7, 1)
        np.testing.assert_allclose(
            empirical.probabilities, exact.probabilities, atol=0.02
        )

    def test_non_unimodular_matrix_rejected(self):
        with self.assertRaises(DomainError):
            WalkConfig(IntMatrix.from_rows([[2, 0], [0, 1]]), LAZY, 5, 3)

    def test_splitmix64_reference_value(self):
        self.assertEqual(splitmix64(0), 0xE220A8397B1DCDAF)


class TestErgodicity(unittest.TestCase):
    def test_fibonacci_walk_is_ergodic(self):
        report = transition_graph_ergodicity(FIBONACCI, LAZY, 7)
        self.assertTrue(report.irreducible)
        self.assertEqual(report.period, 1)
        self.assertTrue(report.converges)

    def test_parity_walk_is_periodic(self):
        mu = IncrementMeasure.uniform([(1, 0), (-1, 0), (0, 1), (0, -1)])
        report = transition_graph_ergodicity(IntMatrix.identity(2), mu, 4)
        self.assertTrue(report.irreducible)
        self.assertEqual(report.period, 2)
        self.assertFalse(report.converges)

    def test_confined_walk_is_reducible(self):
        mu = IncrementMeasure.uniform([(0, 0), (1, 0)])
        report = transition_graph_ergodicity(IntMatrix.identity(2), mu, 5)
        self.assertFalse(report.irreducible)


class TestMixingTime(unittest.TestCase):
    def test_first_crossing(self):
        n = 9
        result = mixing_time(FIBONACCI, LAZY, n, 0.25, 200)
        self.assertIsNotNone(result.t_mix)
        self.assertLessEqual(result.tv, 0.25)
        before = exact_distribution(FIBONACCI, LAZY, n, result.t_mix - 1)
        self.assertGreater(tv_to_uniform(before), 0.25)

    def test_looser_target_never_takes_longer(self):
        strict = mixing_time(FIBONACCI, LAZY, 13, 0.1, 300).t_mix
        loose = mixing_time(FIBONACCI, LAZY, 13, 0.2, 300).t_mix
        self.assertLessEqual(loose, strict)

    def test_cap_reached(self):
        result = mixing_time(FIBONACCI, LAZY, 31, 0.01, 2)
        self.assertIsNone(result.t_mix)
        self.assertGreater(result.tv, 0.01)


if __name__ == "__main__":
    unittest.main()
