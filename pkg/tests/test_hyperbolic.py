import math
import os
import unittest

import numpy as np

from app.core.errors import NotHyperbolic, NotPseudoOrbit, RankDeficient, TooFar
from app.core.hyperbolic import (
    adapted_norm,
    expansiveness_report,
    frac,
    hyperbolic_constants,
    local_product,
    shadow_orbit,
    shortest_lattice_vector,
    stable_unstable_split,
    torus_distance,
    two_sided_horizon,
)
from app.core.lattice import (
    IntMatrix,
    integer_inverse,
    invariant_subgroup,
    is_hyperbolic,
)
from app.core.walk import IncrementMeasure

FULL = os.environ.get("AFFINE_WALKS_FULL") == "1"

PHI = (1 + math.sqrt(5)) / 2
FIBONACCI = IntMatrix.from_rows([[1, 1], [1, 0]])
CAT = IntMatrix.from_rows([[2, 1], [1, 1]])
FULL_MEASURE = IncrementMeasure.uniform([(0, 0), (1, 0), (0, 1)])


class TestSplitting(unittest.TestCase):
    def test_cat_map_eigenspaces(self):
        splitting = stable_unstable_split(CAT)
        self.assertEqual(splitting.dims, (1, 1))
        np.testing.assert_allclose(
            np.abs(splitting.unstable_eigenvalues), [PHI**2], rtol=1e-12
        )
        np.testing.assert_allclose(
            splitting.P_s + splitting.P_u, np.eye(2), atol=1e-12
        )
        self.assertLess(max(splitting.residuals()), 1e-12)

    def test_not_hyperbolic(self):
        with self.assertRaises(NotHyperbolic):
            stable_unstable_split(IntMatrix.from_rows([[1, 1], [0, 1]]))

    def test_three_dimensional_splitting(self):
        A = IntMatrix.from_rows([[0, 0, 1], [1, 0, 1], [0, 1, 0]])
        splitting = stable_unstable_split(A)
        self.assertEqual(splitting.dims, (2, 1))
        self.assertLess(max(splitting.residuals()), 1e-9)

    def test_inverse_and_transpose_swap_or_keep_the_dimensions(self):
        A = IntMatrix.from_rows([[0, 0, 1], [1, 0, 1], [0, 1, 0]])
        for M in (FIBONACCI, CAT, A):
            self.assertTrue(is_hyperbolic(integer_inverse(M)))
            self.assertTrue(is_hyperbolic(M.transpose()))
        self.assertEqual(stable_unstable_split(integer_inverse(A)).dims, (1, 2))
        self.assertEqual(stable_unstable_split(A.transpose()).dims, (2, 1))


class TestAdaptedNorm(unittest.TestCase):
    def test_symmetric_matrix_needs_no_powers(self):
        norm = adapted_norm(CAT)
        self.assertEqual(norm.l, 1)
        self.assertAlmostEqual(norm.lam, (3 - math.sqrt(5)) / 2, places=9)
        self.assertAlmostEqual(norm.norm_A, PHI**2, places=9)

    def test_contraction_on_each_factor(self):
        norm = adapted_norm(FIBONACCI)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(100, 2))
        splitting = norm.splitting
        stable = norm.stable_part(x)
        unstable = norm.unstable_part(x)
        shrunk = norm(stable @ splitting.A.T)
        self.assertTrue(np.all(shrunk <= norm.lam * norm(stable) + 1e-12))
        pulled = norm(unstable @ splitting.A_inv.T)
        self.assertTrue(np.all(pulled <= norm.lam * norm(unstable) + 1e-12))

    def test_norm_equivalence_constants(self):
        norm = adapted_norm(FIBONACCI)
        x = np.random.default_rng(1).normal(size=(500, 2))
        euclid = np.linalg.norm(x, axis=1)
        self.assertTrue(np.all(norm.c_low * euclid <= norm(x) + 1e-12))
        self.assertTrue(np.all(norm(x) <= norm.c_high * euclid + 1e-12))

    def test_wrap_around_distance(self):
        norm = adapted_norm(CAT)
        distance = torus_distance(np.array([0.9, 0.0]), np.array([0.05, 0.0]), norm)
        self.assertAlmostEqual(distance, 0.15 * norm(np.array([1.0, 0.0])), places=12)

    def test_shortest_vector_of_the_cat_map(self):
        value, vector = shortest_lattice_vector(adapted_norm(CAT))
        self.assertAlmostEqual(value, PHI / math.sqrt(1 + PHI**2), places=9)
        self.assertEqual(sum(abs(v) for v in vector), 1)


class TestConstants(unittest.TestCase):
    def test_cat_map_constants(self):
        norm = adapted_norm(CAT)
        H = invariant_subgroup(CAT, FULL_MEASURE)
        constants = hyperbolic_constants(CAT, norm, H)
        self.assertAlmostEqual(constants.c2, 2.0, places=9)
        self.assertAlmostEqual(
            constants.epsilon_c, constants.shortest_vector / (2 * PHI**2), places=9
        )
        self.assertGreater(constants.c1, 0.0)
        self.assertLess(constants.c1, 1.0)
        self.assertIn("c_low", constants.c1_derivation)

    def test_gap_lower_bound_on_dual_points(self):
        norm = adapted_norm(CAT)
        constants = hyperbolic_constants(
            CAT, norm, invariant_subgroup(CAT, FULL_MEASURE)
        )
        for n in (5, 12, 31):
            points = np.array(
                [(a, b) for a in range(n) for b in range(n) if a or b], dtype=float
            )
            distances = norm.torus_distance(points / n, np.zeros(2))
            self.assertGreaterEqual(float(distances.min()), constants.c1 / n - 1e-12)

    def test_rank_deficient_subgroup(self):
        H = invariant_subgroup(
            IntMatrix.identity(2), IncrementMeasure.uniform([(0, 0), (1, 0)])
        )
        with self.assertRaises(RankDeficient):
            hyperbolic_constants(CAT, adapted_norm(CAT), H)


class TestOrbits(unittest.TestCase):
    def setUp(self):
        self.norm = adapted_norm(CAT)
        self.epsilon = hyperbolic_constants(
            CAT, self.norm, invariant_subgroup(CAT, FULL_MEASURE)
        ).epsilon_c

    def test_expansiveness_estimate(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.random(2)
            y = frac(x + rng.normal(scale=self.epsilon / 4, size=2))
            report = expansiveness_report(x, y, CAT, self.norm, self.epsilon, 30)
            self.assertTrue(report.holds)

    def test_identical_points_stay_close(self):
        x = np.array([0.3, 0.7])
        report = expansiveness_report(x, x, CAT, self.norm, self.epsilon, 12)
        self.assertEqual(report.k_plus, 12)
        self.assertEqual(report.unstable_norm, 0.0)
        self.assertEqual(two_sided_horizon(x, x, self.norm, self.epsilon, 12), 12)

    def test_distinct_points_separate(self):
        x = np.array([0.3, 0.7])
        y = frac(x + np.array([1e-6, 0.0]))
        horizon = two_sided_horizon(x, y, self.norm, self.epsilon, 200)
        self.assertIsNotNone(horizon)
        self.assertLess(horizon, 200)

    def test_local_product_lies_on_both_leaves(self):
        x = np.array([0.2, 0.4])
        y = frac(x + np.array([0.01, -0.02]))
        z = local_product(x, y, self.epsilon, self.norm)
        from_x = self.norm.representative(z - x)
        from_y = self.norm.representative(z - y)
        np.testing.assert_allclose(self.norm.unstable_part(from_x), 0.0, atol=1e-12)
        np.testing.assert_allclose(self.norm.stable_part(from_y), 0.0, atol=1e-12)

    def test_local_product_too_far(self):
        with self.assertRaises(TooFar):
            local_product(
                np.zeros(2), np.array([0.5, 0.5]), self.epsilon / 10, self.norm
            )

    def test_shadowing_a_perturbed_orbit(self):
        rng = np.random.default_rng(4)
        alpha = 0.01
        points = [rng.random(2)]
        for _ in range(40):
            kick = rng.uniform(-1, 1, size=2) * alpha / (2 * self.norm.c_high)
            points.append(frac(CAT.to_float() @ points[-1] + kick))
        result = shadow_orbit(np.array(points), self.norm, alpha)
        self.assertLess(result.max_deviation, alpha)
        self.assertLessEqual(result.residual, result.beta)
        orbit = result.point
        for k, target in enumerate(points):
            self.assertLessEqual(
                float(self.norm.torus_distance(orbit, target)), result.beta + 1e-9
            )
            orbit = frac(CAT.to_float() @ orbit)
            if k == 15:
                break

    def test_long_pseudo_orbits(self):
        rng = np.random.default_rng(8)
        alpha = 0.05
        for _ in range(1000 if FULL else 20):
            points = self._pseudo_orbit(rng.random(2), 60, alpha / 4, rng)
            result = shadow_orbit(points, self.norm, alpha)
            self.assertTrue(np.isfinite(result.residual))
            self.assertLessEqual(result.residual, result.beta)
            start = float(self.norm.torus_distance(result.point, points[0]))
            self.assertLessEqual(start, result.beta)

    def test_true_orbit_is_its_own_shadow(self):
        orbit = self._pseudo_orbit(np.array([0.123, 0.456]), 30, 0.0, None)
        result = shadow_orbit(orbit, self.norm, 0.05)
        self.assertLess(result.residual, 1e-9)
        np.testing.assert_allclose(
            self.norm.torus_distance(result.point, orbit[0]), 0.0, atol=1e-9
        )

    def test_shadows_of_one_orbit_agree_in_the_middle(self):
        rng = np.random.default_rng(9)
        alpha = 0.05
        start = rng.random(2)
        shadows = []
        for _ in range(2):
            points = self._pseudo_orbit(start, 30, alpha / 8, rng)
            shadows.append(shadow_orbit(points, self.norm, alpha).point)
        middle = [CAT.power(15).to_float() @ point for point in shadows]
        gap = float(self.norm.torus_distance(frac(middle[0]), frac(middle[1])))
        self.assertLess(gap, 1e-6)

    def test_two_sided_closeness_bounds_the_difference(self):
        rng = np.random.default_rng(10)
        scales = np.repeat([1e-2, 1e-4, 1e-6], 334 if FULL else 10)
        for scale in scales:
            x = rng.random(2)
            y = frac(x + rng.normal(scale=scale, size=2))
            horizon = two_sided_horizon(x, y, self.norm, self.epsilon, 40)
            if horizon is None:
                continue
            v = self.norm.representative(y - x)
            limit = self.epsilon * self.norm.lam**horizon
            self.assertLessEqual(float(self.norm(v)), limit * (1 + 1e-9))

    def _pseudo_orbit(self, start, steps, kick, rng):
        """True CAT orbit with every point moved by at most `kick` in the norm."""
        exact = [np.asarray(start, dtype=float)]
        for _ in range(steps):
            exact.append(frac(CAT.to_float() @ exact[-1]))
        if not kick:
            return np.array(exact)
        noise = rng.normal(size=(steps + 1, 2))
        noise *= (kick * rng.random((steps + 1, 1))) / self.norm(noise)[:, None]
        return frac(np.array(exact) + noise)

    def test_rejects_jumps(self):
        points = np.array([[0.1, 0.1], [0.6, 0.2]])
        with self.assertRaises(NotPseudoOrbit):
            shadow_orbit(points, self.norm, 0.01)


if __name__ == "__main__":
    unittest.main()
