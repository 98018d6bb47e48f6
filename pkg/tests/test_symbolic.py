import math
import os
import unittest

import numpy as np

from app.core.errors import (
    DiameterTooLarge,
    DimensionUnsupported,
    DomainError,
    EmptyIntersection,
)
from app.core.fourier import bad_set_W
from app.core.hyperbolic import adapted_norm, hyperbolic_constants
from app.core.lattice import IntMatrix, invariant_subgroup
from app.core.symbolic import (
    LemmaReport,
    MarkovPartition,
    Rectangle,
    SymbolicWindow,
    admissible_words,
    block_length,
    block_statistics,
    box_adjacency,
    build_partition_2d,
    classify_rectangles,
    code_point,
    decode_word,
    delta0,
    distance_to_W,
    lemma_block_checks,
    lemma_threshold,
    perron_root,
    topological_entropy,
    unit_torus,
    verify_markov,
)
from app.core.tolerances import TAU_AREA
from app.core.walk import IncrementMeasure

FULL = os.environ.get("AFFINE_WALKS_FULL") == "1"

PHI = (1 + math.sqrt(5)) / 2
CAT = IntMatrix.from_rows([[2, 1], [1, 1]])
FULL_MEASURE = IncrementMeasure.uniform([(0, 0), (1, 0), (0, 1)])


class TestPartition(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.norm = adapted_norm(CAT)
        cls.partition = build_partition_2d(CAT, 0.3)

    def test_rectangles_tile_the_torus(self):
        self.assertAlmostEqual(self.partition.total_volume, 1.0, places=9)
        self.assertLessEqual(self.partition.diameter, 0.3)
        self.assertLessEqual(int(self.partition.transition_counts.max()), 1)

    def test_entropy_matches_the_expanding_eigenvalue(self):
        root = perron_root(self.partition.adjacency)
        self.assertAlmostEqual(root, PHI**2, places=6)
        self.assertAlmostEqual(
            topological_entropy(self.partition), 2 * math.log(PHI), places=6
        )

    def test_markov_axioms_hold(self):
        samples = 1000 if FULL else 40
        report = verify_markov(self.partition, self.norm, samples=samples, seed=1)
        self.assertTrue(report.accepted, report.reason)
        self.assertGreater(report.samples_checked, 0)

    def test_missing_rectangle_is_rejected(self):
        partial = MarkovPartition(
            rectangles=self.partition.rectangles[1:],
            adjacency=self.partition.adjacency[1:, 1:],
            diameter=self.partition.diameter,
            matrix=CAT,
        )
        report = verify_markov(partial, self.norm, samples=20, seed=1)
        self.assertFalse(report.accepted)
        self.assertIn("cover defect", report.reason)
        self.assertGreater(report.coverage_error, 1e-9)

    def test_repeated_rectangle_is_rejected(self):
        rects = self.partition.rectangles
        doubled = MarkovPartition(
            rectangles=rects + (rects[0],),
            adjacency=np.pad(self.partition.adjacency, ((0, 1), (0, 1))),
            diameter=self.partition.diameter,
            matrix=CAT,
        )
        report = verify_markov(doubled, self.norm, samples=20, seed=1)
        self.assertFalse(report.accepted)
        self.assertIn("overlap", report.reason)

    def test_diameter_precondition(self):
        report = verify_markov(self.partition, self.norm, epsilon=1e-3)
        self.assertFalse(report.accepted)
        self.assertIn("epsilon", report.reason)

    def test_refinement_shrinks_rectangles(self):
        diameters = self.partition.refinement_diameters
        self.assertEqual(diameters[-1], self.partition.diameter)
        for before, after in zip(diameters, diameters[1:]):
            self.assertLessEqual(after, before + 1e-12)

    def test_adjacency_is_stable_under_a_smaller_area_threshold(self):
        halved = box_adjacency(self.partition, tau_area=TAU_AREA / 2)
        np.testing.assert_array_equal(halved > 0, self.partition.adjacency > 0)

    def test_every_point_is_located(self):
        points = np.random.default_rng(2).random((300, 2))
        self.assertTrue(all(self.partition.locate(points)))

    def test_sheared_rectangle_is_rejected(self):
        square = Rectangle(
            id=0,
            anchor=np.zeros(2),
            stable_edge=np.array([0.5, 0.0]),
            unstable_edge=np.array([0.0, 0.5]),
        )
        partition = MarkovPartition(
            rectangles=(square,),
            adjacency=np.ones((1, 1), dtype=np.int64),
            diameter=0.5,
            matrix=CAT,
        )
        with self.assertRaises(DimensionUnsupported):
            box_adjacency(partition)

    def test_higher_dimensions_unsupported(self):
        A = IntMatrix.from_rows([[0, 0, 1], [1, 0, 1], [0, 1, 0]])
        with self.assertRaises(DimensionUnsupported):
            build_partition_2d(A, 0.3)


class TestCoding(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.norm = adapted_norm(CAT)
        cls.partition = build_partition_2d(CAT, 0.3)

    def test_admissible_words_follow_the_adjacency(self):
        adjacency = np.array([[1, 1], [1, 0]])
        words = admissible_words([[0, 1], [0, 1], [0, 1]], adjacency)
        self.assertEqual(len(words), 5)
        self.assertNotIn((1, 1, 0), words)

    def test_shift_equivariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            xi = rng.random(2)
            here = code_point(xi, self.partition, CAT, 4)
            there = code_point(unit_torus(CAT.to_float() @ xi), self.partition, CAT, 4)
            if here.ambiguous or there.ambiguous:
                continue
            self.assertEqual(here.word[1:], there.word[:-1])

    def test_decoding_at_scale(self):
        rng = np.random.default_rng(12)
        K = 5
        bound = self.partition.diameter * self.norm.lam**K
        for xi in rng.random((1000 if FULL else 100, 2)):
            window = code_point(xi, self.partition, CAT, K)
            decoded = decode_word(window, self.partition, CAT)
            self.assertLessEqual(decoded.radius, bound + 1e-12)
            error = float(self.norm.torus_distance(decoded.point, xi))
            self.assertLessEqual(error, decoded.radius + 1e-9)

    def test_longer_windows_decode_tighter(self):
        xi = np.array([0.3141, 0.2718])
        short = decode_word(code_point(xi, self.partition, CAT, 2), self.partition, CAT)
        long = decode_word(code_point(xi, self.partition, CAT, 8), self.partition, CAT)
        self.assertLess(long.radius, short.radius)

    def test_fixed_point_has_constant_words(self):
        window = code_point(np.zeros(2), self.partition, CAT, 3)
        self.assertTrue(window.ambiguous)
        self.assertTrue(any(len(set(word)) == 1 for word in window.words))

    def test_inadmissible_word(self):
        forbidden = np.argwhere(self.partition.adjacency == 0)
        if not len(forbidden):
            self.skipTest("complete adjacency")
        a, b = forbidden[0]
        bad = SymbolicWindow(((int(a), int(b)),), 0)
        with self.assertRaises(EmptyIntersection):
            decode_word(bad, self.partition, CAT)

    def test_negative_window(self):
        with self.assertRaises(DomainError):
            code_point(np.zeros(2), self.partition, CAT, -1)


class TestBlocks(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.norm = adapted_norm(CAT)
        H = invariant_subgroup(CAT, FULL_MEASURE)
        cls.constants = hyperbolic_constants(CAT, cls.norm, H)
        cls.W = bad_set_W(H, CAT)
        cls.bound = delta0(cls.W, cls.norm, cls.constants.epsilon_c)
        cls.partition = build_partition_2d(CAT, 0.9 * cls.bound)
        cls.classification = classify_rectangles(cls.partition, cls.W, cls.bound)

    def test_delta0_with_a_single_bad_point(self):
        self.assertEqual(self.bound, self.constants.epsilon_c)

    def test_classification(self):
        classification = self.classification
        self.assertGreater(classification.m0, 0)
        self.assertGreater(classification.m1, 0)
        self.assertEqual(classification.m0 + classification.m1, self.partition.m)
        self.assertEqual(
            set(classification.R0) | set(classification.R1),
            set(range(self.partition.m)),
        )

    def test_partition_must_be_finer_than_delta0(self):
        with self.assertRaises(DiameterTooLarge):
            classify_rectangles(self.partition, self.W, self.partition.diameter)

    def test_R1_keeps_away_from_W(self):
        eta = distance_to_W(self.partition, self.classification, self.W, self.norm)
        self.assertGreater(eta, 0.0)
        rng = np.random.default_rng(7)
        for index in self.classification.R1[:5]:
            rect = self.partition.rectangles[index]
            points = unit_torus(rect.sample_interior(rng, 50))
            distances = self.norm.torus_distance(points, np.zeros(2))
            self.assertGreaterEqual(float(distances.min()), eta - 1e-9)

    def test_block_length(self):
        # c2 = 2 and lambda = phi^-2 for the cat map
        self.assertEqual(block_length(self.constants, 10), 6)

    def test_block_statistics(self):
        report = block_statistics(
            (1, 2), 10, self.partition, self.constants, 2, self.classification
        )
        self.assertEqual(len(report.blocks), 2)
        self.assertTrue(all(len(block) == report.k for block in report.blocks))
        self.assertTrue(all(0 <= g <= report.k for g in report.g_counts))
        self.assertEqual(report.g, sum(report.g_counts))
        with self.assertRaises(DomainError):
            block_statistics(
                (0, 10), 10, self.partition, self.constants, 2, self.classification
            )

    def test_lemma_checks_on_a_small_modulus(self):
        report = lemma_block_checks(
            7, self.partition, self.constants, self.classification
        )
        self.assertEqual(report.n, 7)
        self.assertEqual(report.k, block_length(self.constants, 7))
        self.assertTrue(report.block_multisets_equal)

    def test_lemma_holds_on_the_real_partition(self):
        reports = [
            lemma_block_checks(n, self.partition, self.constants, self.classification)
            for n in range(2, 13)
        ]
        for report in reports:
            with self.subTest(n=report.n):
                self.assertTrue(report.first_blocks_hit_R1)
                self.assertTrue(report.first_blocks_distinct)
        self.assertIsNotNone(lemma_threshold(reports))
        self.assertTrue(reports[-1].holds)

    def test_holds_needs_equal_multisets(self):
        self.assertTrue(LemmaReport(9, 4, True, True, True).holds)
        self.assertFalse(LemmaReport(9, 4, True, True, False).holds)

    def test_threshold(self):
        def report(n, holds):
            return LemmaReport(n, 5, holds, holds, True)

        reports = [report(5, False), report(6, True), report(7, True)]
        self.assertEqual(lemma_threshold(reports), 6)
        self.assertIsNone(lemma_threshold(reports + [report(8, False)]))


if __name__ == "__main__":
    unittest.main()
