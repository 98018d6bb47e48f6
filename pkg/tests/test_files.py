import json
import os
import tempfile
import unittest
from fractions import Fraction

import numpy as np

from app.core.errors import InputError
from app.core.hyperbolic import adapted_norm
from app.core.lattice import IntMatrix
from app.core.symbolic import MarkovPartition, build_partition_2d
from app.formats.files import (
    TV_COLUMNS,
    dump_json,
    load_matrix,
    load_measure,
    load_partition,
    partition_to_json,
    render_partition_svg,
    write_csv,
)

CAT = IntMatrix.from_rows([[2, 1], [1, 1]])


class FileTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)

    def write(self, name, payload):
        path = os.path.join(self._tmp.name, name)
        with open(path, "w", encoding="utf-8") as handle:
            if isinstance(payload, str):
                handle.write(payload)
            else:
                json.dump(payload, handle)
        return path


class TestMatrixFile(FileTestCase):
    def test_load(self):
        path = self.write("fib.json", {"d": 2, "rows": [[1, 1], [1, 0]]})
        self.assertEqual(load_matrix(path).rows, ((1, 1), (1, 0)))

    def test_not_square(self):
        path = self.write("bad.json", {"d": 2, "rows": [[1, 1, 0], [1, 0, 0]]})
        with self.assertRaises(InputError):
            load_matrix(path)

    def test_missing_and_malformed(self):
        with self.assertRaises(InputError):
            load_matrix(os.path.join(self._tmp.name, "absent.json"))
        with self.assertRaises(InputError):
            load_matrix(self.write("broken.json", "{not json"))


class TestMeasureFile(FileTestCase):
    def test_rational_weights(self):
        path = self.write(
            "mu.json",
            [
                {"point": [0, 0], "prob": "1/2"},
                {"point": [1, 0], "prob": "1/4"},
                {"point": [0, 1], "prob": "1/4"},
            ],
        )
        mu = load_measure(path)
        self.assertTrue(mu.exact)
        self.assertEqual(mu.dimension, 2)
        self.assertEqual(sum(mu.weights), Fraction(1))

    def test_float_weights(self):
        path = self.write(
            "mu.json", [{"point": [0], "prob": 0.5}, {"point": [1], "prob": 0.5}]
        )
        self.assertFalse(load_measure(path).exact)

    def test_invalid_measures(self):
        cases = {
            "sum.json": [{"point": [0], "prob": "1/3"}, {"point": [1], "prob": "1/3"}],
            "text.json": [{"point": [0], "prob": "one"}],
            "object.json": {"point": [0], "prob": 1.0},
            "empty.json": [{"point": [], "prob": 1.0}],
        }
        for name, payload in cases.items():
            with self.subTest(name=name), self.assertRaises(InputError):
                load_measure(self.write(name, payload))


class TestPartitionFile(FileTestCase):
    @classmethod
    def setUpClass(cls):
        cls.norm = adapted_norm(CAT)
        cls.partition = build_partition_2d(CAT, 0.5)

    def test_round_trip(self):
        path = self.write("partition.json", partition_to_json(self.partition))
        loaded = load_partition(path, CAT, self.norm)
        self.assertEqual(loaded.m, self.partition.m)
        np.testing.assert_array_equal(loaded.adjacency, self.partition.adjacency)
        self.assertAlmostEqual(loaded.total_volume, 1.0, places=9)

    def test_missing_adjacency_is_recomputed(self):
        payload = partition_to_json(self.partition)
        del payload["adjacency"]
        loaded = load_partition(self.write("bare.json", payload), CAT, self.norm)
        np.testing.assert_array_equal(loaded.adjacency, self.partition.adjacency)
        self.assertIsNotNone(loaded.transition_counts)

    def test_ids_must_be_ordered(self):
        payload = partition_to_json(self.partition)
        payload["rectangles"][0]["id"] = 99
        with self.assertRaises(InputError):
            load_partition(self.write("ids.json", payload), CAT, self.norm)

    def test_adjacency_shape(self):
        payload = partition_to_json(self.partition)
        payload["adjacency"] = [[1]]
        with self.assertRaises(InputError):
            load_partition(self.write("shape.json", payload), CAT, self.norm)

    def test_svg(self):
        svg = render_partition_svg(self.partition, np.array([[0.1, 0.2], [0.4, 0.3]]))
        self.assertIn("<svg", svg)

    def test_svg_needs_two_dimensions(self):
        cube = MarkovPartition(
            rectangles=(),
            adjacency=np.zeros((0, 0), dtype=np.int64),
            diameter=0.0,
            matrix=IntMatrix.identity(3),
        )
        with self.assertRaises(InputError):
            render_partition_svg(cube)


class TestWriters(unittest.TestCase):
    def test_csv_column_order_and_blanks(self):
        row = {"t": 0, "n": 5, "d": 2, "tv_exact": 0.96, "tv_mc": None}
        text = write_csv([row], TV_COLUMNS)
        header, line = text.splitlines()
        self.assertEqual(header, "n,d,t,tv_exact,tv_mc,lower_bound,l2_bound")
        self.assertEqual(line, "5,2,0,0.96,,,")

    def test_json_is_stable(self):
        text = dump_json({"b": 1, "a": [1, 2]})
        self.assertTrue(text.endswith("\n"))
        self.assertLess(text.index('"a"'), text.index('"b"'))
        self.assertEqual(json.loads(text), {"a": [1, 2], "b": 1})


if __name__ == "__main__":
    unittest.main()
