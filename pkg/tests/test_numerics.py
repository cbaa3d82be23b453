import math

import numpy as np
import pytest

from mgll.errors import DimensionMismatch, EmptyInput, ParseError, ZeroRow
from mgll.numerics import (
    compensated_sum,
    log_sigmoid,
    log_sum_exp,
    read_mgem,
    row_normalize,
    similarity_matrix,
    stable_softmax,
    write_mgem,
)


class TestRowNormalize:
    def test_three_four_five(self):
        out = row_normalize([[3.0, 4.0]])
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_array_equal(row_normalize(row), row)

    def test_zero_row_raises(self):
        with pytest.raises(ZeroRow):
            row_normalize([[0.0, 0.0]])

    def test_output_norms_are_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = rng.standard_normal((5, 7)) * rng.uniform(0.1, 100)
            norms = np.linalg.norm(row_normalize(m), axis=1)
            np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestSimilarityMatrix:
    def test_identical_unit_rows_unit_diagonal(self):
        a = row_normalize(np.random.default_rng(1).standard_normal((4, 6)))
        s = similarity_matrix(a, a)
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)

    def test_orthogonal_rows(self):
        a = np.eye(3)
        s = similarity_matrix(a, a)
        np.testing.assert_allclose(s, np.eye(3), atol=1e-15)

    def test_hand_dot_product(self):
        s = similarity_matrix([[0.6, 0.8]], [[1.0, 0.0]])
        assert s[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))

    def test_entries_bounded_for_unit_rows(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = row_normalize(rng.standard_normal((6, 5)))
            b = row_normalize(rng.standard_normal((4, 5)))
            s = similarity_matrix(a, b)
            assert np.all(np.abs(s) <= 1.0 + 1e-9)


class TestStableSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(stable_softmax([0.0, 0.0]), [0.5, 0.5])

    def test_single_element(self):
        np.testing.assert_allclose(stable_softmax([3.7]), [1.0])

    def test_zero_one(self):
        expected = np.array([1.0, math.e]) / (1.0 + math.e)
        np.testing.assert_allclose(stable_softmax([0.0, 1.0]), expected, atol=1e-12)
        assert stable_softmax([0.0, 1.0])[0] == pytest.approx(0.268941, abs=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = rng.standard_normal(9)
            c = rng.uniform(-500, 500)
            np.testing.assert_allclose(
                stable_softmax(z), stable_softmax(z + c), atol=1e-12
            )

    def test_sums_to_one_under_extreme_logits(self):
        p = stable_softmax([700.0, -700.0, 0.0])
        assert p.sum() == pytest.approx(1.0, abs=1e-12)

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            stable_softmax([])


class TestLogSumExp:
    def test_pair_of_zeros(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_max_shift_identity(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(
            1000.0 + math.log(2), abs=1e-9
        )

    def test_single_element(self):
        assert log_sum_exp([-4.2]) == pytest.approx(-4.2, abs=1e-15)

    def test_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            z = rng.uniform(-50, 50, size=rng.integers(1, 12))
            val = log_sum_exp(z)
            assert z.max() <= val <= z.max() + math.log(len(z)) + 1e-12

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            log_sum_exp([])


class TestLogSigmoid:
    def test_at_zero(self):
        assert log_sigmoid(0.0) == pytest.approx(-math.log(2), abs=1e-15)

    def test_deep_negative_no_overflow(self):
        val = float(log_sigmoid(-1000.0))
        assert val == pytest.approx(-1000.0, abs=1e-9)
        assert np.isfinite(val)

    def test_deep_positive_tends_to_zero(self):
        val = float(log_sigmoid(1000.0))
        assert -1e-300 <= val <= 0.0

    def test_monotone(self):
        xs = np.linspace(-30, 30, 301)
        vals = log_sigmoid(xs)
        assert np.all(np.diff(vals) > 0)


class TestCompensatedSum:
    def test_cancellation(self):
        assert compensated_sum([1e16, 1.0, -1e16]) == 1.0

    def test_empty(self):
        assert compensated_sum([]) == 0.0

    def test_many_tenths(self):
        assert compensated_sum(np.full(10**6, 0.1)) == pytest.approx(1e5, abs=1e-6)

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(5)
        values = rng.standard_normal(1000) * 10.0 ** rng.integers(-8, 8, size=1000)
        assert compensated_sum(values) == compensated_sum(values)


class TestMgem:
    def test_roundtrip(self, tmp_path):
        m = np.random.default_rng(6).standard_normal((3, 5)).astype(np.float32)
        path = tmp_path / "m.mgem"
        write_mgem(path, m.astype(np.float64))
        out = read_mgem(path)
        assert out.dtype == np.float64
        np.testing.assert_array_equal(out, m.astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mgem"
        path.write_bytes(b"NOPE" + bytes(9))
        with pytest.raises(ParseError):
            read_mgem(path)

    def test_truncated_payload(self, tmp_path):
        m = np.ones((2, 2))
        path = tmp_path / "t.mgem"
        write_mgem(path, m)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ParseError):
            read_mgem(path)

    def test_deterministic_bytes(self, tmp_path):
        m = np.random.default_rng(7).standard_normal((4, 4))
        p1, p2 = tmp_path / "a.mgem", tmp_path / "b.mgem"
        write_mgem(p1, m)
        write_mgem(p2, m)
        assert p1.read_bytes() == p2.read_bytes()
