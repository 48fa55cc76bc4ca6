import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softknn_ensemble.numerics import (
    as_matrix,
    as_vector,
    cosine_similarity,
    draw_standard_normal,
    l2_normalize,
    log_sum_exp,
    make_rng,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False,
                          allow_infinity=False)


class TestValidation:
    def test_as_vector_rejects_empty(self):
        with pytest.raises(ValueError, match="non-empty"):
            as_vector([])

    def test_as_vector_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_vector([1.0, np.nan])

    def test_as_vector_rejects_matrix(self):
        with pytest.raises(ValueError, match="1-dimensional"):
            as_vector([[1.0, 2.0]])

    def test_as_matrix_checks_shape(self):
        as_matrix([[1.0, 2.0]], rows=1, cols=2)
        with pytest.raises(ValueError, match="rows"):
            as_matrix([[1.0, 2.0]], rows=2)
        with pytest.raises(ValueError, match="columns"):
            as_matrix([[1.0, 2.0]], cols=3)


class TestCosineSimilarity:
    def test_identical(self):
        assert cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)

    def test_general_value(self):
        # independent evaluation: 32 / (sqrt(14) * sqrt(77))
        expected = 32.0 / (math.sqrt(14.0) * math.sqrt(77.0))
        assert expected == pytest.approx(0.9746318461970762)
        assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(
            expected, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="degenerate vector"):
            cosine_similarity([0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            cosine_similarity([1, 0], [1, 0, 0])

    @given(st.lists(finite_floats, min_size=1, max_size=10))
    def test_self_similarity_is_one(self, values):
        v = np.asarray(values)
        # keep the norm product representable
        if np.linalg.norm(v) < 1e-150:
            return
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_clamped_into_range(self):
        v = np.full(100, 0.1)
        assert -1.0 <= cosine_similarity(v, 3.0 * v) <= 1.0


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])

    def test_already_unit(self):
        np.testing.assert_allclose(l2_normalize([1, 0, 0]), [1, 0, 0])

    def test_symmetric(self):
        np.testing.assert_allclose(l2_normalize([2, 2]),
                                   [0.70710678, 0.70710678], atol=1e-8)

    def test_zero_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            l2_normalize([0.0, 0.0])

    @given(st.lists(finite_floats, min_size=1, max_size=8))
    def test_idempotent(self, values):
        v = np.asarray(values)
        if np.linalg.norm(v) < 1e-6:
            return
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12)
        assert np.linalg.norm(once) == pytest.approx(1.0, abs=1e-12)


class TestLogSumExp:
    def test_pair_of_zeros(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0))

    def test_no_underflow(self):
        assert log_sum_exp([-2000.0, -2000.0]) == pytest.approx(
            -2000.0 + math.log(2.0))

    def test_singleton(self):
        assert log_sum_exp([1.0]) == pytest.approx(1.0)

    def test_axis_variant(self):
        arr = np.array([[0.0, 0.0], [-2000.0, -2000.0]])
        np.testing.assert_allclose(
            log_sum_exp(arr, axis=1),
            [math.log(2.0), -2000.0 + math.log(2.0)])

    def test_all_negative_infinity(self):
        assert log_sum_exp([-np.inf, -np.inf]) == -np.inf

    @given(st.lists(st.floats(min_value=-500, max_value=500), min_size=1,
                    max_size=10),
           st.floats(min_value=-100, max_value=100))
    def test_shift_invariance(self, values, k):
        base = log_sum_exp(values)
        shifted = log_sum_exp(np.asarray(values) + k)
        assert shifted == pytest.approx(base + k, abs=1e-10)


class TestRng:
    def test_same_seed_identical_streams(self):
        a = draw_standard_normal(make_rng(42), 1000)
        b = draw_standard_normal(make_rng(42), 1000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = draw_standard_normal(make_rng(1), 100)
        b = draw_standard_normal(make_rng(2), 100)
        assert not np.array_equal(a, b)

    def test_moments(self):
        draws = draw_standard_normal(make_rng(7), 10 ** 6)
        assert draws.mean() == pytest.approx(0.0, abs=0.01)
        assert draws.var() == pytest.approx(1.0, abs=0.01)

    def test_rejects_nonpositive_count(self):
        with pytest.raises(ValueError):
            draw_standard_normal(make_rng(0), 0)
