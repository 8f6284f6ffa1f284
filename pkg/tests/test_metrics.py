import numpy as np
import pytest
import scipy.stats
from hypothesis import given, strategies as st

from pmilab.core import DataError, seeded_rng
from pmilab.metrics import (
    EvalReport,
    aggregate_reports,
    format_table,
    mse,
    pearson,
    rank_average,
    roc_auc,
    roc_auc_grouped,
    spearman,
)


def brute_force_auc(pos, neg):
    """O(n^2) pairwise definition with 0.5 tie credit."""
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def brute_force_ranks(x):
    """Average ranks by direct enumeration of positions."""
    x = list(x)
    ranks = []
    for v in x:
        less = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        # positions less+1 .. less+equal, averaged
        ranks.append(less + (equal + 1) / 2.0)
    return np.array(ranks)


class TestMse:
    def test_identical(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_value(self):
        assert mse([1.0, 1.0], [0.0, 2.0]) == 1.0

    def test_constant_offset(self):
        x = np.arange(10.0)
        assert mse(x + 0.3, x) == pytest.approx(0.09)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            mse([1.0], [1.0, 2.0])


class TestPearson:
    def test_affine(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 3) == pytest.approx(1.0)

    def test_negation(self):
        x = np.arange(5.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_independent_near_zero(self):
        rng = seeded_rng(0)
        x = rng.standard_normal(20000)
        y = rng.standard_normal(20000)
        assert abs(pearson(x, y)) < 0.03

    def test_zero_variance_errors(self):
        with pytest.raises(DataError, match="undefined correlation"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_bounded(self):
        rng = seeded_rng(1)
        for _ in range(200):
            x = rng.standard_normal(50)
            y = rng.standard_normal(50)
            assert -1.0 <= pearson(x, y) <= 1.0


class TestSpearman:
    def test_reversed(self):
        assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_monotone_transform_invariance(self):
        rng = seeded_rng(2)
        x = rng.standard_normal(100)
        assert spearman(np.exp(x) + x**3, x) == pytest.approx(1.0)
        assert spearman(x, x) == pytest.approx(1.0)

    def test_ties_match_brute_force(self):
        x = [1.0, 1.0, 2.0]
        y = [1.0, 2.0, 3.0]
        rx, ry = brute_force_ranks(x), brute_force_ranks(y)
        expected = pearson(rx, ry)
        assert spearman(x, y) == pytest.approx(expected, abs=1e-12)

    def test_matches_scipy_with_ties(self):
        rng = seeded_rng(3)
        for _ in range(50):
            x = rng.integers(0, 5, size=30).astype(float)
            y = rng.integers(0, 5, size=30).astype(float)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            expected = scipy.stats.spearmanr(x, y).statistic
            assert spearman(x, y) == pytest.approx(expected, abs=1e-12)

    def test_all_equal_errors(self):
        with pytest.raises(DataError):
            spearman([1.0, 1.0], [1.0, 2.0])


class TestRankAverage:
    @given(st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=40))
    def test_matches_brute_force(self, values):
        x = np.array(values, dtype=float)
        assert rank_average(x).tolist() == pytest.approx(brute_force_ranks(x).tolist())


class TestRocAuc:
    def test_perfect_separation(self):
        assert roc_auc([2.0], [1.0]) == 1.0

    def test_all_tied_is_half(self):
        assert roc_auc([3.0, 3.0], [3.0, 3.0, 3.0]) == pytest.approx(0.5)

    def test_rank_sum_equals_pairwise_definition(self):
        rng = seeded_rng(4)
        for trial in range(200):
            pos = np.round(rng.standard_normal(50), 1)  # rounding forces ties
            neg = np.round(rng.standard_normal(50), 1)
            assert roc_auc(pos, neg) == pytest.approx(
                brute_force_auc(pos, neg), abs=1e-12
            ), f"trial {trial}"

    def test_complement_symmetry(self):
        rng = seeded_rng(5)
        pos = rng.standard_normal(40)
        neg = rng.standard_normal(60)
        assert roc_auc(pos, neg) == pytest.approx(1.0 - roc_auc(neg, pos), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = seeded_rng(6)
        pos = rng.standard_normal(30)
        neg = rng.standard_normal(30)
        assert roc_auc(np.exp(pos), np.exp(neg)) == pytest.approx(
            roc_auc(pos, neg), abs=1e-12
        )

    def test_empty_side_errors(self):
        with pytest.raises(DataError):
            roc_auc([], [1.0])

    def test_grouped_auc(self):
        pos = np.array([3.0, 0.0])
        groups = np.array([[1.0, 2.0], [0.0, 1.0]])
        # first positive beats both (1.0); second ties one, loses one (0.25)
        assert roc_auc_grouped(pos, groups) == pytest.approx((1.0 + 0.25) / 2)


class TestEvalReport:
    def test_to_dict_skips_missing(self):
        report = EvalReport(n=10, mse=0.5)
        assert report.to_dict() == {"n": 10, "mse": 0.5}

    def test_bounds_validated(self):
        with pytest.raises(DataError):
            EvalReport(n=1, pearson=1.5)
        with pytest.raises(DataError):
            EvalReport(n=1, mse=-0.1)

    def test_aggregate(self):
        reports = [EvalReport(n=5, mse=1.0), EvalReport(n=5, mse=3.0)]
        agg = aggregate_reports(reports)
        assert agg["mse_mean"] == 2.0
        assert agg["mse_std"] == 1.0
        assert agg["runs"] == 2

    def test_single_run_std_zero(self):
        agg = aggregate_reports([EvalReport(n=5, spearman=0.7)])
        assert agg["spearman_std"] == 0.0


class TestFormatTable:
    def test_alignment(self):
        rows = [{"a": 1.23456, "b": "x"}, {"a": 2.0, "b": "longer"}]
        text = format_table(rows)
        lines = text.splitlines()
        assert lines[0].startswith("a")
        assert "1.2346" in lines[2]
        assert len(lines) == 4
