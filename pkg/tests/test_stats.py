import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import studentized_range

from tabbench import stats
from tabbench.stats import ResultMatrix


def _m(values, methods=None):
    values = np.asarray(values, dtype=float)
    methods = methods or [f"m{j}" for j in range(values.shape[1])]
    return ResultMatrix(values, [f"d{i}" for i in range(values.shape[0])], methods)


def brute_ranks(row):
    """Rank 1 = best; tied values share the mean of the positions they occupy."""
    out = []
    for v in row:
        better = sum(1 for w in row if w > v)
        equal = sum(1 for w in row if w == v)
        out.append(better + (equal + 1) / 2)
    return out


def brute_friedman(values):
    n, k = values.shape
    r = np.array([brute_ranks(list(row)) for row in values])
    chi2 = 12 * n / (k * (k + 1)) * sum((r[:, j].mean() - (k + 1) / 2) ** 2 for j in range(k))
    return r.mean(axis=0), chi2


def test_rank_examples():
    assert stats.average_ranks(_m([[0.9, 0.8, 0.7], [0.9, 0.8, 0.7]])).tolist() == [1, 2, 3]
    assert stats.average_ranks(_m([[0.9, 0.9, 0.7], [0.9, 0.9, 0.7]])).tolist() == [1.5, 1.5, 3]
    assert stats.average_ranks(_m([[0.9, 0.8], [0.8, 0.9]])).tolist() == [1.5, 1.5]


def test_insufficient_rows():
    with pytest.raises(stats.InsufficientDataError):
        stats.average_ranks(_m([[0.9, 0.8, 0.7]]))
    with pytest.raises(stats.InsufficientDataError):
        stats.friedman(_m([[0.9, 0.8], [0.8, 0.7]]))
    with pytest.raises(stats.InsufficientDataError):
        stats.average_ranks(_m([[0.9, np.nan], [0.8, 0.7], [np.nan, 0.1]]))


@pytest.mark.parametrize("seed", range(20))
def test_against_brute_force(seed):
    r = np.random.default_rng(seed)
    n, k = int(r.integers(3, 11)), int(r.integers(3, 9))
    values = np.round(r.uniform(0.5, 1.0, (n, k)), 1)  # coarse grid forces ties
    ranks, chi2 = brute_friedman(values)
    np.testing.assert_allclose(stats.average_ranks(_m(values)), ranks, atol=1e-9)
    assert stats.friedman(_m(values))[0] == pytest.approx(chi2, abs=1e-9)


def test_friedman_hand_instance():
    chi2, p = stats.friedman(_m([[0.9, 0.8, 0.7]] * 4))
    assert chi2 == pytest.approx(8.0)
    assert p == pytest.approx(np.exp(-4), abs=1e-12)
    assert p == pytest.approx(0.0183, abs=1e-4)


def test_friedman_identical_columns():
    chi2, p = stats.friedman(_m([[0.7, 0.7, 0.7], [0.2, 0.2, 0.2]]))
    assert chi2 == 0 and p == 1


@given(st.integers(0, 2**31), st.floats(-0.5, 0.5))
def test_shift_and_monotone_invariance(seed, c):
    values = np.random.default_rng(seed).uniform(0, 1, (6, 4))
    base = _m(values)
    for other in (_m(values + c), _m(np.exp(values) * 2)):
        np.testing.assert_array_equal(stats.average_ranks(other), stats.average_ranks(base))
        assert stats.friedman(other)[0] == pytest.approx(stats.friedman(base)[0], abs=1e-12)
        assert stats.wins(other) == stats.wins(base)


@given(st.lists(st.lists(st.sampled_from([0.1, 0.5, 0.9]), min_size=5, max_size=5), min_size=2, max_size=6))
def test_rank_sums(rows):
    r = stats._row_ranks(np.array(rows))
    np.testing.assert_allclose(r.sum(axis=1), 15.0)


def test_chi2_tail():
    assert stats.chi2_sf(0.0, 3) == 1.0
    assert stats.chi2_sf(8.0, 2) == pytest.approx(np.exp(-4))


def test_nemenyi_examples():
    assert stats.nemenyi_cd(2, 10) == pytest.approx(0.6198, abs=1e-4)
    assert stats.nemenyi_cd(7, 68) == pytest.approx(1.0926, abs=1e-3)
    cds = [stats.nemenyi_cd(5, n) for n in range(2, 50)]
    assert all(a > b for a, b in zip(cds, cds[1:]))
    with pytest.raises(stats.UnsupportedKError):
        stats.nemenyi_cd(21, 10)
    with pytest.raises(stats.UnsupportedKError):
        stats.nemenyi_cd(1, 10)


@pytest.mark.parametrize("k", range(2, 21))
def test_q_table_matches_studentized_range(k):
    q = studentized_range.ppf(0.95, k, np.inf) / np.sqrt(2)
    assert stats.Q_ALPHA_005[k] == pytest.approx(q, abs=2e-3)


def test_groups_examples():
    assert stats.significance_groups([1.0, 1.2, 1.4], 1.0) == [[0, 1, 2]]
    assert stats.significance_groups([1.0, 5.0], 1.0) == [[0], [1]]
    assert stats.significance_groups([3.0, 1.0, 1.5], 1.0, ["c", "a", "b"]) == [["a", "b"], ["c"]]


@given(st.lists(st.floats(1, 8), min_size=2, max_size=10), st.floats(0.1, 3))
def test_groups_cover_and_never_exceed_cd(ranks, cd):
    groups = stats.significance_groups(ranks, cd)
    assert set(itertools.chain.from_iterable(groups)) == set(range(len(ranks)))
    for g in groups:
        vals = [ranks[i] for i in g]
        assert max(vals) - min(vals) <= cd


def test_wins_examples():
    m = _m([[0.9, 0.9, 0.7], [0.5, 0.8, 0.6], [np.nan, 0.2, 0.1]], ["a", "b", "c"])
    assert stats.wins(m) == {"a": 1, "b": 3, "c": 0}
    only_missing = _m([[np.nan, 0.4], [np.nan, 0.5]], ["a", "b"])
    assert stats.wins(only_missing) == {"a": 0, "b": 2}


def test_mad_examples():
    assert stats.median_abs_deviation([0.9, 0.9, 0.9]) == 0.0
    assert stats.median_abs_deviation([0.8, 0.9, 1.0]) == pytest.approx(0.1)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.integers(0, 1000))
def test_bootstrap_ci_contains_median(xs, seed):
    lo, hi = stats.bootstrap_median_ci(xs, seed=seed)
    assert lo <= np.median(xs) <= hi


def test_summary_and_rank_report():
    m = _m([[0.9, 0.8, 0.7], [0.85, 0.8, 0.6], [0.9, 0.95, 0.7]], ["a", "b", "c"])
    table = stats.summary_stats(m, {"a": [1.0, 3.0], "b": [2.0], "c": [0.5]})
    assert table["a"].median_auc == 0.9 and table["a"].mean_time == 2.0
    assert table["c"].mean_rank == 3.0
    s = stats.rank_summary(m)
    assert s.k == 3 and s.n == 3 and s.cd > 0 and s.wins == {"a": 2, "b": 1, "c": 0}
    assert set(s.to_dict()) >= {"ranks", "chi2", "p", "cd", "groups", "wins"}


def test_rank_summary_drops_incomplete_rows():
    m = _m([[0.9, 0.8], [0.7, np.nan], [0.6, 0.7], [0.5, 0.4]])
    s = stats.rank_summary(m)
    assert s.n == 3 and s.dropped_rows == 1 and np.isnan(s.chi2)


def test_matrix_csv(tmp_path):
    _m([[0.5, np.nan]], ["a", "b"]).to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "dataset,a,b\nd0,0.5,\n"
