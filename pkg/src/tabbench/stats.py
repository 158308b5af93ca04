"""Average ranks, Friedman test, Nemenyi critical difference, win counts and summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from tabbench import kernels


class InsufficientDataError(ValueError):
    pass


class UnsupportedKError(ValueError):
    pass


# Critical values q_0.05 of the Studentized range divided by sqrt(2), infinite
# degrees of freedom (Demsar 2006, Table 5 for k <= 10; k > 10 from the same
# distribution, rounded to three decimals).
Q_ALPHA_005 = {
    2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102,
    10: 3.164, 11: 3.219, 12: 3.268, 13: 3.313, 14: 3.354, 15: 3.391, 16: 3.426,
    17: 3.458, 18: 3.489, 19: 3.517, 20: 3.544,
}


@dataclass
class ResultMatrix:
    """datasets x methods mean test AUC; NaN marks a missing (failed) cell."""

    values: np.ndarray
    datasets: list[str]
    methods: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.datasets), len(self.methods)):
            raise ValueError("values shape does not match dataset/method names")

    def complete_rows(self) -> tuple[np.ndarray, int]:
        keep = ~np.isnan(self.values).any(axis=1)
        return self.values[keep], int((~keep).sum())

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["dataset", *self.methods]) + "\n")
            for name, row in zip(self.datasets, self.values):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
                fh.write(",".join([name, *cells]) + "\n")


@dataclass
class RankSummary:
    methods: list[str]
    ranks: np.ndarray
    chi2: float
    p_value: float
    k: int
    n: int
    alpha: float
    cd: float
    groups: list[list[str]]
    dropped_rows: int = 0
    wins: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ranks": dict(zip(self.methods, map(float, self.ranks))),
            "chi2": self.chi2,
            "p": self.p_value,
            "k": self.k,
            "n": self.n,
            "alpha": self.alpha,
            "cd": self.cd,
            "groups": self.groups,
            "wins": self.wins,
            "dropped_rows": self.dropped_rows,
        }


def _row_ranks(values: np.ndarray) -> np.ndarray:
    """Per-row ranks with 1 = highest value; ties share the mean rank."""
    return np.vstack([kernels.midranks(-row) for row in values])


def average_ranks(matrix: ResultMatrix) -> np.ndarray:
    vals, _ = matrix.complete_rows()
    if vals.shape[0] < 2:
        raise InsufficientDataError("need at least two datasets with results for every method")
    return _row_ranks(vals).mean(axis=0)


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


def friedman(matrix: ResultMatrix) -> tuple[float, float]:
    vals, _ = matrix.complete_rows()
    n, k = vals.shape
    if k < 3 or n < 2:
        raise InsufficientDataError(f"Friedman test needs k >= 3 methods and N >= 2 datasets (got k={k}, N={n})")
    rank_sums = _row_ranks(vals).sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    chi2 = max(chi2, 0.0)
    return chi2, chi2_sf(chi2, k - 1)


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    if alpha != 0.05:
        raise UnsupportedKError("only alpha = 0.05 critical values are tabulated")
    if k not in Q_ALPHA_005:
        raise UnsupportedKError(f"k={k} outside the tabulated range 2..20")
    if n < 2:
        raise InsufficientDataError("N must be at least 2")
    return Q_ALPHA_005[k] * math.sqrt(k * (k + 1) / (6.0 * n))


def significance_groups(ranks, cd: float, methods=None) -> list[list]:
    """Maximal runs of rank-sorted methods whose extreme ranks differ by <= cd.

    Runs contained in an earlier run are dropped, so every method appears in
    at least one group and no group spans a pair further apart than ``cd``.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    methods = list(range(len(ranks))) if methods is None else list(methods)
    order = np.argsort(ranks, kind="mergesort")
    r = ranks[order]
    groups, last_end = [], -1
    for i in range(len(r)):
        j = i
        while j + 1 < len(r) and r[j + 1] - r[i] <= cd:
            j += 1
        if j > last_end:
            groups.append([methods[t] for t in order[i:j + 1]])
            last_end = j
    return groups


def wins(matrix: ResultMatrix) -> dict[str, int]:
    """Per dataset, every method attaining the row maximum gets a point."""
    counts = {m: 0 for m in matrix.methods}
    for row in matrix.values:
        if np.all(np.isnan(row)):
            continue
        best = np.nanmax(row)
        for m, v in zip(matrix.methods, row):
            if not np.isnan(v) and v == best:
                counts[m] += 1
    return counts


def rank_summary(matrix: ResultMatrix, alpha: float = 0.05) -> RankSummary:
    vals, dropped = matrix.complete_rows()
    k = len(matrix.methods)
    ranks = average_ranks(matrix)
    if k >= 3:
        chi2, p = friedman(matrix)
    else:
        chi2, p = float("nan"), float("nan")
    cd = nemenyi_cd(k, vals.shape[0], alpha)
    return RankSummary(
        methods=list(matrix.methods),
        ranks=ranks,
        chi2=chi2,
        p_value=p,
        k=k,
        n=int(vals.shape[0]),
        alpha=alpha,
        cd=cd,
        groups=significance_groups(ranks, cd, matrix.methods),
        dropped_rows=dropped,
        wins=wins(matrix),
    )


@dataclass
class MethodStats:
    mean_rank: float
    mean_auc: float
    median_auc: float
    mad: float
    ci_low: float
    ci_high: float
    mean_time: float
    median_time: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def median_abs_deviation(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.median(np.abs(x - np.median(x))))


def bootstrap_median_ci(x, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    meds = np.median(x[rng.integers(0, x.size, size=(n_resamples, x.size))], axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(meds, [tail, 100.0 - tail])
    return float(lo), float(hi)


def summary_stats(matrix: ResultMatrix, wall_times: dict | None = None, seed: int = 0) -> dict[str, MethodStats]:
    wall_times = wall_times or {}
    try:
        ranks = dict(zip(matrix.methods, average_ranks(matrix)))
    except InsufficientDataError:
        ranks = {}
    out = {}
    for j, m in enumerate(matrix.methods):
        col = matrix.values[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise InsufficientDataError(f"method {m!r} has no results")
        lo, hi = bootstrap_median_ci(col, seed=seed)
        times = np.asarray(wall_times.get(m, [np.nan]), dtype=np.float64)
        out[m] = MethodStats(
            mean_rank=float(ranks.get(m, float("nan"))),
            mean_auc=float(col.mean()),
            median_auc=float(np.median(col)),
            mad=median_abs_deviation(col),
            ci_low=lo,
            ci_high=hi,
            mean_time=float(np.mean(times)),
            median_time=float(np.median(times)),
        )
    return out
