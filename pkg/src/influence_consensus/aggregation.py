"""Cross-task aggregation of an N x K score table.

Every ordering here is total: ties on the strategy's key are broken by
ascending example id.  Percentile thresholds use the nearest-rank rule,
``tau_k = r-th largest score of column k`` with ``r = ceil(p * N)``, and an
example qualifies for task k when its score is ``>= tau_k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .datastore import ScoreTable
from .errors import ValidationError
from .results import SelectionResult

STRATEGIES = ("vote", "merge", "max", "merge-sumnorm", "merge-gausnorm", "roundrobin", "minrank")
SUMNORM_EPS = 1e-12
GAUSNORM_EPS = 1e-12


def check_ratio(p: float) -> float:
    p = float(p)
    if not (0.0 < p <= 1.0) or math.isnan(p):
        raise ValidationError(f"selection ratio must lie in (0, 1], got {p}")
    return p


def selection_size(p: float, n: int) -> int:
    """``ceil(p * n)``, robust to float noise such as ``0.2 * 2000``."""
    p = check_ratio(p)
    return min(n, math.ceil(round(p * n, 9)))


def descending_order(keys: np.ndarray) -> np.ndarray:
    """Indices sorted by descending key, ascending id on ties."""
    keys = np.asarray(keys)
    return np.lexsort((np.arange(keys.shape[0]), -keys))


def _check_m(table: ScoreTable, m: int) -> int:
    m = int(m)
    if m < 0 or m > table.n:
        raise ValidationError(f"cannot select {m} of {table.n} examples")
    return m


@dataclass
class ThresholdSet:
    tau: np.ndarray
    ratio: float
    rank: int


@dataclass
class VoteTally:
    votes: np.ndarray
    k: int

    def histogram(self) -> np.ndarray:
        return np.bincount(self.votes, minlength=self.k + 1)


@dataclass
class AggregateRanking:
    strategy: str
    keys: np.ndarray
    order: np.ndarray

    def top(self, m: int, ratio=None) -> SelectionResult:
        sel = self.order[:m]
        return SelectionResult(self.strategy, ratio, sel.astype(np.int64), {"key": self.keys[sel]})


def thresholds(table: ScoreTable, p: float) -> ThresholdSet:
    if table.n < 1:
        raise ValidationError("empty score table")
    r = selection_size(p, table.n)
    tau = -np.sort(-table.scores, axis=0)[r - 1]
    return ThresholdSet(tau=tau, ratio=float(p), rank=r)


def membership(table: ScoreTable, ts: ThresholdSet) -> np.ndarray:
    """Boolean N x K matrix: example i is in specialist set S_k."""
    if ts.tau.shape != (table.k,):
        raise ValidationError(f"{ts.tau.shape[0]} thresholds for {table.k} tasks")
    return table.scores >= ts.tau[None, :]


def vote_tally(table: ScoreTable, ts: ThresholdSet) -> VoteTally:
    votes = membership(table, ts).sum(axis=1).astype(np.int64)
    return VoteTally(votes=votes, k=table.k)


def merge_scores(table: ScoreTable) -> AggregateRanking:
    keys = table.scores.sum(axis=1)
    return AggregateRanking("merge", keys, descending_order(keys))


def max_scores(table: ScoreTable) -> AggregateRanking:
    keys = table.scores.max(axis=1)
    return AggregateRanking("max", keys, descending_order(keys))


def merge_sumnorm(table: ScoreTable) -> AggregateRanking:
    """Sum of columns each divided by its own column sum.

    A column whose sum is within ``SUMNORM_EPS`` of zero is used unnormalized.
    A negative column sum is applied as-is, which reverses that column's
    contribution; both cases warn.
    """
    sums = table.scores.sum(axis=0)
    denom = sums.copy()
    for k, s in enumerate(sums):
        name = table.task_names[k]
        if abs(s) < SUMNORM_EPS:
            warnings.warn(f"task {name!r}: column sum {s:.3g} ~ 0, left unnormalized", RuntimeWarning, stacklevel=2)
            denom[k] = 1.0
        elif s < 0:
            warnings.warn(f"task {name!r}: negative column sum {s:.3g} inverts its ordering", RuntimeWarning, stacklevel=2)
    keys = (table.scores / denom[None, :]).sum(axis=1)
    return AggregateRanking("merge-sumnorm", keys, descending_order(keys))


def merge_gausnorm(table: ScoreTable) -> AggregateRanking:
    """Sum of per-column z-scores (population std); flat columns contribute 0."""
    mu = table.scores.mean(axis=0)
    sigma = table.scores.std(axis=0)
    flat = sigma < GAUSNORM_EPS
    z = (table.scores - mu[None, :]) / np.where(flat, 1.0, sigma)[None, :]
    z[:, flat] = 0.0
    keys = z.sum(axis=1)
    return AggregateRanking("merge-gausnorm", keys, descending_order(keys))


def rank_table(table: ScoreTable) -> np.ndarray:
    """1-based per-task ranks; highest score gets rank 1, ties go to the lower id."""
    ranks = np.empty(table.scores.shape, dtype=np.int64)
    for k in range(table.k):
        order = descending_order(table.scores[:, k])
        ranks[order, k] = np.arange(1, table.n + 1)
    return ranks


def round_robin_select(table: ScoreTable, m: int) -> SelectionResult:
    """Cycle through tasks in column order; each visit takes that task's
    best-ranked example not yet selected."""
    m = _check_m(table, m)
    orders = [descending_order(table.scores[:, k]) for k in range(table.k)]
    cursors = [0] * table.k
    taken = np.zeros(table.n, dtype=bool)
    picked, by_task, at_rank = [], [], []
    k = 0
    while len(picked) < m:
        order = orders[k]
        c = cursors[k]
        while taken[order[c]]:
            c += 1
        i = int(order[c])
        taken[i] = True
        cursors[k] = c + 1
        picked.append(i)
        by_task.append(k)
        at_rank.append(c + 1)
        k = (k + 1) % table.k
    return SelectionResult(
        "roundrobin",
        None,
        np.array(picked, dtype=np.int64),
        {"task": np.array(by_task, dtype=np.int64), "rank": np.array(at_rank, dtype=np.int64)},
    )


def minrank_keys(table: ScoreTable) -> tuple:
    """Best and second-best rank per example (second = best when K = 1)."""
    ranks = np.sort(rank_table(table), axis=1)
    best = ranks[:, 0]
    second = ranks[:, 1] if table.k > 1 else best
    return best, second


def minrank_select(table: ScoreTable, m: int) -> SelectionResult:
    m = _check_m(table, m)
    best, second = minrank_keys(table)
    order = np.lexsort((np.arange(table.n), second, best))[:m]
    return SelectionResult(
        "minrank",
        None,
        order.astype(np.int64),
        {"best_rank": best[order], "second_rank": second[order]},
    )
