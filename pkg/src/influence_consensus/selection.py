"""Final subset selection and the analysis reports built on top of it."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .aggregation import (
    STRATEGIES,
    AggregateRanking,
    VoteTally,
    descending_order,
    max_scores,
    merge_gausnorm,
    merge_scores,
    merge_sumnorm,
    minrank_keys,
    minrank_select,
    rank_table,
    round_robin_select,
    selection_size,
    thresholds,
    vote_tally,
)
from .datastore import ScoreTable
from .errors import ValidationError
from .results import EvalReport, OverlapReport, SelectionResult, VoteStats, VoteStatsRow

BASELINES = ("random",)


def consensus_strength(table: ScoreTable) -> tuple:
    """Sum over tasks of each example's within-task rank percentile.

    Returns ``(exact, value)``: ``exact`` is the integer ``N * c_i`` used for
    ordering (no float ties), ``value`` is ``c_i`` itself, in ``(0, K]``.
    """
    ranks = rank_table(table)
    exact = (table.n + 1 - ranks).sum(axis=1)
    return exact, exact / table.n


def _vote_order(votes: np.ndarray, strength: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(votes.shape[0]), -strength, -votes))


def select_by_votes(tally: VoteTally, table: ScoreTable, p: float) -> SelectionResult:
    """Take the ``ceil(p N)`` examples with the most votes.

    Within the boundary vote level, higher consensus strength wins, then the
    lower id.
    """
    if tally.votes.shape != (table.n,) or tally.k != table.k:
        raise ValidationError("vote tally does not match the score table")
    m = selection_size(p, table.n)
    exact, strength = consensus_strength(table)
    order = _vote_order(tally.votes, exact)
    sel = order[:m]
    return SelectionResult(
        strategy="vote",
        ratio=float(p),
        selected_ids=sel.astype(np.int64),
        provenance={"votes": tally.votes[sel], "consensus_strength": strength[sel]},
        thresholds=thresholds(table, p).tau.tolist(),
        boundary_level=int(tally.votes[sel[-1]]) if m else None,
        vote_histogram=tally.histogram().tolist(),
    )


def random_select(n: int, p: float, seed: int) -> SelectionResult:
    m = selection_size(p, n)
    sel = np.random.default_rng(seed).permutation(n)[:m]
    return SelectionResult("random", float(p), sel.astype(np.int64), seed=seed)


def select(table: ScoreTable, p: float, strategy: str = "vote", seed: Optional[int] = None) -> SelectionResult:
    """Select ``ceil(p N)`` examples with any registered strategy."""
    m = selection_size(p, table.n)
    if strategy == "vote":
        result = select_by_votes(vote_tally(table, thresholds(table, p)), table, p)
    elif strategy == "roundrobin":
        result = round_robin_select(table, m)
    elif strategy == "minrank":
        result = minrank_select(table, m)
    elif strategy in STRATEGIES:
        result = aggregate(table, strategy).top(m)
    elif strategy == "random":
        if seed is None:
            raise ValidationError("random selection needs a seed")
        return random_select(table.n, p, seed)
    else:
        raise ValidationError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    result.ratio = float(p)
    result.seed = seed
    return result


def aggregate(table: ScoreTable, strategy: str, p: float = 1.0) -> AggregateRanking:
    """Full preference order for ``strategy`` (``p`` only matters for vote)."""
    if strategy == "merge":
        return merge_scores(table)
    if strategy == "max":
        return max_scores(table)
    if strategy == "merge-sumnorm":
        return merge_sumnorm(table)
    if strategy == "merge-gausnorm":
        return merge_gausnorm(table)
    if strategy == "vote":
        votes = vote_tally(table, thresholds(table, p)).votes
        exact, _ = consensus_strength(table)
        return AggregateRanking("vote", votes, _vote_order(votes, exact))
    if strategy == "roundrobin":
        res = round_robin_select(table, table.n)
        keys = np.empty(table.n, dtype=np.int64)
        keys[res.selected_ids] = np.arange(table.n, 0, -1)
        return AggregateRanking("roundrobin", keys, res.selected_ids)
    if strategy == "minrank":
        best, _ = minrank_keys(table)
        return AggregateRanking("minrank", -best, minrank_select(table, table.n).selected_ids)
    raise ValidationError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")


def vote_distribution_stats(table: ScoreTable, ratios: Sequence[float]) -> VoteStats:
    rows = []
    for p in ratios:
        tally = vote_tally(table, thresholds(table, p))
        v = tally.votes
        result = select_by_votes(tally, table, p)
        rows.append(
            VoteStatsRow(
                ratio=float(p),
                mean=float(v.mean()),
                std=float(v.std()),
                median=int(np.sort(v)[(v.shape[0] - 1) // 2]),
                max_votes=int(v.max()),
                zero_vote_fraction=float(np.mean(v == 0)),
                threshold=int(result.boundary_level),
            )
        )
    return VoteStats(k=table.k, n=table.n, rows=rows)


def specialist_sets(table: ScoreTable, p: float) -> list:
    """Top ``ceil(p N)`` ids of each task column (id tie-break)."""
    r = selection_size(p, table.n)
    return [set(descending_order(table.scores[:, k])[:r].tolist()) for k in range(table.k)]


def specialist_overlap(table: ScoreTable, p: float, generalist: SelectionResult) -> OverlapReport:
    sets = specialist_sets(table, p)
    pairwise = np.array([[len(a & b) / len(a) for b in sets] for a in sets])
    gen = set(int(i) for i in generalist.selected_ids)
    vs_gen = np.array([len(s & gen) / len(gen) if gen else 0.0 for s in sets])
    return OverlapReport(table.task_names, pairwise, vs_gen)


def rel_metric(subset_scores, full_scores, task_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Per-task ``subset / full`` ratios and their mean."""
    sub = np.asarray(subset_scores, dtype=np.float64)
    full = np.asarray(full_scores, dtype=np.float64)
    if sub.shape != full.shape or sub.ndim != 1 or sub.size == 0:
        raise ValidationError("subset and full scores must be equal-length, non-empty vectors")
    if np.any(full <= 0):
        raise ValidationError("full-data scores must all be positive")
    rel = sub / full
    names = list(task_names) if task_names is not None else [f"task{k}" for k in range(sub.size)]
    return EvalReport(names, sub, full, rel, float(rel.mean()))
