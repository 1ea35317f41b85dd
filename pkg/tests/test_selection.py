import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from influence_consensus.aggregation import STRATEGIES, merge_scores, thresholds, vote_tally
from influence_consensus.datastore import ScoreTable
from influence_consensus.errors import ValidationError
from influence_consensus.results import SelectionResult, read_ids
from influence_consensus.selection import (
    aggregate,
    consensus_strength,
    rel_metric,
    select,
    select_by_votes,
    specialist_overlap,
    specialist_sets,
    vote_distribution_stats,
)

WORKED = ScoreTable.from_array(np.column_stack([[0.9, 0.1, 0.5, 0.8, 0.2], [0.15, 0.7, 0.6, 0.9, 0.1]]))
ALL = STRATEGIES + ("random",)


def tables(max_n=40, max_k=5, coarse=False):
    elements = st.sampled_from([-1.0, 0.0, 0.5, 2.0]) if coarse else st.floats(-5, 5, allow_nan=False)
    return st.tuples(st.integers(1, max_n), st.integers(1, max_k)).flatmap(
        lambda s: hnp.arrays(np.float64, s, elements=elements).map(ScoreTable.from_array)
    )


ratios = st.sampled_from([0.05, 0.2, 0.4, 0.5, 0.9, 1.0]) | st.floats(0.001, 1.0)


def test_worked_example_selection():
    res = select(WORKED, 0.4, "vote")
    assert res.selected_ids.tolist() == [3, 0]
    assert res.provenance["votes"].tolist() == [2, 1]
    _, strength = consensus_strength(WORKED)
    # oracle-derived strengths: id 0 -> 1.0 + 0.4, id 1 -> 0.2 + 0.8
    np.testing.assert_allclose(strength[:2], [1.4, 1.0])
    assert res.boundary_level == 1
    assert res.to_report() == {
        "strategy": "vote",
        "p": 0.4,
        "M": 2,
        "thresholds": [0.8, 0.7],
        "vote_histogram": [2, 2, 1],
        "boundary_level": 1,
        "seed": None,
    }


def test_all_equal_votes_fall_back_to_consensus_order(rng):
    t = ScoreTable.from_array(rng.normal(size=(12, 3)))
    res = select(t, 1.0, "vote")
    exact, _ = consensus_strength(t)
    assert res.selected_ids.tolist() == oracles.order_by(exact.tolist())
    assert sorted(res.selected_ids.tolist()) == list(range(12))


@given(tables(coarse=True), ratios)
def test_vote_selection_matches_brute_force(table, p):
    res = select(table, p, "vote")
    ref, strength = oracles.vote_select([table.scores[:, k].tolist() for k in range(table.k)], p)
    assert res.selected_ids.tolist() == ref
    _, got = consensus_strength(table)
    np.testing.assert_allclose(got, strength, rtol=0, atol=1e-12)
    assert ((got > 0) & (got <= table.k)).all()


@given(tables(coarse=True), ratios)
def test_vote_dominance(table, p):
    res = select(table, p, "vote")
    votes = vote_tally(table, thresholds(table, p)).votes
    chosen = np.zeros(table.n, bool)
    chosen[res.selected_ids] = True
    if (~chosen).any():
        assert votes[chosen].min() >= votes[~chosen].max()
    assert votes[chosen].min() == res.boundary_level
    assert (votes[~chosen] <= res.boundary_level).all()


@given(tables(), ratios, st.sampled_from(ALL))
def test_size_uniqueness_determinism(table, p, strategy):
    a = select(table, p, strategy, seed=3)
    b = select(table, p, strategy, seed=3)
    m = math.ceil(round(p * table.n, 9))
    assert a.m == m
    assert len(set(a.selected_ids.tolist())) == m
    assert a.selected_ids.min() >= 0 and a.selected_ids.max() < table.n
    assert a.selected_ids.tobytes() == b.selected_ids.tobytes()
    assert json.dumps(a.to_report(), sort_keys=True) == json.dumps(b.to_report(), sort_keys=True)


@given(tables(coarse=True), ratios, st.lists(st.integers(0, 2), min_size=5, max_size=5))
def test_vote_selection_invariant_to_monotone_transforms(table, p, picks):
    fns = [lambda x: x**3 + x, np.exp, lambda x: 0.1 * x - 4]
    new = np.column_stack([fns[picks[k]](table.scores[:, k]) for k in range(table.k)])
    moved = ScoreTable(new, table.task_names)
    assert select(moved, p, "vote").selected_ids.tolist() == select(table, p, "vote").selected_ids.tolist()


@given(tables(coarse=True), st.lists(ratios, min_size=2, max_size=2))
def test_weak_nesting_across_ratios(table, ps):
    p, q = sorted(ps)
    sp, sq = select(table, p, "vote"), select(table, q, "vote")
    vp = vote_tally(table, thresholds(table, p)).votes
    vq = vote_tally(table, thresholds(table, q)).votes
    kept = set(sq.selected_ids.tolist())
    for i in sp.selected_ids.tolist():
        if vp[i] > sp.boundary_level and vq[i] > sq.boundary_level:
            assert i in kept


def test_select_by_votes_shape_checks():
    tally = vote_tally(WORKED, thresholds(WORKED, 0.4))
    with pytest.raises(ValidationError):
        select_by_votes(tally, ScoreTable.from_array(np.ones((4, 2))), 0.4)


def test_unknown_strategy_and_random_needs_seed():
    with pytest.raises(ValidationError):
        select(WORKED, 0.4, "borda")
    with pytest.raises(ValidationError):
        select(WORKED, 0.4, "random")
    with pytest.raises(ValidationError):
        aggregate(WORKED, "borda")


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_aggregate_full_order_agrees_with_select(strategy, rng):
    t = ScoreTable.from_array(rng.normal(size=(25, 3)))
    ranking = aggregate(t, strategy, 0.2)
    assert sorted(ranking.order.tolist()) == list(range(25))
    assert ranking.order[:5].tolist() == select(t, 0.2, strategy).selected_ids.tolist()


def test_merge_selection_matches_library_ranking(rng):
    t = ScoreTable.from_array(rng.normal(size=(30, 4)))
    assert select(t, 0.3, "merge").selected_ids.tolist() == merge_scores(t).order[:9].tolist()


def test_random_baseline_is_seeded():
    t = ScoreTable.from_array(np.zeros((50, 2)))
    a, b, c = (select(t, 0.2, "random", seed=s) for s in (1, 1, 2))
    assert a.selected_ids.tolist() == b.selected_ids.tolist() != c.selected_ids.tolist()
    assert a.seed == 1


def test_write_and_read_ids(tmp_path):
    res = select(WORKED, 0.4, "vote")
    res.write(tmp_path / "v.ids", tmp_path / "v.json")
    assert (tmp_path / "v.ids").read_text() == "3\n0\n"
    assert read_ids(tmp_path / "v.ids").tolist() == [3, 0]
    assert json.loads((tmp_path / "v.json").read_text()) == res.to_report()


def test_vote_stats_examples(rng):
    t = ScoreTable.from_array(rng.normal(size=(200, 4)))
    stats = vote_distribution_stats(t, [0.05, 0.2, 0.5, 0.9, 1.0])
    last = stats.rows[-1]
    assert last.mean == 4 and last.zero_vote_fraction == 0 and last.median == 4
    means = [r.mean for r in stats.rows]
    zeros = [r.zero_vote_fraction for r in stats.rows]
    assert means == sorted(means) and zeros == sorted(zeros, reverse=True)
    for r in stats.rows:
        assert 0 <= r.zero_vote_fraction <= 1 and 0 <= r.mean <= 4 and 0 <= r.median <= 4
        assert r.threshold == select(t, r.ratio, "vote").boundary_level
    text = stats.format_table()
    assert text.splitlines()[0] == "Ratio | Mean (+-Std) | Median | Max Votes | Zero-Vote | Threshold"
    assert len(text.splitlines()) == 6
    d = stats.to_dict()
    assert d["k"] == 4 and len(d["rows"]) == 5


def test_vote_stats_against_direct_counts():
    stats = vote_distribution_stats(WORKED, [0.4])
    (row,) = stats.rows
    votes = np.array([1, 1, 0, 2, 0])
    assert row.mean == votes.mean() and row.std == votes.std()
    assert row.median == 1 and row.max_votes == 2 and row.zero_vote_fraction == 0.4 and row.threshold == 1


def test_overlap_examples(rng):
    col = rng.normal(size=40)
    same = ScoreTable.from_array(np.column_stack([col, col]))
    gen = select(same, 0.25, "vote")
    rep = specialist_overlap(same, 0.25, gen)
    assert (rep.pairwise == 1.0).all() and (rep.vs_generalist == 1.0).all()
    rev = ScoreTable.from_array(np.column_stack([col, -col]))
    rep = specialist_overlap(rev, 0.5, select(rev, 0.5, "vote"))
    assert rep.pairwise[0, 1] == 0.0 and rep.pairwise[1, 0] == 0.0


@given(tables(max_n=100, max_k=4), ratios)
def test_overlap_matches_set_oracle(table, p):
    gen = select(table, p, "merge")
    rep = specialist_overlap(table, p, gen)
    r = math.ceil(round(p * table.n, 9))
    sets = [set(oracles.order_by(table.scores[:, k].tolist())[:r]) for k in range(table.k)]
    assert specialist_sets(table, p) == sets
    g = set(gen.selected_ids.tolist())
    for a in range(table.k):
        assert rep.vs_generalist[a] == len(sets[a] & g) / len(g)
        for b in range(table.k):
            assert rep.pairwise[a, b] == len(sets[a] & sets[b]) / len(sets[a])
    assert (np.diag(rep.pairwise) == 1).all()
    assert (rep.pairwise == rep.pairwise.T).all()


def test_rel_metric():
    rep = rel_metric([0.8, 0.9], [0.8, 0.9], ["a", "b"])
    assert rep.mean_rel == 1.0
    assert rel_metric([0.4, 0.45], [0.8, 0.9]).mean_rel == 0.5
    np.testing.assert_allclose(rel_metric([0.5, 1.0], [1.0, 0.5]).rel, [0.5, 2.0])
    with pytest.raises(ValidationError):
        rel_metric([0.5], [0.0])
    with pytest.raises(ValidationError):
        rel_metric([0.5, 0.2], [1.0])
    assert set(rep.to_dict()) == {"task_names", "subset_scores", "full_scores", "rel", "mean_rel"}


def test_selection_result_report_keys():
    res = SelectionResult("merge", 0.1, np.array([2, 0]))
    assert set(res.to_report()) == {"strategy", "p", "M", "thresholds", "vote_histogram", "boundary_level", "seed"}
