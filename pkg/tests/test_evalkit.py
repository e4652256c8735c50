import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dwrs.corpus import Dataset, UserSequence, split_leave_one_out
from dwrs.dwrs_d import WatermarkSequence
from dwrs.evalkit import (CLAIM, NO_CLAIM, MetricsReport, discriminability_report, model_utility,
                          random_rank_report, rank_metrics, ranks_of, read_reports, report_from_ranks,
                          watermark_validity, write_reports)
from dwrs.seqrec import Model, ModelConfig


def brute_dcg(rank, k):
    ranked = ["x"] * rank + ["t"] + ["x"] * 200
    dcg = sum(1.0 / math.log2(pos + 2) for pos, it in enumerate(ranked[:k]) if it == "t")
    return dcg / 1.0  # one relevant item: ideal DCG is 1


def test_rank_metrics_examples():
    assert rank_metrics(0, [1, 10]) == {1: (1.0, 1.0), 10: (1.0, 1.0)}
    r, n = rank_metrics(9, [10])[10]
    assert r == 1.0 and n == pytest.approx(1 / math.log2(11)) and n == pytest.approx(0.2891, abs=1e-4)
    assert rank_metrics(10, [10])[10] == (0.0, 0.0)
    with pytest.raises(ValueError):
        rank_metrics(-1, [10])


def test_rank_metrics_matches_brute_dcg():
    for rank in range(100):
        for k in (1, 5, 10, 20, 100):
            r, n = rank_metrics(rank, [k])[k]
            assert r == (1.0 if rank < k else 0.0)
            assert n == pytest.approx(brute_dcg(rank, k), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 150), min_size=1, max_size=50))
def test_report_monotone_and_bounded(ranks):
    rep = report_from_ranks(ranks, [5, 10, 20, 100], "utility")
    ks = rep.ks
    for a, b in zip(ks, ks[1:]):
        assert rep.recall[a] <= rep.recall[b]
        assert rep.ndcg[a] <= rep.ndcg[b]
    for k in ks:
        assert 0 <= rep.ndcg[k] <= rep.recall[k] <= 1


def test_ranks_of_matches_rank_of():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 4, size=(20, 9)).astype(float)
    targets = rng.integers(1, 10, size=20)
    from dwrs.seqrec import rank_of
    assert ranks_of(scores, targets).tolist() == [rank_of(s, t) for s, t in zip(scores, targets)]


class FixedScorer(Model):
    """Scores a fixed preference vector, or the target-oracle when told the split."""

    def __init__(self, n_items, fn):
        super().__init__(ModelConfig(4, 8, 4), n_items, {})
        self.fn = fn

    def score_batch(self, seqs, batch_size=512):
        return np.array([self.fn(list(s)) for s in seqs], dtype=float)


def toy_split(n_users=200, n_items=50, seed=0):
    rng = np.random.default_rng(seed)
    users = [UserSequence(u, rng.choice(np.arange(1, n_items + 1), size=6, replace=False).tolist())
             for u in range(n_users)]
    return Dataset(users, n_items)


def test_perfect_oracle_utility():
    d = toy_split()
    sp = split_leave_one_out(d)
    nxt = {tuple(sp.test_query(u)): sp.test[u] for u in sp.users}

    def fn(seq):
        s = np.zeros(d.n_items)
        s[nxt[tuple(seq)] - 1] = 1.0
        return s

    rep = model_utility(FixedScorer(d.n_items, fn), sp, [1, 5, 10])
    assert all(v == 1.0 for v in rep.recall.values())
    assert all(v == 1.0 for v in rep.ndcg.values())


def test_random_scorer_recall_near_k_over_n():
    d = toy_split(n_users=4000, n_items=50, seed=1)
    sp = split_leave_one_out(d)
    rng = np.random.default_rng(2)
    rep = model_utility(FixedScorer(d.n_items, lambda s: rng.random(d.n_items)), sp, [5, 10])
    expected = random_rank_report(50, [5, 10])
    # binomial sd at p=0.2, n=4000 is 0.0063
    for k in (5, 10):
        assert rep.recall[k] == pytest.approx(expected.recall[k], abs=0.03)
        assert rep.ndcg[k] == pytest.approx(expected.ndcg[k], abs=0.03)


def test_validity_of_degenerate_model():
    d = toy_split(n_items=30)
    wm = WatermarkSequence((3, 4, 5))

    def always_five(seq):
        s = np.zeros(30)
        s[4] = 10.0
        return s

    m = FixedScorer(30, always_five)
    wm_rep = watermark_validity(m, d, wm, [5, 10])
    oracle_rep = watermark_validity(m, d, wm, [5, 10], context="oracle-validity")
    assert wm_rep.recall[10] == 1.0
    assert discriminability_report(wm_rep, oracle_rep).verdict == NO_CLAIM


def test_validity_queries_end_with_body():
    d = toy_split(n_users=5, n_items=30)
    wm = WatermarkSequence((7, 8, 9))
    seen = []

    def record(seq):
        seen.append(seq)
        return np.zeros(30)

    watermark_validity(FixedScorer(30, record), d, wm, [10], sample=3)
    assert len(seen) == 3 and all(q[-2:] == [7, 8] for q in seen)


def test_verdicts():
    wm = MetricsReport("validity", {5: 0.99, 10: 0.997}, {5: 0.9, 10: 0.95}, 100)
    oracle = MetricsReport("oracle-validity", {5: 0.0, 10: 0.0}, {5: 0.0, 10: 0.0}, 100)
    v = discriminability_report(wm, oracle)
    assert v.verdict == CLAIM and v.exit_code == 0
    assert v.margins[10]["recall"] == pytest.approx(0.997)
    assert discriminability_report(wm, wm).verdict == NO_CLAIM
    after_ft = MetricsReport("validity", {5: 0.7, 10: 0.8}, {5: 0.5, 10: 0.6}, 100)
    assert discriminability_report(after_ft, oracle).verdict == CLAIM
    bad = MetricsReport("oracle-validity", {10: 0.0, 20: 0.0}, {10: 0.0, 20: 0.0}, 100)
    with pytest.raises(ValueError):
        discriminability_report(wm, bad)


def test_report_csv_round_trip(tmp_path):
    a = report_from_ranks([0, 3, 12], [5, 10], "utility")
    b = report_from_ranks([1, 1, 50], [5, 10], "validity")
    write_reports([a, b], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "context,k,recall,ndcg,n_queries"
    back = read_reports(tmp_path / "r.csv")
    assert [r.context for _, r in back] == ["utility", "validity"]
    for (_, got), want in zip(back, [a, b]):
        for k in (5, 10):
            assert got.recall[k] == pytest.approx(want.recall[k], abs=1e-6)
            assert got.ndcg[k] == pytest.approx(want.ndcg[k], abs=1e-6)
    write_reports([a, b], tmp_path / "p.csv", phases=["before", "after"])
    assert [ph for ph, _ in read_reports(tmp_path / "p.csv")] == ["before", "after"]


def test_empty_queries_rejected():
    with pytest.raises(ValueError):
        report_from_ranks([], [10], "utility")
