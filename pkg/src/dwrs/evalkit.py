"""Ranking metrics, leave-one-out utility, black-box watermark validity and
the ownership verdict."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, LeaveOneOutSplit
from .dwrs_d import WatermarkSequence
from .seqrec import Model

DEFAULT_KS = (5, 10, 20, 100)
CLAIM, NO_CLAIM = "claim", "no-claim"
EXIT_CLAIM, EXIT_ERROR, EXIT_NO_CLAIM = 0, 1, 2
REPORT_FIELDS = ["context", "k", "recall", "ndcg", "n_queries"]


@dataclass
class MetricsReport:
    context: str
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_queries: int

    @property
    def ks(self) -> list[int]:
        return sorted(self.recall)

    def rows(self) -> list[dict]:
        return [{"context": self.context, "k": k, "recall": self.recall[k],
                 "ndcg": self.ndcg[k], "n_queries": self.n_queries} for k in self.ks]

    def summary(self) -> str:
        cells = "  ".join(f"R@{k}={self.recall[k]:.4f} N@{k}={self.ndcg[k]:.4f}" for k in self.ks)
        return f"{self.context:<16} n={self.n_queries:<6} {cells}"


@dataclass
class Verdict:
    verdict: str
    margin_k: int
    threshold: float
    margins: dict[int, dict[str, float]] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return EXIT_CLAIM if self.verdict == CLAIM else EXIT_NO_CLAIM

    def summary(self) -> str:
        m = self.margins[self.margin_k]["recall"]
        return (f"verdict: {self.verdict} (recall@{self.margin_k} margin {m:+.4f}, "
                f"threshold {self.threshold})")


def rank_metrics(rank: int, ks: Sequence[int] = DEFAULT_KS) -> dict[int, tuple[float, float]]:
    """Per-k (recall, ndcg) for one query with a single relevant item."""
    if rank < 0:
        raise ValueError("rank must be >= 0")
    out = {}
    for k in ks:
        if k < 1:
            raise ValueError("cutoffs must be >= 1")
        hit = rank < k
        out[k] = (1.0 if hit else 0.0, 1.0 / math.log2(rank + 2) if hit else 0.0)
    return out


def ranks_of(scores: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """0-based rank of each target item under the stable descending order.

    ``scores[q, i-1]`` scores item i; ties rank lower item ids first.
    """
    targets = np.asarray(targets)
    t = scores[np.arange(len(targets)), targets - 1][:, None]
    ahead = (scores > t).sum(axis=1)
    idx = np.arange(scores.shape[1])[None]
    ties = ((scores == t) & (idx < (targets - 1)[:, None])).sum(axis=1)
    return ahead + ties


def report_from_ranks(ranks: Sequence[int], ks: Sequence[int], context: str) -> MetricsReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no queries to evaluate")
    recall, ndcg = {}, {}
    for k in ks:
        hit = ranks < k
        recall[k] = float(hit.sum() / ranks.size)
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(ranks + 2), 0.0).sum() / ranks.size)
    return MetricsReport(context, recall, ndcg, int(ranks.size))


def model_utility(m: Model, split: LeaveOneOutSplit, ks: Sequence[int] = DEFAULT_KS,
                  exclude_seen: bool = False, context: str = "utility") -> MetricsReport:
    """Rank of each user's test item given train prefix + validation item."""
    users = split.users
    if not users:
        raise ValueError("split has no evaluable users")
    queries = [split.test_query(u) for u in users]
    scores = m.score_batch(queries)
    if exclude_seen:
        for q, row in zip(queries, scores):
            row[np.array(sorted(set(q))) - 1] = -np.inf
    return report_from_ranks(ranks_of(scores, [split.test[u] for u in users]), ks, context)


def benign_queries(d: Dataset, sample: int | None = None, seed: int = 0) -> list[list[int]]:
    seqs = d.sequences()
    if sample is not None and sample < len(seqs):
        idx = np.sort(np.random.default_rng(seed).choice(len(seqs), size=sample, replace=False))
        seqs = [seqs[i] for i in idx]
    return seqs


def watermark_validity(m: Model, d: Dataset, wm: WatermarkSequence, ks: Sequence[int] = DEFAULT_KS,
                       sample: int | None = None, seed: int = 0,
                       context: str = "validity") -> MetricsReport:
    """Append the watermark body to benign sequences and rank the response.

    The model keeps the most recent max_len items, so the body always survives.
    """
    if len(wm) < 2:
        raise ValueError("watermark needs a body and a response (l >= 2)")
    queries = [list(s) + wm.body for s in benign_queries(d, sample, seed)]
    scores = m.score_batch(queries)
    return report_from_ranks(ranks_of(scores, [wm.response] * len(queries)), ks, context)


def random_rank_report(n_items: int, ks: Sequence[int], context: str = "random") -> MetricsReport:
    """Expected metrics when the target's rank is uniform over n_items."""
    recall = {k: min(k, n_items) / n_items for k in ks}
    ndcg = {k: sum(1.0 / math.log2(r + 2) for r in range(min(k, n_items))) / n_items for k in ks}
    return MetricsReport(context, recall, ndcg, n_items)


def discriminability_report(wm_report: MetricsReport, oracle_report: MetricsReport,
                            margin: float = 0.5, k: int = 10) -> Verdict:
    """Claim ownership iff recall@k(watermarked) - recall@k(oracle) >= margin."""
    if wm_report.ks != oracle_report.ks:
        raise ValueError(f"cutoff mismatch: {wm_report.ks} vs {oracle_report.ks}")
    if k not in wm_report.recall:
        raise ValueError(f"reports lack cutoff {k}")
    margins = {kk: {"recall": wm_report.recall[kk] - oracle_report.recall[kk],
                    "ndcg": wm_report.ndcg[kk] - oracle_report.ndcg[kk]} for kk in wm_report.ks}
    verdict = CLAIM if margins[k]["recall"] >= margin else NO_CLAIM
    return Verdict(verdict, k, margin, margins)


def best_verdict(pairs: Sequence[tuple[MetricsReport, MetricsReport]], margin: float = 0.5,
                 k: int = 10) -> Verdict:
    """Verdict for the response with the largest margin (hardened watermarks)."""
    verdicts = [discriminability_report(w, o, margin, k) for w, o in pairs]
    return max(verdicts, key=lambda v: v.margins[k]["recall"])


def write_reports(reports: Sequence[MetricsReport], path: str | Path,
                  phases: Sequence[str] | None = None) -> None:
    """CSV ``context,k,recall,ndcg,n_queries``; with ``phases`` a leading ``phase`` column."""
    fields = (["phase"] if phases is not None else []) + REPORT_FIELDS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for n, rep in enumerate(reports):
            for row in rep.rows():
                if phases is not None:
                    row = {"phase": phases[n], **row}
                row["recall"] = f"{row['recall']:.6f}"
                row["ndcg"] = f"{row['ndcg']:.6f}"
                w.writerow(row)


def read_reports(path: str | Path) -> list[tuple[str | None, MetricsReport]]:
    """Inverse of ``write_reports``: [(phase, report)] in file order."""
    groups: dict[tuple, MetricsReport] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row.get("phase"), row["context"])
            rep = groups.setdefault(key, MetricsReport(row["context"], {}, {}, int(row["n_queries"])))
            k = int(row["k"])
            rep.recall[k] = float(row["recall"])
            rep.ndcg[k] = float(row["ndcg"])
    return [(phase, rep) for (phase, _), rep in groups.items()]
