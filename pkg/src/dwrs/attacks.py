"""Watermark-removal attacks and the multi-response hardening countermeasure."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, LeaveOneOutSplit, PopularityTable, compute_popularity
from .dwrs_d import (ReceptiveFieldSpec, WatermarkRecord, WatermarkSequence,
                     embed_dataset_watermark, select_watermark_items, target_count)
from .evalkit import DEFAULT_KS, MetricsReport, model_utility, watermark_validity
from .seqrec import Model, ModelConfig, TrainConfig, train

log = logging.getLogger(__name__)


class RuleBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Rule:
    antecedent: frozenset[int]
    consequent: frozenset[int]
    support: int
    confidence: float

    def __str__(self) -> str:
        return f"{sorted(self.antecedent)} -> {sorted(self.consequent)} (sup={self.support}, conf={self.confidence:.3f})"


@dataclass
class AttackReport:
    name: str
    phases: list[str] = field(default_factory=list)
    validity: list[MetricsReport] = field(default_factory=list)
    utility: list[MetricsReport] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, phase: str, validity: MetricsReport, utility: MetricsReport) -> None:
        self.phases.append(phase)
        self.validity.append(validity)
        self.utility.append(utility)

    def before(self) -> tuple[MetricsReport, MetricsReport]:
        return self.validity[0], self.utility[0]

    def after(self) -> tuple[MetricsReport, MetricsReport]:
        return self.validity[-1], self.utility[-1]

    def flat(self) -> tuple[list[MetricsReport], list[str]]:
        reps, phases = [], []
        for ph, v, u in zip(self.phases, self.validity, self.utility):
            reps += [v, u]
            phases += [ph, ph]
        return reps, phases


def _snapshot(m: Model, wm: WatermarkSequence, benign: Dataset, split: LeaveOneOutSplit, ks,
              sample: int | None):
    return (watermark_validity(m, benign, wm, ks, sample=sample),
            model_utility(m, split, ks))


# -- finetuning --------------------------------------------------------------

def finetune_attack(m: Model, clean: Dataset, tc: TrainConfig, checkpoints: Sequence[int],
                    wm: WatermarkSequence, benign: Dataset, split: LeaveOneOutSplit,
                    ks: Sequence[int] = DEFAULT_KS, sample: int | None = None) -> tuple[Model, AttackReport]:
    """Keep training ``m`` on clean data only; snapshot validity/utility at checkpoints.

    ``benign`` supplies the validity queries and ``split`` the utility targets.
    Training runs for ``tc.epochs`` epochs (0 leaves the model unchanged).
    """
    report = AttackReport("finetune")
    report.add("before", *_snapshot(m, wm, benign, split, ks, sample))
    marks = set(checkpoints)

    def cb(epoch, model):
        if epoch in marks and epoch != tc.epochs:
            report.add(f"epoch-{epoch}", *_snapshot(model, wm, benign, split, ks, sample))

    if tc.epochs == 0:
        tuned = m.copy()
    else:
        tuned = train(clean, m.config, tc, init=m, callback=cb)
    report.add("after", *_snapshot(tuned, wm, benign, split, ks, sample))
    return tuned, report


# -- distillation ------------------------------------------------------------

def generate_sequences(m: Model, n_sequences: int, gen_len: int, rng: np.random.Generator,
                       top_k: int = 1, no_repeat: bool = True) -> list[list[int]]:
    """Autoregressive black-box sampling: random seed item, then the target's
    top-1 (or a uniform draw from its top-k) at each step."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if gen_len < 2:
        raise ValueError("gen_len must be >= 2")
    seqs = [[int(i)] for i in rng.integers(1, m.n_items + 1, size=n_sequences)]
    for _ in range(gen_len - 1):
        scores = m.score_batch([s[-m.config.max_len:] for s in seqs])
        if no_repeat:
            for s, row in zip(seqs, scores):
                row[np.array(s) - 1] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :top_k] + 1
        pick = top[:, 0] if top_k == 1 else top[np.arange(len(seqs)), rng.integers(0, top_k, len(seqs))]
        for s, item in zip(seqs, pick):
            s.append(int(item))
    return seqs


def distill_attack(m: Model, n_sequences: int, gen_len: int, surrogate_mc: ModelConfig,
                   surrogate_tc: TrainConfig, rng: np.random.Generator, wm: WatermarkSequence,
                   benign: Dataset, split: LeaveOneOutSplit, ks: Sequence[int] = DEFAULT_KS,
                   top_k: int = 1, no_repeat: bool = True,
                   sample: int | None = None) -> tuple[Model, AttackReport]:
    """Train a surrogate on sequences generated by querying ``m``.

    Cross-entropy on the generated next items stands in for a ranking
    distillation loss.
    """
    seqs = generate_sequences(m, n_sequences, gen_len, rng, top_k, no_repeat)
    surrogate = train(seqs, surrogate_mc, surrogate_tc, init=Model.init(m.n_items, surrogate_mc, surrogate_tc.seed))
    report = AttackReport("distill", meta={"n_sequences": n_sequences, "gen_len": gen_len,
                                           "top_k": top_k, "no_repeat": no_repeat,
                                           "seed_items": "uniform"})
    report.add("before", *_snapshot(m, wm, benign, split, ks, sample))
    report.add("after", *_snapshot(surrogate, wm, benign, split, ks, sample))
    return surrogate, report


# -- sequential rule mining ----------------------------------------------------

def _occurrence_tables(seqs: Sequence[Sequence[int]]):
    first, last = [], []
    for s in seqs:
        f, l_ = {}, {}
        for pos, item in enumerate(s):
            f.setdefault(item, pos)
            l_[item] = pos
        first.append(f)
        last.append(l_)
    return first, last


def rule_holds(first: dict, last: dict, X, Y) -> bool:
    """All of X occurs, and every item of Y occurs after X is complete."""
    if any(x not in first for x in X) or any(y not in last for y in Y):
        return False
    x_end = max(first[x] for x in X)
    return all(last[y] > x_end for y in Y)


def mine_rules(d: Dataset | Sequence[Sequence[int]], max_antecedent: int = 2, max_consequent: int = 2,
               min_support: int = 1, budget: int = 2_000_000,
               restrict_to: Sequence[int] | None = None) -> list[Rule]:
    """Every rule X -> Y within the size bounds with support >= min_support.

    support(X -> Y) counts sequences where all of X occur and all of Y occur
    strictly after the earliest point at which X is complete; confidence
    divides by the number of sequences containing all of X. Candidates come
    from itemsets frequent in at least ``min_support`` sequences. ``budget``
    caps the number of (X, Y) candidate pairs. ``restrict_to`` limits mining
    to rules over the given items.
    """
    if max_antecedent < 1 or max_consequent < 1 or min_support < 1:
        raise ValueError("size bounds and min_support must be >= 1")
    seqs = d.sequences() if isinstance(d, Dataset) else [list(s) for s in d]
    first, last = _occurrence_tables(seqs)
    allowed = set(restrict_to) if restrict_to is not None else None

    tids: dict[int, set[int]] = {}
    for sid, f in enumerate(first):
        for item in f:
            if allowed is None or item in allowed:
                tids.setdefault(item, set()).add(sid)
    singles = sorted(i for i, t in tids.items() if len(t) >= min_support)

    # apriori over itemsets up to the combined rule size
    max_size = max_antecedent + max_consequent
    frequent: dict[frozenset, set[int]] = {frozenset([i]): tids[i] for i in singles}
    level = dict(frequent)
    for size in range(2, max_size + 1):
        nxt: dict[frozenset, set[int]] = {}
        keys = sorted(level, key=lambda s: sorted(s))
        for a_idx, a in enumerate(keys):
            for i in singles:
                if i <= max(a):
                    continue
                cand = a | {i}
                if cand in nxt:
                    continue
                if any(cand - {x} not in level for x in cand):
                    continue
                t = level[a] & tids[i]
                if len(t) >= min_support:
                    nxt[cand] = t
            if len(frequent) + len(nxt) > budget:
                raise RuleBudgetError(f"more than {budget} frequent itemsets; raise min_support or lower bounds")
        if not nxt:
            break
        frequent.update(nxt)
        level = nxt

    rules = []
    pairs = 0
    for z, tz in frequent.items():
        if len(z) < 2:
            continue
        items = sorted(z)
        for r in range(1, len(items)):
            for X in itertools.combinations(items, r):
                Y = tuple(i for i in items if i not in X)
                if len(X) > max_antecedent or len(Y) > max_consequent:
                    continue
                pairs += 1
                if pairs > budget:
                    raise RuleBudgetError(f"more than {budget} candidate rules; raise min_support or lower bounds")
                sup = sum(1 for sid in tz if rule_holds(first[sid], last[sid], X, Y))
                if sup >= min_support:
                    conf = sup / len(frequent[frozenset(X)])
                    rules.append(Rule(frozenset(X), frozenset(Y), sup, conf))
    rules.sort(key=lambda r: (-r.confidence, -r.support, sorted(r.antecedent), sorted(r.consequent)))
    return rules


def rule_confidence(d: Dataset | Sequence[Sequence[int]], X: Sequence[int], Y: Sequence[int]) -> tuple[int, float]:
    """(support, confidence) of one rule, computed directly."""
    seqs = d.sequences() if isinstance(d, Dataset) else d
    first, last = _occurrence_tables(seqs)
    has_x = [k for k, f in enumerate(first) if all(x in f for x in X)]
    sup = sum(1 for k in has_x if rule_holds(first[k], last[k], X, Y))
    return sup, (sup / len(has_x) if has_x else 0.0)


def watermark_rules(wm: WatermarkSequence) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """All order-respecting splits X -> Y of a watermark (five for l=3)."""
    items = wm.items
    out = []
    # X any non-empty subset, Y a non-empty subset of the items after max(X)
    idx = range(len(items))
    for r in range(1, len(items)):
        for xs in itertools.combinations(idx, r):
            rest = [j for j in idx if j > max(xs)]
            for q in range(1, len(rest) + 1):
                for ys in itertools.combinations(rest, q):
                    out.append((tuple(items[j] for j in xs), tuple(items[j] for j in ys)))
    return out


def write_rules(rules: Sequence[Rule], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["antecedent", "consequent", "support", "confidence"])
        for r in rules:
            w.writerow([";".join(map(str, sorted(r.antecedent))), ";".join(map(str, sorted(r.consequent))),
                        r.support, f"{r.confidence:.6f}"])


def read_rules(path: str | Path) -> list[Rule]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [Rule(frozenset(int(x) for x in row["antecedent"].split(";")),
                     frozenset(int(y) for y in row["consequent"].split(";")),
                     int(row["support"]), float(row["confidence"]))
                for row in csv.DictReader(fh)]


# -- hardening ---------------------------------------------------------------

def harden_watermark(d: Dataset, base: WatermarkSequence, n_responses: int = 2, n_shuffled: int = 0,
                     p: float = 0.01, rf: ReceptiveFieldSpec | None = None,
                     rng: np.random.Generator | None = None, pop: PopularityTable | None = None,
                     tail_fraction: float = 0.10, seed: int | None = None,
                     uniqueness: bool = True) -> tuple[Dataset, list[WatermarkRecord]]:
    """Several responses under one body, plus response-less shuffled bodies.

    Each full watermark gets the same insertion count ceil(p*|U|); all share
    one filler ledger and no user is watermarked twice. The first response is
    the base watermark's own response.
    """
    if n_responses < 1:
        raise ValueError("n_responses must be >= 1")
    if n_shuffled < 0:
        raise ValueError("n_shuffled must be >= 0")
    rf = rf or ReceptiveFieldSpec()
    rng = rng if rng is not None else np.random.default_rng(seed)
    pop = pop if pop is not None else compute_popularity(d)
    body = base.body

    responses = [base.response]
    while len(responses) < n_responses:
        extra = select_watermark_items(pop, d, 2, tail_fraction, rng, exclude=set(body) | set(responses))
        responses.append(extra.items[0])
    all_items = set(body) | set(responses)

    want = target_count(p, len(d.users))
    ledger: set[int] = set()
    used_users: set[int] = set()
    records = []
    out = d
    for y in responses:
        wm = WatermarkSequence(tuple(body) + (y,))
        out, rec = embed_dataset_watermark(out, wm, p, rf, rng, count=want, filler_ledger=ledger,
                                           forbidden_items=all_items, skip_users=used_users,
                                           uniqueness=uniqueness, seed=seed)
        rec.variant = "hardened"
        rec.meta = {"role": "response", "response": y}
        used_users |= {u for u, _ in rec.insertions}
        records.append(rec)

    if n_shuffled:
        perms = [tuple(q) for q in itertools.permutations(body) if list(q) != body] or [tuple(body)]
        shuffled = WatermarkSequence(perms[int(rng.integers(len(perms)))])
        out, rec = embed_dataset_watermark(out, shuffled, p, rf, rng, count=n_shuffled,
                                           filler_ledger=ledger, forbidden_items=all_items,
                                           skip_users=used_users, uniqueness=uniqueness, seed=seed)
        rec.variant = "hardened"
        rec.meta = {"role": "shuffled-body"}
        records.append(rec)
    counts = [r.achieved_count for r in records if r.meta["role"] == "response"]
    if len(set(counts)) > 1:
        log.warning("unequal insertion counts across responses: %s", counts)
    return out, records
