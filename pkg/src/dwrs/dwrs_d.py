"""Dataset-level watermark: a short run of unpopular items spliced into a
fraction of users, with receptive-field filler items kept unique.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Dataset, PopularityTable, UserSequence, contains_pattern

log = logging.getLogger(__name__)

MAX_TRIES = 1000


class WatermarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class WatermarkSequence:
    items: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        if len(self.items) < 1:
            raise ValueError("watermark needs at least one item")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"watermark items must be distinct: {self.items}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def body(self) -> list[int]:
        return list(self.items[:-1])

    @property
    def response(self) -> int:
        return self.items[-1]


@dataclass(frozen=True)
class ReceptiveFieldSpec:
    before: int = 5
    after: int = 5
    whole: bool = False

    def __post_init__(self):
        if self.before < 0 or self.after < 0:
            raise ValueError("receptive field counts must be >= 0")

    @classmethod
    def parse(cls, value) -> ReceptiveFieldSpec:
        if isinstance(value, ReceptiveFieldSpec):
            return value
        if value in ("whole", "all", None):
            return cls(0, 0, whole=True)
        before, after = value
        return cls(int(before), int(after))

    def to_json(self):
        return "whole" if self.whole else [self.before, self.after]


@dataclass
class WatermarkRecord:
    watermark: WatermarkSequence
    insertions: list[tuple[int, int]] = field(default_factory=list)
    filler_items: set[int] = field(default_factory=set)
    requested_ratio: float = 0.0
    target_count: int = 0
    achieved_count: int = 0
    rf: ReceptiveFieldSpec = field(default_factory=ReceptiveFieldSpec)
    seed: int | None = None
    variant: str = "dataset"
    partial: bool = False
    fillers: list[list[int]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "watermark": list(self.watermark.items),
            "seed": self.seed,
            "requested_ratio": self.requested_ratio,
            "target_count": self.target_count,
            "achieved_count": self.achieved_count,
            "partial": self.partial,
            "rf": self.rf.to_json(),
            "insertions": [
                {"user": u, "pos": p, "fillers": sorted(f)}
                for (u, p), f in zip(self.insertions, self.fillers)
            ],
            "filler_items": sorted(self.filler_items),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> WatermarkRecord:
        ins = obj.get("insertions", [])
        return cls(
            watermark=WatermarkSequence(tuple(obj["watermark"])),
            insertions=[(int(e["user"]), int(e["pos"])) for e in ins],
            filler_items=set(obj.get("filler_items", [])),
            requested_ratio=obj.get("requested_ratio", 0.0),
            target_count=obj.get("target_count", 0),
            achieved_count=obj.get("achieved_count", len(ins)),
            rf=ReceptiveFieldSpec.parse(obj.get("rf", [5, 5])),
            seed=obj.get("seed"),
            variant=obj.get("variant", "dataset"),
            partial=obj.get("partial", False),
            fillers=[list(e.get("fillers", [])) for e in ins],
            meta=obj.get("meta", {}),
        )


def save_records(records: Sequence, path: str | Path) -> None:
    """Write one or more records (dataset or user variants) as JSON."""
    payload = {"format": "dwrs-watermark", "version": 1,
               "records": [r.to_json() for r in records]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_records(path: str | Path) -> list:
    from .dwrs_u import UserWatermarkPlan

    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != "dwrs-watermark":
        raise ValueError(f"{path}: not a watermark record file")
    out = []
    for r in obj["records"]:
        out.append(UserWatermarkPlan.from_json(r) if r.get("variant") == "user"
                   else WatermarkRecord.from_json(r))
    return out


# -- construction ------------------------------------------------------------

def tail_pool(pop: PopularityTable, tail_fraction: float, popular: bool = False) -> list[int]:
    """The ceil(tail_fraction * |items|) least (or most) popular items."""
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must be in (0, 1]")
    order = pop.descending() if popular else pop.ascending()
    return order[:math.ceil(tail_fraction * len(order))]


def select_watermark_items(pop: PopularityTable, d: Dataset, l: int = 3, tail_fraction: float = 0.10,
                           rng: np.random.Generator | None = None, popular: bool = False,
                           exclude: Iterable[int] = (), max_tries: int = MAX_TRIES) -> WatermarkSequence:
    """Sample l distinct tail items forming a pattern absent from ``d``.

    ``popular`` draws from the head instead (ablation only).
    """
    if l < 2:
        raise ValueError("watermark length must be >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    skip = set(exclude)
    pool = [i for i in tail_pool(pop, tail_fraction, popular) if i not in skip]
    if len(pool) < l:
        raise WatermarkError(
            f"candidate pool has {len(pool)} items but l={l}; increase tail_fraction")
    for _ in range(max_tries):
        items = rng.choice(pool, size=l, replace=False)
        if not contains_pattern(d, items.tolist()):
            return WatermarkSequence(tuple(items.tolist()))
    raise WatermarkError(f"no absent pattern found after {max_tries} draws")


def filler_set(seq: Sequence[int], pos: int, l: int, rf: ReceptiveFieldSpec) -> set[int]:
    """Original items inside the receptive field of a block inserted at ``pos``.

    ``l`` is accepted for symmetry with the insertion call; the fillers are the
    ``rf.before`` items preceding ``pos`` and the ``rf.after`` items at/after it
    (which end up following the block).
    """
    if not 0 <= pos <= len(seq):
        raise ValueError(f"pos {pos} outside 0..{len(seq)}")
    if rf.whole:
        return set(seq)
    return set(seq[max(0, pos - rf.before):pos]) | set(seq[pos:pos + rf.after])


def insert_block(seq: Sequence[int], pos: int, block: Sequence[int]) -> list[int]:
    return list(seq[:pos]) + list(block) + list(seq[pos:])


def target_count(p: float, n_users: int) -> int:
    if not 0 < p <= 1:
        raise ValueError("insert ratio p must be in (0, 1]")
    return math.ceil(p * n_users - 1e-9)


def embed_dataset_watermark(d: Dataset, wm: WatermarkSequence, p: float = 0.01,
                            rf: ReceptiveFieldSpec | None = None,
                            rng: np.random.Generator | None = None, *,
                            count: int | None = None,
                            filler_ledger: set[int] | None = None,
                            forbidden_items: Iterable[int] = (),
                            skip_users: Iterable[int] = (),
                            uniqueness: bool = True,
                            seed: int | None = None) -> tuple[Dataset, WatermarkRecord]:
    """Insert ``wm`` as a consecutive block into ceil(p*|U|) users.

    Users holding any watermark item (or any of ``forbidden_items``) are
    ineligible. With ``uniqueness`` a position is accepted only if its filler
    set is disjoint from the fillers accumulated so far; positions of a user
    are tried in random order without replacement before moving on. Without
    it (the random-position baseline) the first sampled position is taken.

    ``filler_ledger`` is shared and extended in place so several watermarks
    can respect one uniqueness constraint. The input dataset is not modified.
    """
    rf = rf or ReceptiveFieldSpec()
    rng = rng if rng is not None else np.random.default_rng(seed)
    want = count if count is not None else target_count(p, len(d.users))
    banned = set(wm.items) | set(forbidden_items)
    skip = set(skip_users)
    eligible = [k for k, u in enumerate(d.users)
                if u.user not in skip and banned.isdisjoint(u.items)]
    if not eligible:
        raise WatermarkError("no eligible user: every user holds a watermark item")

    ledger = filler_ledger if filler_ledger is not None else set()
    out = d.copy()
    record = WatermarkRecord(wm, requested_ratio=p, target_count=want, rf=rf, seed=seed,
                             variant="dataset" if uniqueness else "baseline")
    for k in rng.permutation(eligible):
        if len(record.insertions) >= want:
            break
        seq = d.users[k].items
        for pos in rng.permutation(len(seq) + 1):
            fill = filler_set(seq, int(pos), len(wm), rf)
            if uniqueness and not fill.isdisjoint(ledger):
                continue
            ledger |= fill
            record.filler_items |= fill
            record.fillers.append(sorted(fill))
            record.insertions.append((d.users[k].user, int(pos)))
            out.users[k] = UserSequence(d.users[k].user, insert_block(seq, int(pos), wm.items))
            break
    record.achieved_count = len(record.insertions)
    record.partial = record.achieved_count < want
    if record.partial:
        log.warning("watermark placed in %d of %d requested users", record.achieved_count, want)
    return out, record


def embed_baseline_watermark(d: Dataset, wm: WatermarkSequence, p: float = 0.01,
                             rng: np.random.Generator | None = None, **kw) -> tuple[Dataset, WatermarkRecord]:
    """Random users, random positions, no filler bookkeeping."""
    return embed_dataset_watermark(d, wm, p, ReceptiveFieldSpec(0, 0), rng, uniqueness=False, **kw)


def remove_block(seq: Sequence[int], pos: int, l: int) -> list[int]:
    return list(seq[:pos]) + list(seq[pos + l:])
