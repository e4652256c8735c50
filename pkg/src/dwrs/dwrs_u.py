"""Single-user watermark: rarest items inserted right before the user's
least-popular window of length n.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset, PopularityTable, UserSequence, compute_popularity
from .dwrs_d import MAX_TRIES, WatermarkError, WatermarkSequence, insert_block

log = logging.getLogger(__name__)

POSITIONS = ("bus", "aus", "bps", "aps", "begin", "middle", "end")


@dataclass
class UserWatermarkPlan:
    user: int
    watermark: WatermarkSequence
    n: int
    insert_pos: int
    c_n_start: int
    c_n_avg_pop: float
    position: str = "bus"
    pool: list[int] = field(default_factory=list)
    expansions: list[int] = field(default_factory=list)
    seed: int | None = None
    variant: str = "user"

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "user": self.user,
            "watermark": list(self.watermark.items),
            "n": self.n,
            "insert_pos": self.insert_pos,
            "c_n_start": self.c_n_start,
            "c_n_avg_pop": self.c_n_avg_pop,
            "position": self.position,
            "pool": self.pool,
            "expansions": self.expansions,
            "seed": self.seed,
            "insertions": [{"user": self.user, "pos": self.insert_pos, "fillers": []}],
        }

    @classmethod
    def from_json(cls, obj: dict) -> UserWatermarkPlan:
        return cls(
            user=int(obj["user"]),
            watermark=WatermarkSequence(tuple(obj["watermark"])),
            n=int(obj["n"]),
            insert_pos=int(obj["insert_pos"]),
            c_n_start=int(obj["c_n_start"]),
            c_n_avg_pop=float(obj["c_n_avg_pop"]),
            position=obj.get("position", "bus"),
            pool=list(obj.get("pool", [])),
            expansions=list(obj.get("expansions", [])),
            seed=obj.get("seed"),
        )


def popularity_groups(pop: PopularityTable) -> list[tuple[int, list[int]]]:
    """(count, items) groups in ascending count order."""
    groups: dict[int, list[int]] = {}
    for item in pop.ascending():
        groups.setdefault(pop[item], []).append(item)
    return sorted(groups.items())


def candidate_pool(pop: PopularityTable, l: int, exclude: Sequence[int] = ()) -> tuple[list[int], list[int]]:
    """Least-popular items, whole count-groups at a time, until >= l remain.

    Returns (pool, boundaries) where boundaries[k] is the pool size after the
    k-th group was added. Items in ``exclude`` never enter the pool.
    """
    if l < 2:
        raise ValueError("watermark length must be >= 2")
    skip = set(exclude)
    pool: list[int] = []
    bounds: list[int] = []
    for _, items in popularity_groups(pop):
        pool.extend(i for i in items if i not in skip)
        bounds.append(len(pool))
        if len(pool) >= l:
            return pool, bounds
    raise WatermarkError(f"only {len(pool)} candidate items available, need l={l}")


def most_unpopular_subsequence(seq: Sequence[int], n: int, pop: PopularityTable) -> tuple[int, float]:
    """Start index and mean popularity of the least-popular length-n window.

    Ties go to the earliest start.
    """
    if not 1 <= n <= len(seq):
        raise ValueError(f"window length n={n} must be in 1..{len(seq)}")
    sums = _window_sums(seq, n, pop)  # integer sums keep ties exact
    best = min(range(len(sums)), key=lambda s: (sums[s], s))
    return best, sums[best] / n


def most_popular_subsequence(seq: Sequence[int], n: int, pop: PopularityTable) -> tuple[int, float]:
    if not 1 <= n <= len(seq):
        raise ValueError(f"window length n={n} must be in 1..{len(seq)}")
    sums = _window_sums(seq, n, pop)
    best = min(range(len(sums)), key=lambda s: (-sums[s], s))
    return best, sums[best] / n


def _window_sums(seq: Sequence[int], n: int, pop: PopularityTable) -> list[int]:
    counts = [pop[i] for i in seq]
    out = [sum(counts[:n])]
    for s in range(1, len(seq) - n + 1):
        out.append(out[-1] - counts[s - 1] + counts[s + n - 1])
    return out


def resolve_target(d: Dataset, target) -> UserSequence:
    if target == "longest":
        return max(d.users, key=lambda u: (len(u.items), -u.user))
    users = d.by_user()
    if int(target) not in users:
        raise ValueError(f"unknown target user {target}")
    return users[int(target)]


def insert_position(seq: Sequence[int], n: int, pop: PopularityTable, position: str = "bus") -> tuple[int, int, float]:
    """(insert index, C_n start, C_n mean popularity) for a named position.

    bus/aus: before/after the least-popular window; bps/aps: before/after the
    most-popular window; begin/middle/end: fixed offsets.
    """
    start, mean = most_unpopular_subsequence(seq, n, pop)
    if position == "bus":
        return start, start, mean
    if position == "aus":
        return start + n, start, mean
    if position in ("bps", "aps"):
        ps, pm = most_popular_subsequence(seq, n, pop)
        return (ps if position == "bps" else ps + n), start, mean
    if position == "begin":
        return 0, start, mean
    if position == "middle":
        return len(seq) // 2, start, mean
    if position == "end":
        return len(seq), start, mean
    raise ValueError(f"unknown insert position {position!r}; choose from {POSITIONS}")


def embed_user_watermark(d: Dataset, target="longest", l: int = 10, n: int = 10,
                         rng: np.random.Generator | None = None, position: str = "bus",
                         pop: PopularityTable | None = None, max_tries: int = MAX_TRIES,
                         seed: int | None = None,
                         watermarked_users: Sequence[int] = ()) -> tuple[Dataset, UserWatermarkPlan]:
    """Watermark a single user's sequence; all other users are left untouched.

    Items come from the least-popular groups, excluding anything the target
    already holds. If the pool cannot supply an absent pattern the pool is
    widened group by group (each widening is logged in the plan).
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    pop = pop if pop is not None else compute_popularity(d)
    user = resolve_target(d, target)
    seq = user.items
    if user.user in set(watermarked_users):
        raise WatermarkError(f"user {user.user} already carries a user watermark")
    if len(seq) < n:
        raise ValueError(f"target user {user.user} has {len(seq)} items, fewer than n={n}")
    held = set(seq)

    pool, bounds = candidate_pool(pop, l, exclude=held)
    if len(bounds) > 1:
        log.info("DWRS-U pool widened over %d popularity groups to %d items", len(bounds), len(pool))
    for _ in range(max_tries):
        items = rng.choice(pool, size=l, replace=False).tolist()
        if not _occurs(seq, items):
            break
    else:
        raise WatermarkError("could not draw a watermark absent from the target sequence")
    wm = WatermarkSequence(tuple(items))
    pos, c_start, c_mean = insert_position(seq, n, pop, position)

    out = d.copy()
    for k, u in enumerate(out.users):
        if u.user == user.user:
            out.users[k] = UserSequence(u.user, insert_block(seq, pos, wm.items))
    plan = UserWatermarkPlan(user.user, wm, n, pos, c_start, float(c_mean), position,
                             pool=list(pool), expansions=bounds, seed=seed)
    return out, plan


def _occurs(seq: Sequence[int], pattern: Sequence[int]) -> bool:
    m = len(pattern)
    return any(list(seq[k:k + m]) == list(pattern) for k in range(len(seq) - m + 1))
