"""Interaction data: ingestion, popularity, leave-one-out splits, synthetic data.

Item ids are dense and 1-based; 0 is the padding token and never appears in a
stored sequence.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = 0


class DatasetError(ValueError):
    pass


@dataclass
class UserSequence:
    user: int
    items: list[int]


@dataclass
class Dataset:
    users: list[UserSequence]
    n_items: int
    user_labels: dict[int, str] | None = None

    def __post_init__(self):
        seen = set()
        for u in self.users:
            if u.user in seen:
                raise DatasetError(f"duplicate user id {u.user}")
            seen.add(u.user)
            if not u.items:
                raise DatasetError(f"user {u.user} has an empty sequence")
            for i in u.items:
                if not 1 <= i <= self.n_items:
                    raise DatasetError(f"user {u.user}: item {i} outside 1..{self.n_items}")

    def __len__(self) -> int:
        return len(self.users)

    def sequences(self) -> list[list[int]]:
        return [u.items for u in self.users]

    def by_user(self) -> dict[int, UserSequence]:
        return {u.user: u for u in self.users}

    def n_interactions(self) -> int:
        return sum(len(u.items) for u in self.users)

    def copy(self) -> Dataset:
        return Dataset(
            [UserSequence(u.user, list(u.items)) for u in self.users],
            self.n_items,
            dict(self.user_labels) if self.user_labels else None,
        )

    def subset(self, user_ids: Iterable[int]) -> Dataset:
        keep = set(user_ids)
        users = [UserSequence(u.user, list(u.items)) for u in self.users if u.user in keep]
        return Dataset(users, self.n_items, self.user_labels)


@dataclass
class PopularityTable:
    counts: dict[int, int] = field(default_factory=dict)

    def __getitem__(self, item: int) -> int:
        return self.counts.get(item, 0)

    def __len__(self) -> int:
        return len(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())

    def ascending(self) -> list[int]:
        """Items from least to most popular; ties by item id."""
        return sorted(self.counts, key=lambda i: (self.counts[i], i))

    def descending(self) -> list[int]:
        return sorted(self.counts, key=lambda i: (-self.counts[i], i))


@dataclass
class LeaveOneOutSplit:
    train: dict[int, list[int]]
    val: dict[int, int]
    test: dict[int, int]
    skipped: list[tuple[int, str]]

    @property
    def users(self) -> list[int]:
        return list(self.test)

    def test_query(self, user: int) -> list[int]:
        return self.train[user] + [self.val[user]]


# -- ingestion ---------------------------------------------------------------

def _densify(tokens: Iterable[str]) -> dict[str, int]:
    uniq = set(tokens)
    if all(t.lstrip("-").isdigit() for t in uniq):
        order = sorted(uniq, key=int)
    else:
        order = sorted(uniq)
    return {t: k + 1 for k, t in enumerate(order)}


def load_dataset(path: str | Path, format: str = "sequence-lines", densify: bool = True,
                 n_items: int | None = None) -> Dataset:
    """Read a dataset file.

    ``sequence-lines``: ``user<TAB>i1,i2,...`` per line, items in order.
    ``triplet-log``: ``user<TAB>item<TAB>timestamp`` per line; each user's items
    are sorted by timestamp (stable w.r.t. file order).

    With ``densify`` the raw item tokens are mapped to 1..n in sorted order, so
    an already-dense canonical file maps onto itself. Without it, item tokens
    must be positive integers and are kept as-is.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = [(n, line) for n, line in enumerate(text.split("\n"), start=1) if line.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty dataset")

    raw: dict[str, list[str]] = {}
    if format == "sequence-lines":
        for n, line in lines:
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetError(f"{path}:{n}: expected 'user<TAB>items'")
            items = parts[1].split(",")
            if any(not t.strip() for t in items):
                raise DatasetError(f"{path}:{n}: empty item token")
            if parts[0] in raw:
                raise DatasetError(f"{path}:{n}: duplicate user {parts[0]!r}")
            raw[parts[0]] = [t.strip() for t in items]
    elif format == "triplet-log":
        events: dict[str, list[tuple[int, int, str]]] = {}
        for n, line in lines:
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{n}: expected 'user<TAB>item<TAB>timestamp'")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DatasetError(f"{path}:{n}: non-integer timestamp {parts[2]!r}") from None
            events.setdefault(parts[0], []).append((ts, n, parts[1].strip()))
        raw = {u: [it for _, _, it in sorted(ev)] for u, ev in events.items()}
    else:
        raise DatasetError(f"unknown format {format!r}")

    if densify:
        mapping = _densify(t for seq in raw.values() for t in seq)
        convert = mapping.__getitem__
        top = len(mapping)
    else:
        def convert(t: str) -> int:
            if not t.isdigit() or int(t) < 1:
                raise DatasetError(f"{path}: item token {t!r} is not a positive integer id")
            return int(t)
        top = 0

    users = []
    labels: dict[int, str] = {}
    int_users = all(u.isdigit() for u in raw)
    for k, (u, seq) in enumerate(raw.items()):
        uid = int(u) if int_users else k
        if not int_users:
            labels[uid] = u
        items = [convert(t) for t in seq]
        top = max(top, max(items))
        users.append(UserSequence(uid, items))
    if n_items is not None:
        if n_items < top:
            raise DatasetError(f"n_items={n_items} but file references item {top}")
        top = n_items
    return Dataset(users, top, labels or None)


def save_dataset(d: Dataset, path: str | Path) -> None:
    """Write the canonical sequence-lines form."""
    out = []
    for u in d.users:
        label = d.user_labels[u.user] if d.user_labels else str(u.user)
        out.append(f"{label}\t{','.join(map(str, u.items))}\n")
    Path(path).write_text("".join(out), encoding="utf-8")


# -- statistics & splits -----------------------------------------------------

def compute_popularity(d: Dataset) -> PopularityTable:
    counts: Counter[int] = Counter()
    for u in d.users:
        counts.update(u.items)
    return PopularityTable(dict(counts))


def split_leave_one_out(d: Dataset) -> LeaveOneOutSplit:
    train, val, test, skipped = {}, {}, {}, []
    for u in d.users:
        if len(u.items) < 3:
            skipped.append((u.user, f"length {len(u.items)} < 3"))
            continue
        train[u.user] = u.items[:-2]
        val[u.user] = u.items[-2]
        test[u.user] = u.items[-1]
    return LeaveOneOutSplit(train, val, test, skipped)


def training_sequences(d: Dataset) -> list[list[int]]:
    """Sequences used for fitting: held-out val/test targets removed.

    Users too short for evaluation keep their full sequence.
    """
    return [u.items[:-2] if len(u.items) >= 3 else list(u.items) for u in d.users]


def write_skip_report(split: LeaveOneOutSplit, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "reason"])
        w.writerows(split.skipped)


def split_users(d: Dataset, holdout: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random user-level partition into (main, holdout) datasets."""
    if not 0 < holdout < 1:
        raise ValueError("holdout fraction must be in (0, 1)")
    ids = np.array([u.user for u in d.users])
    n_hold = int(round(holdout * len(ids)))
    hold = set(rng.permutation(ids)[:n_hold].tolist())
    return d.subset(i for i in ids if i not in hold), d.subset(hold)


def contains_pattern(d: Dataset | Sequence[Sequence[int]], pattern: Sequence[int]) -> bool:
    """True iff ``pattern`` occurs as a consecutive run in some sequence."""
    if len(pattern) < 1:
        raise ValueError("pattern must be non-empty")
    seqs = d.sequences() if isinstance(d, Dataset) else d
    pat = list(pattern)
    m = len(pat)
    first = pat[0]
    for seq in seqs:
        n = len(seq)
        for k in range(n - m + 1):
            if seq[k] == first and seq[k:k + m] == pat:
                return True
    return False


# -- synthetic data ----------------------------------------------------------

NEIGHBORHOOD = 8
ZIPF_EXPONENT = 1.0


def ring_neighbors(item: int, n_items: int, width: int = NEIGHBORHOOD) -> list[int]:
    """The ``width`` items following ``item`` on the ring 1..n_items."""
    return [(item - 1 + s) % n_items + 1 for s in range(1, width + 1)]


def generate_synthetic(n_users: int, n_items: int, len_range: tuple[int, int] = (20, 50),
                       locality: float = 0.8, seed: int = 0) -> Dataset:
    """Markov-chain sequences over a ring of items.

    Each step moves, with probability ``locality``, to one of the next
    NEIGHBORHOOD items on the ring and otherwise jumps anywhere; both moves
    are weighted by a Zipf-like item attractiveness, which produces the
    long-tailed popularity. Items do not repeat within a sequence unless the
    whole neighborhood is already used.
    """
    lo, hi = len_range
    if n_items < 20:
        raise ValueError("n_items must be >= 20")
    if n_users < 1:
        raise ValueError("n_users must be >= 1")
    if lo < 3 or hi < lo:
        raise ValueError("len_range must satisfy 3 <= min <= max")
    if hi > n_items:
        raise ValueError("sequences longer than n_items cannot avoid repeats")
    if not 0 < locality <= 1:
        raise ValueError("locality must be in (0, 1]")

    rng = np.random.default_rng(seed)
    ranks = rng.permutation(n_items) + 1
    weight = np.concatenate([[0.0], 1.0 / ranks ** ZIPF_EXPONENT])
    neigh = np.array([ring_neighbors(i, n_items) for i in range(1, n_items + 1)])
    neigh = np.vstack([np.zeros(NEIGHBORHOOD, dtype=int), neigh])

    def draw(cands: np.ndarray) -> int:
        w = weight[cands]
        c = np.cumsum(w)
        return int(cands[np.searchsorted(c, rng.random() * c[-1], side="right")])

    all_items = np.arange(1, n_items + 1)
    users = []
    for u in range(n_users):
        length = int(rng.integers(lo, hi + 1))
        cur = draw(all_items)
        seq = [cur]
        used = np.zeros(n_items + 1, dtype=bool)
        used[cur] = True
        while len(seq) < length:
            if rng.random() < locality:
                cands = neigh[cur]
                fresh = cands[~used[cands]]
                nxt = draw(fresh if fresh.size else cands)
            else:
                nxt = draw(all_items[~used[1:]])
            seq.append(nxt)
            used[nxt] = True
            cur = nxt
        users.append(UserSequence(u, seq))
    return Dataset(users, n_items)


def decile_skew(pop: PopularityTable, n_items: int) -> float:
    """Interactions of the top popularity decile over the bottom decile."""
    counts = np.sort(np.array([pop[i] for i in range(1, n_items + 1)]))
    k = max(1, math.ceil(n_items / 10))
    bottom = counts[:k].sum()
    return float(counts[-k:].sum() / max(bottom, 1))
