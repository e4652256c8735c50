"""Micro next-item recommender: one causal single-head attention layer.

Forward pass for a left-padded window ``ids`` of length L::

    x      = (E[ids] + P) * valid
    alpha  = softmax(mask(x Wq (x Wk)^T / sqrt(d)))
    h      = x + alpha (x Wv)
    o      = h + relu(h W1 + b1) W2 + b2
    logits = o E^T                  (weight-tied, padding column excluded)

Gradients are written out by hand and validated with central differences in
``gradient_check``. Everything runs in float64.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD, Dataset, training_sequences

log = logging.getLogger(__name__)

PARAM_NAMES = ("E", "P", "Wq", "Wk", "Wv", "W1", "b1", "W2", "b2")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 32
    max_len: int = 50
    ffn_width: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model < 4:
            raise ValueError("d_model must be >= 4")
        if self.max_len < 4:
            raise ValueError("max_len must be >= 4")
        if self.ffn_width < 1:
            raise ValueError("ffn_width must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.005
    optimizer: str = "adam"
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Model:
    config: ModelConfig
    n_items: int
    params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, n_items: int, config: ModelConfig, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        d, L, f = config.d_model, config.max_len, config.ffn_width

        def glorot(a, b):
            return rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b))

        E = rng.normal(0.0, 0.1, size=(n_items + 1, d))
        E[PAD] = 0.0
        params = {
            "E": E,
            "P": rng.normal(0.0, 0.1, size=(L, d)),
            "Wq": glorot(d, d),
            "Wk": glorot(d, d),
            "Wv": glorot(d, d),
            "W1": glorot(d, f),
            "b1": np.zeros(f),
            "W2": glorot(f, d),
            "b2": np.zeros(d),
        }
        return cls(config, n_items, params)

    def copy(self) -> Model:
        return Model(self.config, self.n_items,
                     {k: v.copy() for k, v in self.params.items()}, list(self.history))

    # -- core passes -----------------------------------------------------

    def forward(self, ids: np.ndarray, rng: np.random.Generator | None = None,
                last_only: bool = False) -> tuple[np.ndarray, dict]:
        """Return (output states o, cache). ``rng`` enables dropout."""
        p = self.params
        B, L = ids.shape
        d = self.config.d_model
        valid = ids != PAD
        m = valid[..., None].astype(float)
        x = (p["E"][ids] + p["P"][-L:]) * m
        drop = self.config.dropout if rng is not None else 0.0
        keep1 = keep2 = None
        if drop > 0:
            keep1 = (rng.random(x.shape) >= drop) / (1.0 - drop)
            x = x * keep1

        Q = x @ p["Wq"]
        K = x @ p["Wk"]
        V = x @ p["Wv"]
        scale = 1.0 / math.sqrt(d)
        allowed = attention_mask(valid)
        S = np.where(allowed, Q @ K.transpose(0, 2, 1) * scale, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        Z = A @ V
        h = x + Z
        U = h @ p["W1"] + p["b1"]
        R = np.maximum(U, 0.0)
        F = R @ p["W2"] + p["b2"]
        if drop > 0:
            keep2 = (rng.random(F.shape) >= drop) / (1.0 - drop)
            F = F * keep2
        o = h + F
        cache = dict(ids=ids, m=m, x=x, Q=Q, K=K, V=V, A=A, h=h, U=U, R=R,
                     keep1=keep1, keep2=keep2, scale=scale)
        if last_only:
            return o[:, -1], cache
        return o, cache

    def logits(self, o: np.ndarray) -> np.ndarray:
        z = o @ self.params["E"].T
        z[..., PAD] = -np.inf
        return z

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        o, _ = self.forward(inputs)
        return _cross_entropy(self.logits(o), targets)[0]

    def loss_and_grads(self, inputs: np.ndarray, targets: np.ndarray,
                       rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
        p = self.params
        o, c = self.forward(inputs, rng)
        z = self.logits(o)
        loss, dz = _cross_entropy(z, targets)
        V = p["E"].shape[0]
        d = self.config.d_model

        g = {}
        o2 = o.reshape(-1, d)
        dz2 = dz.reshape(-1, V)
        g["E"] = dz2.T @ o2
        do = dz @ p["E"]

        dh = do.copy()
        dF = do if c["keep2"] is None else do * c["keep2"]
        g["W2"] = c["R"].reshape(-1, c["R"].shape[-1]).T @ dF.reshape(-1, d)
        g["b2"] = dF.sum(axis=(0, 1))
        dU = (dF @ p["W2"].T) * (c["U"] > 0)
        g["W1"] = c["h"].reshape(-1, d).T @ dU.reshape(-1, dU.shape[-1])
        g["b1"] = dU.sum(axis=(0, 1))
        dh += dU @ p["W1"].T

        dx = dh.copy()
        dZ = dh
        A = c["A"]
        dA = dZ @ c["V"].transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dZ
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c["scale"]
        dQ = dS @ c["K"]
        dK = dS.transpose(0, 2, 1) @ c["Q"]
        x2 = c["x"].reshape(-1, d)
        g["Wq"] = x2.T @ dQ.reshape(-1, d)
        g["Wk"] = x2.T @ dK.reshape(-1, d)
        g["Wv"] = x2.T @ dV.reshape(-1, d)
        dx += dQ @ p["Wq"].T + dK @ p["Wk"].T + dV @ p["Wv"].T

        if c["keep1"] is not None:
            dx = dx * c["keep1"]
        dx = dx * c["m"]
        L = inputs.shape[1]
        gP = np.zeros_like(p["P"])
        gP[-L:] = dx.sum(axis=0)
        g["P"] = gP
        np.add.at(g["E"], inputs.ravel(), dx.reshape(-1, d))
        g["E"][PAD] = 0.0
        return loss, g

    # -- inference -------------------------------------------------------

    def _check_items(self, seq: Sequence[int]) -> list[int]:
        items = [int(i) for i in seq]
        for i in items:
            if not 0 <= i <= self.n_items:
                raise ValueError(f"unknown item id {i}")
        items = [i for i in items if i != PAD]
        if not items:
            raise ValueError("query sequence has no items")
        return items

    def score_batch(self, seqs: Sequence[Sequence[int]], batch_size: int = 512) -> np.ndarray:
        """Scores over items 1..n_items for each query; shape (len(seqs), n_items)."""
        L = self.config.max_len
        out = np.empty((len(seqs), self.n_items))
        for s in range(0, len(seqs), batch_size):
            chunk = [self._check_items(q) for q in seqs[s:s + batch_size]]
            ids = np.stack([query_window(q, L) for q in chunk])
            o, _ = self.forward(ids, last_only=True)
            out[s:s + len(chunk)] = o @ self.params["E"][1:].T
        return out


def attention_mask(valid: np.ndarray) -> np.ndarray:
    """Causal mask over real keys; padded query rows may attend to themselves."""
    B, L = valid.shape
    allowed = np.tril(np.ones((L, L), dtype=bool))[None] & valid[:, None, :]
    empty = ~allowed.any(axis=-1)
    if empty.any():
        diag = np.broadcast_to(np.eye(L, dtype=bool), allowed.shape)
        allowed = allowed | (empty[..., None] & diag)
    return allowed


def _cross_entropy(z: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over positions with a non-pad target."""
    w = targets != PAD
    n = max(int(w.sum()), 1)
    zmax = z[..., 1:].max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    e[..., PAD] = 0.0
    sumexp = e.sum(axis=-1, keepdims=True)
    logp_t = np.take_along_axis(z, targets[..., None], axis=-1) - zmax - np.log(sumexp)
    loss = float(-np.where(w, logp_t[..., 0], 0.0).sum() / n)
    dz = e / sumexp
    np.put_along_axis(dz, targets[..., None],
                      np.take_along_axis(dz, targets[..., None], axis=-1) - 1.0, axis=-1)
    dz *= (w / n)[..., None]
    dz[..., PAD] = 0.0
    return loss, dz


# -- windows -----------------------------------------------------------------

def query_window(seq: Sequence[int], L: int) -> np.ndarray:
    """Most recent L items, left-padded with PAD."""
    tail = list(seq)[-L:]
    return np.array([PAD] * (L - len(tail)) + tail, dtype=np.int64)


def training_windows(seqs: Sequence[Sequence[int]], L: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut each sequence into windows whose targets tile every position after the first.

    Windows are taken from the end backwards; each covers up to L targets and
    is left-padded.
    """
    inputs, targets = [], []
    for seq in seqs:
        end = len(seq)
        while end >= 2:
            start = max(0, end - L - 1)
            piece = seq[start:end]
            pad = L - (len(piece) - 1)
            inputs.append([PAD] * pad + list(piece[:-1]))
            targets.append([PAD] * pad + list(piece[1:]))
            if start == 0:
                break
            end = start + 1
    if not inputs:
        return np.zeros((0, L), dtype=np.int64), np.zeros((0, L), dtype=np.int64)
    return np.array(inputs, dtype=np.int64), np.array(targets, dtype=np.int64)


# -- training ----------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class _SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def _full_loss(m: Model, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 512) -> float:
    total, count = 0.0, 0
    for s in range(0, len(inputs), batch_size):
        t = targets[s:s + batch_size]
        n = int((t != PAD).sum())
        total += m.loss(inputs[s:s + batch_size], t) * n
        count += n
    return total / max(count, 1)


def train(d: Dataset | Sequence[Sequence[int]], mc: ModelConfig | None = None,
          tc: TrainConfig | None = None, init: Model | None = None,
          holdout_targets: bool = True, callback=None) -> Model:
    """Fit next-item cross-entropy on every window position.

    ``d`` may be a Dataset (val/test targets are dropped when
    ``holdout_targets``) or raw sequences used as-is. ``init`` continues from an
    existing model (a copy; the argument is not modified). ``callback(epoch,
    model)`` runs after each epoch.
    """
    mc = mc or (init.config if init else ModelConfig())
    tc = tc or TrainConfig()
    if isinstance(d, Dataset):
        if not d.users:
            raise ValueError("cannot train on an empty dataset")
        seqs = training_sequences(d) if holdout_targets else d.sequences()
        n_items = d.n_items
    else:
        seqs = [list(s) for s in d]
        if not seqs:
            raise ValueError("cannot train on an empty dataset")
        n_items = init.n_items if init else max(max(s) for s in seqs)

    if init is not None:
        if init.n_items != n_items:
            raise ValueError(f"model has {init.n_items} items, data has {n_items}")
        model = init.copy()
    else:
        model = Model.init(n_items, mc, seed=tc.seed)

    inputs, targets = training_windows(seqs, mc.max_len)
    if len(inputs) == 0:
        raise ValueError("no training windows (all sequences shorter than 2)")
    rng = np.random.default_rng(tc.seed)
    opt = _Adam(model.params, tc.lr) if tc.optimizer == "adam" else _SGD(model.params, tc.lr)
    model.history.append(_full_loss(model, inputs, targets))

    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(inputs))
        total, count = 0.0, 0
        for s in range(0, len(order), tc.batch_size):
            idx = order[s:s + tc.batch_size]
            loss, grads = model.loss_and_grads(inputs[idx], targets[idx],
                                               rng if mc.dropout > 0 else None)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(
                    f"non-finite loss/gradient at epoch {epoch}, batch {s // tc.batch_size}: "
                    f"loss={loss}, lr={tc.lr}, last epoch losses={model.history[-3:]}")
            if tc.l2 > 0:
                for k in ("E", "P"):
                    grads[k] = grads[k] + tc.l2 * model.params[k]
            opt.step(model.params, grads)
            model.params["E"][PAD] = 0.0
            n = int((targets[idx] != PAD).sum())
            total += loss * n
            count += n
        model.history.append(total / count)
        log.debug("epoch %d loss %.4f", epoch, model.history[-1])
        if callback is not None:
            callback(epoch, model)
    return model


# -- queries -----------------------------------------------------------------

def score_next(m: Model, seq: Sequence[int]) -> np.ndarray:
    """Score vector over items 1..n_items (index k is item k+1)."""
    return m.score_batch([seq])[0]


def ranking(scores: np.ndarray) -> np.ndarray:
    """Item ids by descending score; ties keep ascending item id."""
    return np.argsort(-scores, kind="stable") + 1


def rank_of(scores: np.ndarray, item: int) -> int:
    """0-based position of ``item`` in ``ranking(scores)``."""
    s = scores[item - 1]
    ahead = scores > s
    ties_before = scores[: item - 1] == s
    return int(ahead.sum() + ties_before.sum())


def recommend_topk(m: Model, seq: Sequence[int], k: int, exclude_seen: bool = False) -> list[int]:
    if not 1 <= k <= m.n_items:
        raise ValueError(f"k must be in 1..{m.n_items}")
    scores = score_next(m, seq)
    if exclude_seen:
        seen = [i - 1 for i in set(seq) if i != PAD]
        scores[seen] = -np.inf
    return ranking(scores)[:k].tolist()


def attention_map(m: Model, seq: Sequence[int]) -> np.ndarray:
    """Attention matrix (L x L) for the final window of ``seq``."""
    items = m._check_items(seq)
    ids = query_window(items, m.config.max_len)[None]
    _, cache = m.forward(ids)
    return cache["A"][0]


def offset_profile(maps: Sequence[np.ndarray], windows: Sequence[np.ndarray]) -> np.ndarray:
    """Mean attention by offset (0 = self, k = k steps back).

    Averaged over real query rows whose key at that offset is a real item.
    """
    L = maps[0].shape[0]
    total = np.zeros(L)
    count = np.zeros(L)
    for A, ids in zip(maps, windows):
        valid = ids != PAD
        for i in range(L):
            if not valid[i]:
                continue
            for k in range(i + 1):
                if valid[i - k]:
                    total[k] += A[i, i - k]
                    count[k] += 1
    return np.divide(total, count, out=np.zeros(L), where=count > 0)


def receptive_field_from_profile(profile: np.ndarray, threshold: float) -> int:
    """Length of the run of offsets 1, 2, ... with mean attention >= threshold."""
    r1 = 0
    for k in range(1, len(profile)):
        if profile[k] >= threshold:
            r1 += 1
        else:
            break
    return r1


def estimate_receptive_field(m: Model, d: Dataset, threshold: float = 0.05,
                             sample: int | None = 500, seed: int = 0):
    """Receptive field read off the averaged single-head attention.

    Only an approximation of the multi-layer notion; the causal model has no
    right-hand side, so ``after`` is always 0.
    """
    from .dwrs_d import ReceptiveFieldSpec

    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    seqs = d.sequences()
    if sample is not None and sample < len(seqs):
        idx = np.random.default_rng(seed).choice(len(seqs), size=sample, replace=False)
        seqs = [seqs[i] for i in sorted(idx)]
    L = m.config.max_len
    windows = [query_window(s, L) for s in seqs]
    maps = []
    for s in range(0, len(windows), 256):
        ids = np.stack(windows[s:s + 256])
        _, cache = m.forward(ids)
        maps.extend(cache["A"])
    profile = offset_profile(maps, windows)
    return ReceptiveFieldSpec(before=receptive_field_from_profile(profile, threshold), after=0)


# -- gradient check ----------------------------------------------------------

def gradient_errors(m: Model, inputs: np.ndarray, targets: np.ndarray,
                    epsilon: float = 1e-5, grads: dict | None = None) -> dict[str, float]:
    """Relative error per parameter group: |g_a - g_fd| / max(|g_a| + |g_fd|, tiny)."""
    if not 1e-8 < epsilon < 1e-2:
        raise ValueError("epsilon must be in (1e-8, 1e-2)")
    if m.config.dropout:
        m = Model(ModelConfig(m.config.d_model, m.config.max_len, m.config.ffn_width, 0.0),
                  m.n_items, m.params)
    if grads is None:
        _, grads = m.loss_and_grads(inputs, targets)
    errors = {}
    for name in PARAM_NAMES:
        w = m.params[name]
        num = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            if name == "E" and ix[0] == PAD:
                continue
            old = w[ix]
            w[ix] = old + epsilon
            up = m.loss(inputs, targets)
            w[ix] = old - epsilon
            down = m.loss(inputs, targets)
            w[ix] = old
            num[ix] = (up - down) / (2 * epsilon)
        a = grads[name]
        denom = np.linalg.norm(a) + np.linalg.norm(num)
        errors[name] = float(np.linalg.norm(a - num) / denom) if denom > 1e-12 else 0.0
    return errors


def gradient_check(m: Model, batch: tuple[np.ndarray, np.ndarray], epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return max(gradient_errors(m, batch[0], batch[1], epsilon).values())


# -- checkpoints -------------------------------------------------------------

def save_model(m: Model, path: str | Path) -> None:
    """Zip archive of .npy arrays plus a JSON header; fixed timestamps so
    identical models give identical bytes."""
    header = {"version": CHECKPOINT_VERSION, "n_items": m.n_items,
              "config": asdict(m.config), "history": m.history}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True))
        for name in PARAM_NAMES:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(m.params[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_model(path: str | Path) -> Model:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        mc = ModelConfig(**header["config"])
        n = header["n_items"]
        d, L, f = mc.d_model, mc.max_len, mc.ffn_width
        shapes = {"E": (n + 1, d), "P": (L, d), "Wq": (d, d), "Wk": (d, d), "Wv": (d, d),
                  "W1": (d, f), "b1": (f,), "W2": (f, d), "b2": (d,)}
        params = {}
        for name in PARAM_NAMES:
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
            if arr.shape != shapes[name]:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {shapes[name]}")
            params[name] = arr.astype(np.float64)
    return Model(mc, n, params, list(header.get("history", [])))


def save_attention_csv(A: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, A, delimiter=",", fmt="%.10f")
