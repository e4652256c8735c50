"""Experiment configuration and the watermark-then-train recipe shared by the
CLI, the acceptance suite and the scripts."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .corpus import Dataset, compute_popularity, generate_synthetic, split_leave_one_out
from .dwrs_d import (ReceptiveFieldSpec, embed_baseline_watermark, embed_dataset_watermark,
                     select_watermark_items)
from .dwrs_u import embed_user_watermark
from .evalkit import MetricsReport, model_utility, watermark_validity
from .seqrec import Model, ModelConfig, TrainConfig, train

VARIANTS = ("dwrs-d", "dwrs-d-base", "dwrs-u")


# -- config ------------------------------------------------------------------

@dataclass
class DatasetConfig:
    path: str | None = None
    format: str = "sequence-lines"
    n_users: int = 2000
    n_items: int = 300
    len_range: tuple[int, int] = (20, 50)
    locality: float = 0.8
    seed: int = 42


@dataclass
class WatermarkConfig:
    variant: str = "dwrs-d"
    l: int = 3
    p: float = 0.01
    tail_fraction: float = 0.10
    rf: object = (5, 5)
    n: int = 10
    target: object = "longest"
    position: str = "bus"


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (5, 10, 20, 100)
    margin: float = 0.5
    margin_k: int = 10
    sample: int | None = None


@dataclass
class AttackConfig:
    holdout: float = 0.2
    finetune_epochs: int = 100
    checkpoints: tuple[int, ...] = (25, 50, 75)
    n_sequences: int = 3000
    gen_len: int = 30
    top_k: int = 1
    surrogate_epochs: int = 30
    max_antecedent: int = 2
    max_consequent: int = 2
    min_support: int = 2
    n_responses: int = 2
    n_shuffled: int = 0
    harden_rf: tuple[int, int] = (3, 3)  # widest RF whose shared filler ledger fits both responses at desk scale


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(dropout=0.2))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50))
    eval: EvalConfig = field(default_factory=EvalConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    seeds: tuple[int, ...] = (0,)
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.watermark.variant not in VARIANTS:
            raise ValueError(f"watermark variant must be one of {VARIANTS}")
        if not self.seeds:
            raise ValueError("at least one explicit seed is required")

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, typ in [("dataset", DatasetConfig), ("watermark", WatermarkConfig), ("model", ModelConfig),
                          ("train", TrainConfig), ("eval", EvalConfig), ("attack", AttackConfig)]:
            base = getattr(cls(), name)
            sub = obj.get(name, {})
            bad = set(sub) - {f.name for f in fields(typ)}
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            vals = {k: tuple(v) if isinstance(v, list) and k != "rf" else v for k, v in sub.items()}
            parts[name] = replace(base, **vals)
        return cls(**parts, seeds=tuple(obj.get("seeds", (0,))), sweep=obj.get("sweep", {}))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))



def embed(cfg: ExperimentConfig, d: Dataset, seed: int, variant: str | None = None, **overrides):
    """Dispatch to the configured embedder; returns (dataset, record)."""
    w = replace(cfg.watermark, **overrides)
    variant = variant or w.variant
    rng = np.random.default_rng(seed)
    if variant == "dwrs-u":
        target = int(w.target) if str(w.target).isdigit() else w.target
        return embed_user_watermark(d, target, w.l, w.n, rng, position=w.position, seed=seed)
    pop = compute_popularity(d)
    wm = select_watermark_items(pop, d, w.l, w.tail_fraction, rng)
    if variant == "dwrs-d-base":
        return embed_baseline_watermark(d, wm, w.p, rng, seed=seed)
    return embed_dataset_watermark(d, wm, w.p, ReceptiveFieldSpec.parse(w.rf), rng, seed=seed)


# -- recipes -----------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Synthetic data from the config (the desk benchmark by default)."""
    dc = cfg.dataset
    return generate_synthetic(dc.n_users, dc.n_items, tuple(dc.len_range), dc.locality, dc.seed)


def fit(cfg: ExperimentConfig, d: Dataset | list, seed: int) -> Model:
    return train(d, cfg.model, replace(cfg.train, seed=seed))


@dataclass
class Trial:
    record: object
    model: Model
    validity: MetricsReport
    oracle_validity: MetricsReport
    utility: MetricsReport | None
    cpu_seconds: float


def watermark_trial(cfg: ExperimentConfig, d: Dataset, oracle: Model, seed: int, variant: str | None = None,
                    utility: bool = True, **overrides) -> Trial:
    """Embed, train on the watermarked data, and score against the clean oracle.

    Validity and utility queries come from the clean dataset.
    """
    t0 = time.process_time()
    wd, rec = embed(cfg, d, seed, variant, **overrides)
    m = fit(cfg, wd, seed)
    ks = list(cfg.eval.ks)
    v = watermark_validity(m, d, rec.watermark, ks, cfg.eval.sample, seed)
    o = watermark_validity(oracle, d, rec.watermark, ks, cfg.eval.sample, seed, context="oracle-validity")
    u = model_utility(m, split_leave_one_out(d), ks) if utility else None
    return Trial(rec, m, v, o, u, time.process_time() - t0)
