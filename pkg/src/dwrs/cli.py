"""Command-line driver: generate, watermark, train, evaluate, attack, heatmap, sweep.

Every command reads artifacts written by earlier commands and writes new files
under ``--out``; inputs are never modified. Dataset artifacts are canonical
sequence-lines files with a ``.meta.json`` sidecar holding ``n_items`` so that
splits keep the global item id space.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import (distill_attack, finetune_attack, harden_watermark, mine_rules, rule_confidence,
                      watermark_rules, write_rules)
from .corpus import (Dataset, compute_popularity, load_dataset, save_dataset, split_leave_one_out, split_users,
                     write_skip_report)
from .dwrs_d import ReceptiveFieldSpec, WatermarkError, load_records, save_records, select_watermark_items
from .dwrs_u import POSITIONS
from .evalkit import EXIT_ERROR, best_verdict, model_utility, random_rank_report, watermark_validity, write_reports
from .experiment import VARIANTS, ExperimentConfig, build_dataset, embed, fit, load_config, watermark_trial
from .seqrec import (Model, attention_map, estimate_receptive_field, load_model, query_window, save_attention_csv,
                     save_model)

log = logging.getLogger("dwrs")

AXES = ("l", "p", "n", "position")


# -- artifacts ---------------------------------------------------------------

def meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_data(d: Dataset, path: Path) -> None:
    save_dataset(d, path)
    meta_path(path).write_text(json.dumps({"n_items": d.n_items}) + "\n", encoding="utf-8")


def read_data(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found (run `dwrs generate` first?)")
    mp = meta_path(path)
    if not mp.exists():
        raise FileNotFoundError(f"{mp} missing; canonical datasets come from `dwrs generate`")
    return load_dataset(path, densify=False, n_items=json.loads(mp.read_text())["n_items"])


def read_model(path: str | Path) -> Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found (run `dwrs train` first?)")
    return load_model(path)


def read_watermarks(path: str | Path):
    """Watermarks carrying a response; shuffled hardening bodies are skipped."""
    if not Path(path).exists():
        raise FileNotFoundError(f"record file {path} not found (run `dwrs watermark` first?)")
    recs = load_records(path)
    return [r.watermark for r in recs if getattr(r, "meta", {}).get("role") != "shuffled-body"]


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, seed: int, out: Path, holdout: float | None = None) -> int:
    dc = cfg.dataset
    if dc.path:
        d = load_dataset(dc.path, dc.format)
    else:
        d = build_dataset(cfg)
    write_data(d, out / "dataset.txt")
    write_skip_report(split_leave_one_out(d), out / "skipped.csv")
    if holdout:
        main, hold = split_users(d, holdout, np.random.default_rng(seed))
        write_data(main, out / "main.txt")
        write_data(hold, out / "holdout.txt")
    print(f"{len(d)} users, {d.n_items} items, {d.n_interactions()} interactions -> {out}")
    return 0


def cmd_watermark(cfg: ExperimentConfig, seed: int, out: Path, data: str, variant: str | None = None) -> int:
    d = read_data(data)
    wd, rec = embed(cfg, d, seed, variant)
    write_data(wd, out / "watermarked.txt")
    save_records([rec], out / "watermark.json")
    print(f"{rec.variant} watermark {list(rec.watermark.items)} -> {out / 'watermarked.txt'}")
    return 0


def cmd_train(cfg: ExperimentConfig, seed: int, out: Path, data: str, name: str = "model") -> int:
    d = read_data(data)
    m = fit(cfg, d, seed)
    save_model(m, out / f"{name}.npz")
    with open(out / f"{name}_history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows((k, f"{v:.10g}") for k, v in enumerate(m.history))
    print(f"trained {name}: loss {m.history[0]:.4f} -> {m.history[-1]:.4f}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, seed: int, out: Path, model: str, data: str, records: str,
                 oracle: str | None = None) -> int:
    """Score the suspect model; the reference is the oracle model, else a random ranker."""
    m = read_model(model)
    d = read_data(data)
    ks = list(cfg.eval.ks)
    wms = read_watermarks(records)
    ref = read_model(oracle) if oracle else None
    reports = [model_utility(m, split_leave_one_out(d), ks)]
    pairs = []
    for k, wm in enumerate(wms):
        tag = "" if len(wms) == 1 else f"-{k}"
        v = watermark_validity(m, d, wm, ks, cfg.eval.sample, seed, context=f"validity{tag}")
        if ref is not None:
            o = watermark_validity(ref, d, wm, ks, cfg.eval.sample, seed, context=f"oracle-validity{tag}")
        else:
            o = random_rank_report(d.n_items, ks, context=f"random-validity{tag}")
        reports += [v, o]
        pairs.append((v, o))
    verdict = best_verdict(pairs, cfg.eval.margin, cfg.eval.margin_k)
    write_reports(reports, out / "report.csv")
    write_json({"verdict": verdict.verdict, "margin_k": verdict.margin_k, "threshold": verdict.threshold,
                "margins": {str(k): v for k, v in verdict.margins.items()},
                "reference": "oracle" if ref is not None else "random"}, out / "verdict.json")
    for r in reports:
        print(r.summary())
    print(verdict.summary())
    return verdict.exit_code


def cmd_attack(cfg: ExperimentConfig, seed: int, out: Path, kind: str, model: str | None,
               data: str | None, records: str | None, clean: str | None) -> int:
    ac, ks = cfg.attack, list(cfg.eval.ks)
    if kind == "mine":
        d = read_data(_need(data, "--data"))
        rules = mine_rules(d, ac.max_antecedent, ac.max_consequent, ac.min_support)
        write_rules(rules, out / "rules.csv")
        print(f"{len(rules)} rules -> {out / 'rules.csv'}")
        if records:
            for wm in read_watermarks(records):
                for X, Y in watermark_rules(wm):
                    sup, conf = rule_confidence(d, X, Y)
                    print(f"watermark rule {list(X)} -> {list(Y)}: support {sup}, confidence {conf:.3f}")
        return 0
    if kind == "harden":
        d = read_data(_need(data, "--data"))
        rng = np.random.default_rng(seed)
        w = cfg.watermark
        pop = compute_popularity(d)
        base = select_watermark_items(pop, d, w.l, w.tail_fraction, rng)
        rf = ReceptiveFieldSpec.parse(ac.harden_rf)
        hd, recs = harden_watermark(d, base, ac.n_responses, ac.n_shuffled, w.p, rf, rng, pop, w.tail_fraction, seed)
        write_data(hd, out / "hardened.txt")
        save_records(recs, out / "watermark.json")
        print(f"hardened: {[list(r.watermark.items) for r in recs]}")
        return 0

    m = read_model(_need(model, "--model"))
    d = read_data(_need(data, "--data"))
    wms = read_watermarks(_need(records, "--records"))
    split = split_leave_one_out(d)
    if kind == "finetune":
        hold = read_data(_need(clean, "--clean"))
        tc = replace(cfg.train, epochs=ac.finetune_epochs, seed=seed)
        tuned, rep = finetune_attack(m, hold, tc, ac.checkpoints, wms[0], d, split, ks, cfg.eval.sample)
        save_model(tuned, out / "finetuned.npz")
    elif kind == "distill":
        tc = replace(cfg.train, epochs=ac.surrogate_epochs, seed=seed)
        tuned, rep = distill_attack(m, ac.n_sequences, ac.gen_len, m.config, tc, np.random.default_rng(seed),
                                    wms[0], d, split, ks, top_k=ac.top_k, sample=cfg.eval.sample)
        save_model(tuned, out / "surrogate.npz")
    else:
        raise ValueError(f"unknown attack {kind!r}")
    reps, phases = rep.flat()
    write_reports(reps, out / f"attack_{kind}.csv", phases=phases)
    for ph, r in zip(phases, reps):
        print(ph, r.summary())
    return 0


def _need(value, flag):
    if value is None:
        raise ValueError(f"{flag} is required for this command")
    return value


def cmd_heatmap(cfg: ExperimentConfig, seed: int, out: Path, model: str, data: str, user: int | None = None,
                threshold: float = 0.05) -> int:
    m = read_model(model)
    d = read_data(data)
    seq = d.by_user()[user].items if user is not None else d.users[0].items
    A = attention_map(m, seq)
    save_attention_csv(A, out / "attention.csv")
    rf = estimate_receptive_field(m, d, threshold, sample=cfg.eval.sample or 500, seed=seed)
    write_json({"before": rf.before, "after": rf.after, "threshold": threshold,
                "window": query_window(seq, m.config.max_len).tolist()}, out / "receptive_field.json")
    print(f"attention {A.shape[0]}x{A.shape[1]} -> {out / 'attention.csv'}; receptive field r1={rf.before}")
    return 0


# -- sweep -------------------------------------------------------------------

SWEEP_DEFAULTS = {"l": [2, 3, 4, 5], "p": [0.001, 0.005, 0.01, 0.015, 0.02],
                  "n": [5, 10, 20], "position": list(POSITIONS)}


def _oracle_cell(cfg_dict: dict, data: str, seed: int):
    return fit(ExperimentConfig.from_dict(cfg_dict), read_data(data), seed).params


def _sweep_cell(cfg_dict: dict, data: str, axis: str, value, seed: int, oracle_params: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    d = read_data(data)
    variant = "dwrs-u" if axis in ("n", "position") else cfg.watermark.variant
    if variant == "dwrs-u" and axis in ("l", "p"):
        raise ValueError("l/p sweeps use a dataset watermark variant")
    oracle = Model(cfg.model, d.n_items, oracle_params)
    t = watermark_trial(cfg, d, oracle, seed, variant, **{axis: value})
    k = cfg.eval.margin_k
    return {"axis": axis, "value": value, "seed": seed,
            "validity_recall": t.validity.recall[k], "validity_ndcg": t.validity.ndcg[k],
            "oracle_recall": t.oracle_validity.recall[k], "oracle_ndcg": t.oracle_validity.ndcg[k],
            "utility_recall": t.utility.recall[k], "utility_ndcg": t.utility.ndcg[k]}


SWEEP_FIELDS = ["axis", "value", "seed", "validity_recall", "validity_ndcg", "oracle_recall", "oracle_ndcg",
                "utility_recall", "utility_ndcg"]


def run_sweep(cfg: ExperimentConfig, data: str, axis: str, values=None, workers: int = 1) -> list[dict]:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    values = list(values or cfg.sweep.get(axis) or SWEEP_DEFAULTS[axis])
    cd = cfg.to_dict()
    cells = [(v, s) for v in values for s in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            oracles = dict(zip(cfg.seeds, ex.map(_oracle_cell, [cd] * len(cfg.seeds), [data] * len(cfg.seeds),
                                                 cfg.seeds)))
            futs = [ex.submit(_sweep_cell, cd, data, axis, v, s, oracles[s]) for v, s in cells]
            rows = [f.result() for f in futs]
    else:
        oracles = {s: _oracle_cell(cd, data, s) for s in cfg.seeds}
        rows = [_sweep_cell(cd, data, axis, v, s, oracles[s]) for v, s in cells]
    for v in values:
        mine = [r for r in rows if r["value"] == v]
        mean = {"axis": axis, "value": v, "seed": "mean"}
        mean.update({f: float(np.mean([r[f] for r in mine])) for f in SWEEP_FIELDS[3:]})
        rows.append(mean)
    return rows


def write_sweep(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) and k in SWEEP_FIELDS[3:] else v
                        for k, v in r.items()})


def read_sweep(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in SWEEP_FIELDS[3:]:
            r[k] = float(r[k])
    return rows


def cmd_sweep(cfg: ExperimentConfig, seed: int | None, out: Path, data: str, axis: str,
              values: list[str] | None = None, workers: int = 1) -> int:
    if seed is not None:
        cfg = replace(cfg, seeds=(seed,))
    conv = {"l": int, "n": int, "p": float, "position": str}[axis]
    rows = run_sweep(cfg, data, axis, [conv(v) for v in values] if values else None, workers)
    write_sweep(rows, out / f"sweep_{axis}.csv")
    for r in rows:
        if r["seed"] == "mean":
            print(f"{axis}={r['value']}: validity R@{cfg.eval.margin_k} {r['validity_recall']:.4f}, "
                  f"oracle {r['oracle_recall']:.4f}, utility NDCG {r['utility_ndcg']:.4f}")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dwrs", description="Data watermarks for sequential recommenders.")
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--seed", type=int, help="override the config's seed list with one seed")
    ap.add_argument("--out", default=".", help="output directory (created if needed)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize or ingest a dataset")
    g.add_argument("--holdout", type=float, help="also write a user-level main/holdout split")

    w = sub.add_parser("watermark", help="embed a watermark")
    w.add_argument("--data", required=True)
    w.add_argument("--variant", choices=VARIANTS)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--name", default="model")

    e = sub.add_parser("evaluate", help="utility, validity and the ownership verdict")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="clean dataset supplying benign queries")
    e.add_argument("--records", required=True)
    e.add_argument("--oracle", help="clean-trained reference model")

    a = sub.add_parser("attack", help="removal attacks and hardening")
    a.add_argument("kind", choices=["finetune", "distill", "mine", "harden"])
    a.add_argument("--model")
    a.add_argument("--data")
    a.add_argument("--records")
    a.add_argument("--clean", help="held-out clean data for finetuning")

    h = sub.add_parser("heatmap", help="attention map CSV and receptive-field estimate")
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--user", type=int)
    h.add_argument("--threshold", type=float, default=0.05)

    s = sub.add_parser("sweep", help="per-seed study over one axis")
    s.add_argument("--data", required=True)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", nargs="+")
    s.add_argument("--workers", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        c = args.command
        if c == "generate":
            return cmd_generate(cfg, seed, out, args.holdout)
        if c == "watermark":
            return cmd_watermark(cfg, seed, out, args.data, args.variant)
        if c == "train":
            return cmd_train(cfg, seed, out, args.data, args.name)
        if c == "evaluate":
            return cmd_evaluate(cfg, seed, out, args.model, args.data, args.records, args.oracle)
        if c == "attack":
            return cmd_attack(cfg, seed, out, args.kind, args.model, args.data, args.records, args.clean)
        if c == "heatmap":
            return cmd_heatmap(cfg, seed, out, args.model, args.data, args.user, args.threshold)
        return cmd_sweep(cfg, args.seed, out, args.data, args.axis, args.values, args.workers)
    except (OSError, ValueError, WatermarkError, RuntimeError) as exc:
        print(f"dwrs: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
