"""Finetune, distillation and hardening attacks on the desk benchmark.

    python scripts/attacks_desk.py --out attacks_desk.csv
"""
import argparse
import csv
import sys
from dataclasses import replace

import numpy as np

from dwrs.attacks import distill_attack, finetune_attack, harden_watermark, rule_confidence
from dwrs.corpus import compute_popularity, split_leave_one_out, split_users
from dwrs.dwrs_d import ReceptiveFieldSpec, select_watermark_items
from dwrs.evalkit import watermark_validity
from dwrs.experiment import build_dataset, embed, fit, load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="attacks_desk.csv")
    args = ap.parse_args(argv)
    cfg, seed = load_config(args.config), args.seed
    ac, ks = cfg.attack, list(cfg.eval.ks)
    d = build_dataset(cfg)
    rows = []

    def emit(attack, phase, validity, oracle, utility=None, extra=""):
        rows.append([attack, phase, validity, oracle, "" if utility is None else utility, extra])
        print(*rows[-1], file=sys.stderr)

    main_d, hold = split_users(d, ac.holdout, np.random.default_rng(seed))
    split = split_leave_one_out(main_d)
    wd, rec = embed(cfg, main_d, seed)
    wm = rec.watermark
    m = fit(cfg, wd, seed)
    o = watermark_validity(fit(cfg, main_d, seed), main_d, wm, ks).recall[10]
    _, rep = finetune_attack(m, hold, replace(cfg.train, epochs=ac.finetune_epochs, seed=seed), ac.checkpoints,
                             wm, main_d, split, ks)
    for ph, v, u in zip(rep.phases, rep.validity, rep.utility):
        emit("finetune", ph, v.recall[10], o, u.ndcg[10])
    _, rep = distill_attack(m, ac.n_sequences, ac.gen_len, cfg.model,
                            replace(cfg.train, epochs=ac.surrogate_epochs, seed=seed), np.random.default_rng(seed),
                            wm, main_d, split, ks, top_k=ac.top_k)
    for ph, v, u in zip(rep.phases, rep.validity, rep.utility):
        emit("distill", ph, v.recall[10], o, u.ndcg[10], f"top_k={ac.top_k}")

    rng = np.random.default_rng(seed)
    base = select_watermark_items(compute_popularity(d), d, cfg.watermark.l, cfg.watermark.tail_fraction, rng)
    hd, recs = harden_watermark(d, base, ac.n_responses, ac.n_shuffled, cfg.watermark.p,
                                ReceptiveFieldSpec.parse(ac.harden_rf), rng, seed=seed)
    hm, oracle = fit(cfg, hd, seed), fit(cfg, d, seed)
    for r in recs:
        if r.meta["role"] != "response":
            continue
        conf = rule_confidence(hd, base.body, [r.watermark.response])[1]
        emit("harden", f"response-{r.watermark.response}", watermark_validity(hm, d, r.watermark, ks).recall[10],
             watermark_validity(oracle, d, r.watermark, ks).recall[10], None,
             f"count={r.achieved_count} confidence={conf:.4f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "phase", "validity_recall@10", "oracle_recall@10", "utility_ndcg@10", "note"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
