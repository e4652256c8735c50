"""DWRS-U calibration: validity over watermark lengths, then over insert positions.

    python scripts/dwrs_u_scan.py --lengths 10 20 40 --n 10 --out dwrs_u_scan.csv
"""
import argparse
import csv
import sys

from dwrs.dwrs_u import POSITIONS
from dwrs.experiment import build_dataset, fit, load_config, watermark_trial


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--lengths", type=int, nargs="+", default=[10, 20, 40])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="dwrs_u_scan.csv")
    args = ap.parse_args(argv)
    cfg = load_config(args.config)
    d = build_dataset(cfg)
    oracle = fit(cfg, d, args.seed)

    def trial(l, pos):
        t = watermark_trial(cfg, d, oracle, args.seed, variant="dwrs-u", utility=False, l=l, n=args.n, position=pos)
        row = [l, args.n, pos, t.validity.recall[10], t.oracle_validity.recall[10], round(t.cpu_seconds, 1)]
        print(*row, file=sys.stderr)
        return row

    rows = [trial(l, "bus") for l in args.lengths]
    best = max(rows, key=lambda r: (r[3] - r[4], -r[0]))[0]
    rows += [trial(best, pos) for pos in POSITIONS if pos != "bus"]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "n", "position", "validity_recall@10", "oracle_recall@10", "cpu_seconds"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
