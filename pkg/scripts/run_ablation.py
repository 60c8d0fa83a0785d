"""Full GRPP vs woGP vs woAT on the desk syn-10d data, several seeds.

Prints best validation NLL per run and the per-variant means; rows are also
appended to <out>/ablation.csv so an interrupted sweep can be inspected.

    python scripts/run_ablation.py --seeds 0 1 2 --out runs/ablation
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from grpp.experiments import DeskSetup, desk_config, make_data, run_desk

VARIANTS = ("none", "wogp", "woat")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--patience", type=int, default=10)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablation.csv"
    new = not path.exists()
    data = make_data(DeskSetup())
    results = {v: [] for v in args.variants}
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["seed", "variant", "epochs", "best_valid_nll", "best_epoch", "seconds"])
        for seed in args.seeds:
            for v in args.variants:
                cfg = desk_config(seed, v, epochs=args.epochs, patience=args.patience)
                r = run_desk(cfg, evaluate_test=False, data=data)
                results[v].append(r.report.best_valid_nll)
                w.writerow([seed, v, args.epochs, r.report.best_valid_nll, r.report.best_epoch,
                            round(r.seconds, 1)])
                fh.flush()
                print(f"seed {seed} {v:5s} best valid NLL {r.report.best_valid_nll:.3f} "
                      f"(epoch {r.report.best_epoch})", flush=True)
    for v, vals in results.items():
        print(f"{v:5s} mean {np.mean(vals):.3f} over {len(vals)} seeds")


if __name__ == "__main__":
    main()
