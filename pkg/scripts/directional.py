"""Head-only vs Delta(4) vs random coefficients on a disjoint synthetic task.

    python scripts/directional.py --seeds 0 1 2 --out runs/directional.csv
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

from deltanets.experiments import DirectionalConfig, mean_accuracies, run_directional


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--patch-epochs", type=int)
    ap.add_argument("--lr", type=float)
    ap.add_argument("--out", default="runs/directional.csv")
    args = ap.parse_args()

    cfg = replace(DirectionalConfig(), seeds=tuple(args.seeds))
    if args.patch_epochs:
        cfg = replace(cfg, patch_epochs=args.patch_epochs)
    if args.lr:
        cfg = replace(cfg, lr=args.lr)
    results = run_directional(cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "base_acc", "variant", "task_acc"])
        for r in results:
            for variant, acc in r.task_accs.items():
                w.writerow([r.seed, f"{r.base_acc:.2f}", variant, f"{acc:.2f}"])
    means = mean_accuracies(results)
    print("means:", ", ".join(f"{k} {v:.2f}" for k, v in means.items()))


if __name__ == "__main__":
    main()
