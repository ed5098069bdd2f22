"""Every skip-topology variant on one base model and patch task.

    python scripts/ablation.py --seeds 0 --out runs/ablation.csv
"""

import argparse
from dataclasses import replace

from deltanets.engine import TABLE_VARIANTS, write_reports_csv
from deltanets.experiments import DirectionalConfig, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--patch-epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()
    cfg = replace(DirectionalConfig(), seeds=tuple(args.seeds), patch_epochs=args.patch_epochs)
    write_reports_csv(args.out, run_ablation(cfg, TABLE_VARIANTS))


if __name__ == "__main__":
    main()
