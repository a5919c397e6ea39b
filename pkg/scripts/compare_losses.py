"""Train every loss on the reference dataset for several seeds and print a
mean recall table (reported, not asserted).

    python3 scripts/compare_losses.py --data runs/reference/data --out runs/losses.tsv
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from lidarplace import experiment
from lidarplace.losses import LOSS_KINDS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--out", type=Path, help="write the table as TSV too")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iters", type=int, default=experiment.REFERENCE_TRAINING["iters"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    if not (args.data / "manifest.tsv").exists():
        experiment.build_reference_dataset(args.data)

    rows = ["loss\trecall@1\trecall@top1%\tper_seed_recall@1"]
    base = {k: v for k, v in experiment.REFERENCE_TRAINING.items() if k != "loss"}
    for loss in LOSS_KINDS:
        r1, pct = [], []
        for seed in range(args.seeds):
            res = experiment.run_experiment(args.data, **dict(base, loss=loss, iters=args.iters, train_seed=seed))
            r1.append(res.report.recall_at_1)
            pct.append(res.report.recall_top1pct)
            print(f"{loss} seed {seed}: recall@1 {r1[-1]:.2f}", flush=True)
        rows.append(f"{loss}\t{np.mean(r1):.2f}\t{np.mean(pct):.2f}\t{','.join(f'{v:.1f}' for v in r1)}")
    table = "\n".join(rows) + "\n"
    print(table, end="")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table)


if __name__ == "__main__":
    main()
