"""Build the reference dataset, train with the reference settings and report
held-out recall for the untrained and trained models.

    python3 scripts/run_reference.py --out runs/reference
"""

import argparse
import logging
import time
from pathlib import Path

from lidarplace import experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--iters", type=int, default=experiment.REFERENCE_TRAINING["iters"])
    ap.add_argument("--seed", type=int, default=experiment.REFERENCE_TRAINING["train_seed"])
    ap.add_argument("--reuse-data", action="store_true", help="skip generation if OUT/data exists")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    data = args.out / "data"
    if not (args.reuse_data and (data / "manifest.tsv").exists()):
        experiment.build_reference_dataset(data)
    kw = dict(experiment.REFERENCE_TRAINING, iters=args.iters, train_seed=args.seed)
    res = experiment.run_experiment(data, out_dir=args.out, **kw)
    print(f"train submaps {len(res.split.train)}  database {len(res.split.database)}  queries {len(res.split.queries)}")
    print(f"untrained recall@1 {res.untrained_report.recall_at_1:.2f}")
    print(f"trained   recall@1 {res.report.recall_at_1:.2f}  recall@top1% {res.report.recall_top1pct:.2f}")
    print(f"total {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
