"""Median timings for descriptor extraction (desk and full-size profiles)
and for linear-scan top-25 queries.

    PNV_THREADS=1 python3 scripts/bench.py
"""

import argparse
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from lidarplace import retrieval
from lidarplace.model import ModelConfig, describe, init_params


def median_ms(fn, repeats):
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    threads = int(os.environ["PNV_THREADS"]) if os.environ.get("PNV_THREADS") else None
    rng = np.random.default_rng(0)
    with threadpool_limits(limits=threads):
        print("what\tshape\tmedian_ms")
        for name, cfg in (("describe", ModelConfig.desk()), ("describe", ModelConfig.paper())):
            params = init_params(cfg)
            cloud = rng.uniform(-1, 1, (cfg.n_points, 3))
            ms = median_ms(lambda: describe(params, cfg, cloud), max(3, args.repeats // 4))
            print(f"{name}\tN={cfg.n_points},K={cfg.n_clusters},O={cfg.out_dim}\t{ms:.2f}")
        for n in (1_000, 10_000, 100_000):
            index = retrieval.index_from_arrays(rng.standard_normal((n, 256)))
            qs = iter(rng.standard_normal((args.repeats, 256)))
            ms = median_ms(lambda: retrieval.query_knn(index, next(qs), retrieval.MAX_N), args.repeats)
            print(f"query\t{n}x256\t{ms:.2f}")


if __name__ == "__main__":
    main()
