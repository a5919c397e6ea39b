"""Command-line entry point: ``lidarplace {synth,train,index,eval,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 bad usage.
``PNV_THREADS`` caps the BLAS thread pool (default: all cores).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiment, retrieval, store, synthworld, training
from .losses import Margins
from .model import ModelConfig, describe, init_params
from .pipeline import PipelineConfig

log = logging.getLogger("lidarplace")

LOSS_ALIASES = {
    "triplet": "triplet",
    "quad": "quadruplet",
    "lazy_triplet": "lazy_triplet",
    "lazy_quad": "lazy_quadruplet",
}


def _floats(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def _run_config(args) -> store.RunConfig:
    return store.load_run_config(args.config) if args.config else store.RunConfig()


def _train_config(cfg: store.RunConfig, loss: str, iters: int | None, seed: int) -> training.TrainConfig:
    t = cfg.train
    return training.TrainConfig(
        loss=loss,
        margins=Margins(t.alpha, t.beta),
        tuples_per_batch=t.tuples_per_batch,
        negatives_per_tuple=t.negatives_per_tuple,
        mining_pool=t.mining_pool,
        cache_refresh_iters=t.cache_refresh_iters,
        positives_sampled=t.positives_sampled,
        learning_rate=t.learning_rate,
        betas=(t.beta1, t.beta2),
        eps=t.eps,
        max_iters=t.max_iters if iters is None else iters,
        seed=seed,
        trace_every=t.trace_every,
        positive_m=cfg.pipeline.positive_m,
        negative_m=cfg.pipeline.negative_m,
    )


def _split(cfg: store.RunConfig, data_dir, db_run: str, query_run: str, seed: int | None = None):
    p = cfg.pipeline
    return experiment.split_dataset(
        synthworld.load_dataset(data_dir), db_run, query_run, p.test_fraction, p.region_side_m,
        p.split_seed if seed is None else seed,
    )


def cmd_synth(args) -> int:
    world = synthworld.generate_world(experiment.reference_world_spec(args.seed, args.extent))
    runs = experiment.reference_runs(args.runs, args.seed, experiment.reference_route(args.extent))
    pcfg = PipelineConfig(interval_m=args.interval, n_points=args.points, seed=args.seed)
    subs = synthworld.emit_dataset(world, runs, pcfg, args.out)
    for run_id, sm in subs.items():
        print(f"{run_id}\t{len(sm)} submaps")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    model_config = replace(cfg.model.to_config(), seed=args.seed)
    tcfg = _train_config(cfg, LOSS_ALIASES[args.loss], args.iters, args.seed)
    split = _split(cfg, args.data, experiment.DB_RUN, experiment.QUERY_RUN)
    data = training.TrainingSet(split.train, tcfg.positive_m, tcfg.negative_m)
    result = training.train_loop(data, model_config, tcfg)
    out = Path(args.out)
    store.save_checkpoint(out / "model.ckpt", result.params, model_config)
    store.write_text(out / "trace.tsv", training.format_trace(result.trace))
    print(f"trained {tcfg.max_iters} iterations, final window loss {result.trace[-1].loss:.6f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'trace.tsv'}")
    return 0


def _held_out(args, cfg):
    split = _split(cfg, args.data, args.db_run, args.query_run)
    return split.database, split.queries


def cmd_index(args) -> int:
    cfg = _run_config(args)
    params, model_config = store.load_checkpoint(args.checkpoint)
    split = _split(cfg, args.data, args.run, args.other_run)
    index = retrieval.build_index(params, model_config, split.database)
    store.save_index(args.out, index)
    print(f"indexed {len(index)} submaps of {args.run} (dimension {index.dim}) into {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.db_run == args.query_run:
        print("error: --db-run and --query-run must name different runs", file=sys.stderr)
        return 2
    cfg = _run_config(args)
    params, model_config = store.load_checkpoint(args.checkpoint)
    database, queries = _held_out(args, cfg)
    if args.index:
        index = store.load_index(args.index)
        if index.dim != model_config.out_dim:
            print(f"error: index dimension {index.dim} does not match checkpoint dimension "
                  f"{model_config.out_dim}", file=sys.stderr)
            return 1
    else:
        index = retrieval.build_index(params, model_config, database)
    report = retrieval.evaluate(index, retrieval.submap_queries(params, model_config, queries),
                                args.radius, args.topn)
    if args.out:
        retrieval.emit_report(report, args.out)
    print(f"database {report.database_size}\tqueries {len(report.queries)}\tradius {report.radius_m:g} m")
    print(f"recall@1 {report.recall_at_1:.2f}\trecall@top1% (N={report.n_top1pct}) {report.recall_top1pct:.2f}")
    return 0


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    model_config = ModelConfig(seed=args.seed)
    params = init_params(model_config)
    cloud = rng.uniform(-1, 1, (model_config.n_points, 3))
    describe_ms = _median_ms(lambda: describe(params, model_config, cloud), args.repeats)
    print("size\tdim\tquery_median_ms\tdescribe_median_ms")
    for n in args.sizes:
        index = retrieval.index_from_arrays(rng.standard_normal((n, args.dim)))
        queries = rng.standard_normal((args.repeats, args.dim))
        it = iter(queries)
        k = min(retrieval.MAX_N, n)
        query_ms = _median_ms(lambda: retrieval.query_knn(index, next(it), k), args.repeats)
        print(f"{n}\t{args.dim}\t{query_ms:.4f}\t{describe_ms:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarplace", description="LiDAR place recognition by descriptor retrieval")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset directory")
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--extent", type=_floats, default=600.0, help="world side in meters")
    p.add_argument("--interval", type=_floats, default=10.0, help="submap spacing in meters")
    p.add_argument("--points", type=int, default=256, help="points per submap")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train on the training regions of a dataset")
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--data", required=True)
    p.add_argument("--loss", choices=sorted(LOSS_ALIASES), default="lazy_quad")
    p.add_argument("--iters", type=int, help="override train.max_iters")
    p.add_argument("--out", required=True)

    p = add("index", cmd_index, "build a descriptor index of one run's held-out submaps")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", default=experiment.DB_RUN)
    p.add_argument("--other-run", default=experiment.QUERY_RUN, help="second run used by the region split")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate query-run retrieval against a database run")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--db-run", default=experiment.DB_RUN)
    p.add_argument("--query-run", default=experiment.QUERY_RUN)
    p.add_argument("--radius", type=_floats, default=retrieval.SUCCESS_RADIUS_M)
    p.add_argument("--topn", type=int, default=retrieval.MAX_N)
    p.add_argument("--index", help="prebuilt database index file")
    p.add_argument("--out", help="report directory")

    p = add("bench", cmd_bench, "time descriptor extraction and linear-scan queries")
    p.add_argument("--sizes", type=_sizes, default=[1000, 10000])
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--repeats", type=int, default=50)
    return parser


def _threads() -> int | None:
    raw = os.environ.get("PNV_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError(f"PNV_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
    except ValueError as err:
        parser.error(str(err))
    try:
        with threadpool_limits(limits=threads):
            return args.fn(args)
    except (ValueError, OSError, training.TrainingError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
