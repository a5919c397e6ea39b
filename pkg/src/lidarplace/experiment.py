"""The reference synthetic experiment: world, two traversals, geographic
split, training and held-out database/query evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import pipeline, retrieval, store, synthworld, training
from .model import ModelConfig, ModelParams, init_params

log = logging.getLogger(__name__)

# Rectangular loop of 600 m through the middle of a 600 m world.
REFERENCE_ROUTE = ((200.0, 250.0), (400.0, 250.0), (400.0, 350.0), (200.0, 350.0), (200.0, 250.0))
DB_RUN = "run0"
QUERY_RUN = "run1"
# keyword arguments of run_experiment for the reference result
REFERENCE_TRAINING = dict(loss="lazy_quadruplet", iters=2000, train_seed=0)


def reference_route(extent: float = 600.0) -> tuple[tuple[float, float], ...]:
    """The reference loop scaled to a world of side ``extent``."""
    f = extent / 600.0
    return tuple((x * f, y * f) for x, y in REFERENCE_ROUTE)


def reference_world_spec(seed: int = 1, extent: float = 600.0) -> synthworld.WorldSpec:
    # landmark density is held fixed as the world shrinks or grows
    n = round(120 * (extent / 600.0) ** 2)
    return synthworld.WorldSpec(seed=seed, extent_m=extent, n_landmarks=n, roads=(reference_route(extent),))


def reference_runs(n_runs: int = 2, seed: int = 1, route=REFERENCE_ROUTE,
                   offset_m: float = 5.0) -> list[synthworld.RunSpec]:
    # each run starts offset_m further along the route, so with the default half
    # of a 10 m submap interval no query station coincides with a database station
    return [
        synthworld.RunSpec(seed=seed * 100 + r, route=tuple(route), run_id=f"run{r}", start_offset_m=offset_m * r)
        for r in range(n_runs)
    ]


def reference_pipeline(n_points: int = 256, interval: float = 10.0, seed: int = 0) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(interval_m=interval, extent_m=25.0, n_points=n_points, seed=seed)


def build_reference_dataset(out_dir, world_seed: int = 1, n_runs: int = 2, extent: float = 600.0,
                            interval: float = 10.0, n_points: int = 256):
    world = synthworld.generate_world(reference_world_spec(world_seed, extent))
    runs = reference_runs(n_runs, world_seed, reference_route(extent))
    return synthworld.emit_dataset(world, runs, reference_pipeline(n_points, interval), out_dir)


@dataclass
class SplitData:
    train: list[pipeline.Submap]
    database: list[pipeline.Submap]
    queries: list[pipeline.Submap]


def split_dataset(submaps, db_run: str = DB_RUN, query_run: str = QUERY_RUN, test_fraction: float = 0.3,
                  region_side: float = 150.0, seed: int = 0) -> SplitData:
    if db_run == query_run:
        raise ValueError("database and query must come from different runs")
    train, test = pipeline.split_regions(submaps, test_fraction, region_side, seed)
    db = [s for s in test if s.run_id == db_run]
    queries = [s for s in test if s.run_id == query_run]
    if not db or not queries:
        raise ValueError(f"held-out region lacks submaps of {db_run!r} or {query_run!r}")
    return SplitData(train, db, queries)


def evaluate_params(params: ModelParams, config: ModelConfig, split: SplitData,
                    radius: float = retrieval.SUCCESS_RADIUS_M, topn: int = retrieval.MAX_N):
    index = retrieval.build_index(params, config, split.database)
    return retrieval.evaluate(index, retrieval.submap_queries(params, config, split.queries), radius, topn)


@dataclass
class ExperimentResult:
    params: ModelParams
    model_config: ModelConfig
    train: training.TrainResult
    report: retrieval.EvalReport
    untrained_report: retrieval.EvalReport
    seconds: float
    split: SplitData = field(repr=False, default=None)


def run_experiment(data_dir, loss: str = "lazy_quadruplet", iters: int = 2000, train_seed: int = 0,
                   model_config: ModelConfig | None = None, train_config: training.TrainConfig | None = None,
                   out_dir=None) -> ExperimentResult:
    """Train on the training regions of ``data_dir`` and evaluate the held-out
    region (query run against database run). Writes checkpoint, trace and
    report files when ``out_dir`` is given."""
    start = time.perf_counter()
    model_config = model_config or ModelConfig(seed=train_seed)
    train_config = replace(train_config or training.TrainConfig(), loss=loss, max_iters=iters, seed=train_seed)
    split = split_dataset(synthworld.load_dataset(data_dir))
    initial = init_params(model_config)
    untrained = evaluate_params(initial, model_config, split)
    data = training.TrainingSet(split.train, train_config.positive_m, train_config.negative_m)
    result = training.train_loop(data, model_config, train_config, params=initial)
    report = evaluate_params(result.params, model_config, split)
    seconds = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        store.save_checkpoint(out / "model.ckpt", result.params, model_config)
        store.write_text(out / "trace.tsv", training.format_trace(result.trace))
        retrieval.emit_report(report, out / "report")
    return ExperimentResult(result.params, model_config, result, report, untrained, seconds, split)
