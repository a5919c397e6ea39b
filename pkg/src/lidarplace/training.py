"""Tuple construction with cached-descriptor hard-negative mining, Adam, and
the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import pipeline
from .losses import LOSS_KINDS, QUADRUPLET_KINDS, Margins, batch_loss_node
from .model import ModelConfig, ModelParams, bind_params, describe_many, describe_nodes, init_params
from .numerics import Graph

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "lazy_quadruplet"
    margins: Margins = Margins()
    tuples_per_batch: int = 3
    negatives_per_tuple: int = 18
    mining_pool: int = 2000
    cache_refresh_iters: int = 1000
    positives_sampled: int = 2
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_iters: int = 2000
    seed: int = 0
    trace_every: int = 50
    positive_m: float = pipeline.POSITIVE_M
    negative_m: float = pipeline.NEGATIVE_M

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; valid: {', '.join(LOSS_KINDS)}")
        if min(self.tuples_per_batch, self.negatives_per_tuple, self.mining_pool,
               self.cache_refresh_iters, self.positives_sampled) < 1:
            raise ValueError(f"batch, tuple and cache sizes must be positive: {self}")

    @property
    def quadruplet(self) -> bool:
        return self.loss in QUADRUPLET_KINDS


class TrainingSet:
    """Submaps plus their planar-distance labels."""

    def __init__(self, submaps, positive_m=pipeline.POSITIVE_M, negative_m=pipeline.NEGATIVE_M):
        self.submaps = list(submaps)
        if not self.submaps:
            raise ValueError("empty training set")
        self.clouds = np.stack([s.cloud for s in self.submaps])
        xy = pipeline.centroid_array(self.submaps)
        dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        self.negative_mask = dist >= negative_m
        pos = dist <= positive_m
        np.fill_diagonal(pos, False)
        self.positives = [np.flatnonzero(row) for row in pos]
        self.negatives = [np.flatnonzero(row) for row in self.negative_mask]

    def __len__(self):
        return len(self.submaps)

    def ids(self, indices) -> list[str]:
        return [self.submaps[int(i)].id for i in indices]

    def eligible_anchors(self, n_neg: int) -> np.ndarray:
        return np.array(
            [i for i in range(len(self)) if len(self.positives[i]) and len(self.negatives[i]) >= n_neg],
            dtype=np.int64,
        )


def clamp_config(config: TrainConfig, data: TrainingSet) -> TrainConfig:
    """Shrink mining pool / negatives to what the training set can supply."""
    pool = min(config.mining_pool, len(data) - 1)
    with_pos = [len(data.negatives[i]) for i in range(len(data)) if len(data.positives[i])]
    if not with_pos:
        raise TrainingError("no training submap has a positive within the positive radius")
    n_neg = min(config.negatives_per_tuple, pool, max(with_pos))
    if n_neg < 1:
        raise TrainingError("no training submap has any negative")
    if pool != config.mining_pool or n_neg != config.negatives_per_tuple:
        log.warning("clamping mining_pool %d -> %d and negatives_per_tuple %d -> %d for %d submaps",
                    config.mining_pool, pool, config.negatives_per_tuple, n_neg, len(data))
    return replace(config, mining_pool=pool, negatives_per_tuple=n_neg)


@dataclass
class DescriptorCache:
    descriptors: np.ndarray  # [M,O], row i belongs to training submap i
    stamp: int = 0

    def __len__(self):
        return len(self.descriptors)

    def age(self, iteration: int) -> int:
        return iteration - self.stamp


def refresh_cache(params: ModelParams, model_config: ModelConfig, data: TrainingSet,
                  iteration: int = 0) -> DescriptorCache:
    return DescriptorCache(describe_many(params, model_config, data.clouds), iteration)


@dataclass(frozen=True)
class TrainingTuple:
    anchor: int
    positive: int
    negatives: tuple[int, ...]
    neg_star: int | None = None

    def rows(self) -> list[int]:
        rows = [self.anchor, self.positive, *self.negatives]
        if self.neg_star is not None:
            rows.append(self.neg_star)
        return rows


def _sq_dists(cache: DescriptorCache, i: int, others: np.ndarray) -> np.ndarray:
    diff = cache.descriptors[others] - cache.descriptors[i]
    return np.einsum("ij,ij->i", diff, diff)


def hardest_negatives(cache: DescriptorCache, anchor: int, candidates, k: int) -> np.ndarray:
    """The k candidates nearest the anchor in cached descriptor space (ties by index)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    d = _sq_dists(cache, anchor, candidates)
    return candidates[np.lexsort((candidates, d))[:k]]


def sample_tuple(data: TrainingSet, cache: DescriptorCache, config: TrainConfig, rng,
                 retries: int = 100) -> TrainingTuple:
    n_neg = config.negatives_per_tuple
    eligible = data.eligible_anchors(n_neg)
    if not len(eligible):
        raise TrainingError(f"no anchor has a positive and {n_neg} negatives")
    for _ in range(retries):
        anchor = int(eligible[rng.integers(len(eligible))])
        pos_pool = data.positives[anchor]
        picks = rng.choice(pos_pool, size=min(config.positives_sampled, len(pos_pool)), replace=False)
        positive = int(hardest_negatives(cache, anchor, picks, 1)[0])  # nearest of the picks
        neg_pool = data.negatives[anchor]
        pool = rng.choice(neg_pool, size=min(config.mining_pool, len(neg_pool)), replace=False)
        negatives = tuple(int(i) for i in hardest_negatives(cache, anchor, pool, n_neg))
        if not config.quadruplet:
            return TrainingTuple(anchor, positive, negatives)
        members = [anchor, positive, *negatives]
        free = np.flatnonzero(data.negative_mask[members].all(axis=0))
        if len(free):
            return TrainingTuple(anchor, positive, negatives, int(free[rng.integers(len(free))]))
    raise TrainingError(f"could not build a valid tuple in {retries} attempts")


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


# -- steps & loop ----------------------------------------------------------------


def batch_loss_and_grads(params: ModelParams, model_config: ModelConfig, data: TrainingSet,
                         batch, config: TrainConfig):
    graph = Graph()
    bound = bind_params(graph, params, trainable=True)
    rows = [r for t in batch for r in t.rows()]
    desc = describe_nodes(graph, bound, model_config, data.clouds[rows])
    loss = batch_loss_node(graph, desc, len(batch), config.negatives_per_tuple, config.loss, config.margins)
    value = float(graph.value(loss)[0])
    if not np.isfinite(value):
        return value, None
    graph.backward(loss)
    return value, {name: graph.grad(nid) for name, nid in bound.by_name.items()}


def train_step(params: ModelParams, batch, config: TrainConfig, model_config: ModelConfig,
               data: TrainingSet, state: AdamState, iteration: int = 0):
    """Mean tuple loss, backprop and one Adam update.

    Returns ``(new_params, loss_before_update, new_state)``.
    """
    value, grads = batch_loss_and_grads(params, model_config, data, batch, config)
    if grads is None:
        ids = [data.ids(t.rows()) for t in batch]
        raise TrainingError(f"non-finite loss {value} at iteration {iteration}; tuples {ids}")
    named, state = adam_update(params.named(), grads, state, config.learning_rate, config.betas, config.eps)
    return ModelParams.from_named(named), value, state


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    cache_age: int
    probe_recall: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    trace: list[TraceRecord]
    config: TrainConfig


def train_loop(data: TrainingSet, model_config: ModelConfig, config: TrainConfig,
               params: ModelParams | None = None,
               probe: Callable[[ModelParams], float] | None = None) -> TrainResult:
    config = clamp_config(config, data)
    params = init_params(model_config) if params is None else params
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    cache = refresh_cache(params, model_config, data, 0)
    losses, trace = [], []
    window: list[float] = []
    for it in range(config.max_iters):
        if cache.age(it) >= config.cache_refresh_iters:
            cache = refresh_cache(params, model_config, data, it)
        batch = [sample_tuple(data, cache, config, rng) for _ in range(config.tuples_per_batch)]
        age = cache.age(it)
        params, loss, state = train_step(params, batch, config, model_config, data, state, it)
        losses.append(loss)
        window.append(loss)
        if (it + 1) % config.trace_every == 0 or it + 1 == config.max_iters:
            recall = probe(params) if probe is not None else None
            trace.append(TraceRecord(it + 1, float(np.mean(window)), age, recall))
            log.info("iter %d loss %.5f cache_age %d%s", it + 1, trace[-1].loss, age,
                     "" if recall is None else f" recall {recall:.2f}")
            window = []
    return TrainResult(params, losses, trace, config)


def format_trace(trace) -> str:
    lines = ["iter\tloss\tcache_age\tprobe_recall"]
    for r in trace:
        probe = "" if r.probe_recall is None else repr(float(r.probe_recall))
        lines.append(f"{r.iteration}\t{r.loss!r}\t{r.cache_age}\t{probe}")
    return "\n".join(lines) + "\n"
