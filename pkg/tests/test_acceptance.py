"""Acceptance gates. Each test records one PASS/FAIL line (repeated in the
terminal summary) and then asserts the same condition."""

import math
import time

import numpy as np
import pytest

from lidarplace import experiment, pipeline, retrieval, synthworld
from lidarplace.losses import LOSS_KINDS, Margins, TupleDistances, scalar_loss
from lidarplace.model import ModelConfig, describe_nodes, bind_params, init_params, netvlad_brute_oracle, netvlad_raw
from lidarplace.numerics import Graph, grad_check
from lidarplace.training import DescriptorCache, hardest_negatives

# -- model ---------------------------------------------------------------------------


def _perm_gap(cfg, rng):
    params = init_params(cfg)
    cloud = rng.uniform(-1, 1, (cfg.n_points, 3))
    perm = rng.permutation(cfg.n_points)
    g = Graph()
    desc = g.value(describe_nodes(g, bind_params(g, params), cfg, np.stack([cloud, cloud[perm]])))
    return float(np.abs(desc[0] - desc[1]).max())


def test_permutation_invariance(record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    for name, make in (("desk", ModelConfig.desk), ("paper", ModelConfig.paper)):
        gaps = [_perm_gap(make(seed=int(rng.integers(1 << 31))), rng) for _ in range(100)]
        worst[name] = max(gaps)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-9 and secs < 60
    record("permutation invariance", ok,
           f"max Linf desk {worst['desk']:.2e}, paper {worst['paper']:.2e} (< 1e-9) over 100+100 triples "
           f"in {secs:.1f} s (< 60 s)")
    assert ok


def test_netvlad_oracle(record):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, d, k = (int(v) for v in rng.integers(1, 9, 3))
        cfg = ModelConfig(n_points=n, mlp_widths=(d,), n_clusters=k, out_dim=4, seed=int(rng.integers(1 << 31)))
        params = init_params(cfg)
        # perturb away from the init so assignment params are not tied to the clusters
        params.assign_weights = rng.normal(size=(d, k)) * 2
        params.assign_bias = rng.normal(size=k)
        feats = rng.normal(size=(n, d))
        g = Graph()
        raw = g.value(netvlad_raw(g, bind_params(g, params), g.const(feats))).reshape(-1)
        worst = max(worst, float(np.abs(raw - netvlad_brute_oracle(params, feats)).max()))
    ok = worst < 1e-10
    record("netvlad oracle", ok, f"max Linf {worst:.2e} (< 1e-10) over 50 cases")
    assert ok


def _tiny_loss_builder(cfg, params, clouds):
    from lidarplace.model import BoundParams

    names = list(params.named())
    n_layers = len(params.mlp)

    def build(g, ids):
        named = dict(zip(names, ids))
        bound = BoundParams(
            mlp=[(named[f"mlp.{i}.weight"], named[f"mlp.{i}.bias"]) for i in range(n_layers)],
            head_weight=named["head.weight"], head_bias=named["head.bias"],
            clusters=named["vlad.clusters"], assign_weights=named["vlad.assign_weights"],
            assign_bias=named["vlad.assign_bias"], by_name=named)
        desc = describe_nodes(g, bound, cfg, clouds)
        from lidarplace.losses import batch_loss_node

        return batch_loss_node(g, desc, 1, 2, "lazy_quadruplet", Margins())

    return build


def test_gradient_integrity(record):
    cfg = ModelConfig.tiny(seed=11)
    params = init_params(cfg)
    # anchor, positive, two negatives and neg_star; margins keep the hinges active
    clouds = np.random.default_rng(11).uniform(-1, 1, (5, cfg.n_points, 3))
    t0 = time.perf_counter()
    err = grad_check(_tiny_loss_builder(cfg, params, clouds), list(params.named().values()), h=1e-6)
    secs = time.perf_counter() - t0
    n = sum(a.size for a in params.named().values())
    ok = err < 1e-4 and secs < 120
    record("gradient integrity", ok, f"max rel err {err:.2e} (< 1e-4) over {n} parameters in {secs:.1f} s (< 120 s)")
    assert ok


# -- losses, mining, retrieval -------------------------------------------------------


def test_loss_algebra(record):
    rng = np.random.default_rng(5)
    bad = []
    for case in range(1000):
        n = int(rng.integers(1, 20))
        d = TupleDistances(float(rng.uniform(0, 4)), tuple(rng.uniform(0, 4, n)), tuple(rng.uniform(0, 4, n)))
        m = Margins(float(rng.uniform(0.01, 1)), float(rng.uniform(0.01, 1)))
        v = {k: scalar_loss(k, d, m) for k in LOSS_KINDS}
        checks = [min(v.values()) >= 0, v["lazy_triplet"] <= v["triplet"] + 1e-12,
                  v["lazy_quadruplet"] <= v["quadruplet"] + 1e-12]
        if n == 1:
            checks += [v["lazy_triplet"] == v["triplet"], v["lazy_quadruplet"] == v["quadruplet"]]
        # push every distance out of reach: all hinges inactive
        far = TupleDistances(d.delta_pos, tuple(x + 10 for x in d.delta_neg), tuple(x + 10 for x in d.delta_neg_star))
        checks.append(all(scalar_loss(k, far, m) == 0.0 for k in LOSS_KINDS))
        if not all(checks):
            bad.append(case)
    defaults = (Margins().alpha, Margins().beta) == (0.5, 0.2)
    ok = not bad and defaults
    record("loss algebra", ok, f"{1000 - len(bad)}/1000 cases hold; default margins (0.5, 0.2): {defaults}")
    assert ok


def test_mining_exactness(record):
    rng = np.random.default_rng(3)
    mismatches, trials = 0, 0
    for pool in (1, 18, 100, 777, 2000):
        for _ in range(10):
            desc = rng.normal(size=(pool + 1, 8))
            if trials % 2:
                desc = np.round(desc)
            cand = rng.permutation(np.arange(1, pool + 1))
            k = min(18, pool)
            got = hardest_negatives(DescriptorCache(desc), 0, cand, k).tolist()
            dist = ((desc[1:] - desc[0]) ** 2).sum(axis=1)
            want = sorted(range(1, pool + 1), key=lambda i: (dist[i - 1], i))[:k]
            mismatches += got != want
            trials += 1
    ok = mismatches == 0
    record("mining exactness", ok, f"{trials - mismatches}/{trials} pools (sizes up to 2000) match exhaustive sort")
    assert ok


def test_retrieval_exactness(record):
    rng = np.random.default_rng(9)
    bad_knn = bad_pct = 0
    for _ in range(100):
        n, dim = int(rng.integers(1, 500)), int(rng.integers(1, 32))
        desc = rng.normal(size=(n, dim))
        cents = rng.uniform(0, 400, (n, 2))
        index = retrieval.index_from_arrays(desc, centroids=cents)
        q = rng.normal(size=dim)
        k = int(rng.integers(1, n + 1))
        dist = ((desc - q) ** 2).sum(axis=1)
        want = sorted(range(n), key=lambda i: (dist[i], index.ids[i]))[:k]
        got = [i for i, _ in retrieval.query_knn(index, q, k)]
        bad_knn += got != [index.ids[i] for i in want]
        queries = [(f"q{j}", tuple(rng.uniform(0, 400, 2)), rng.normal(size=dim)) for j in range(5)]
        rep = retrieval.evaluate(index, queries)
        n1 = math.ceil(0.01 * n)
        bad_pct += rep.n_top1pct != n1 or (n1 <= 25 and rep.recall_top1pct != rep.recall_at_n[n1 - 1])
    ok = bad_knn == 0 and bad_pct == 0
    record("retrieval exactness", ok,
           f"knn matches brute force on {100 - bad_knn}/100 indexes; top-1% consistent on {100 - bad_pct}/100")
    assert ok


# -- reference experiment ------------------------------------------------------------


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    """Two complete runs of the reference experiment, each from a fresh dataset."""
    root = tmp_path_factory.mktemp("reference")
    runs = []
    for name in ("a", "b"):
        t0, c0 = time.perf_counter(), time.process_time()
        experiment.build_reference_dataset(root / name / "data")
        result = experiment.run_experiment(root / name / "data", out_dir=root / name / "out",
                                           **experiment.REFERENCE_TRAINING)
        runs.append((root / name, result, time.perf_counter() - t0, time.process_time() - c0))
    return runs


@pytest.mark.slow
def test_pipeline_contracts(record, reference):
    root = reference[0][0]
    subs = synthworld.load_dataset(root / "data")
    n_points = experiment.reference_pipeline().n_points
    shape_ok = all(s.cloud.shape == (n_points, 3) for s in subs)
    mean_ok = max(float(np.abs(s.cloud.mean(axis=0)).max()) for s in subs) < 1e-9
    range_ok = all(np.abs(s.cloud).max() <= 1.0 for s in subs)
    rng = np.random.default_rng(1)
    round_trip = 0.0
    for _ in range(100):
        pts = rng.normal(size=(int(rng.integers(1, 500)), 3)) * rng.uniform(1, 100) + rng.uniform(-500, 500, 3)
        c, cen, sc = pipeline.normalize_cloud(pts)
        round_trip = max(round_trip, float(np.abs(pipeline.denormalize_cloud(c, cen, sc) - pts).max()))
    labels = [(pipeline.label_distance(d), want) for d, want in (
        (0.0, pipeline.PairLabel.POSITIVE), (10.0, pipeline.PairLabel.POSITIVE),
        (10.0001, pipeline.PairLabel.INDETERMINATE), (49.999, pipeline.PairLabel.INDETERMINATE),
        (50.0, pipeline.PairLabel.NEGATIVE), (500.0, pipeline.PairLabel.NEGATIVE))]
    labels_ok = all(a == b for a, b in labels)
    ok = shape_ok and mean_ok and range_ok and round_trip < 1e-9 and labels_ok
    record("pipeline contracts", ok,
           f"{len(subs)} submaps: T={n_points} {shape_ok}, zero mean {mean_ok}, in [-1,1] {range_ok}; "
           f"round-trip {round_trip:.1e} (< 1e-9); 10/50 m labels {labels_ok}")
    assert ok


@pytest.mark.slow
def test_synthetic_end_to_end(record, reference):
    _, result, wall, cpu = reference[0]
    trained, untrained = result.report.recall_at_1, result.untrained_report.recall_at_1
    ok = trained >= 80.0 and trained >= untrained + 30.0 and cpu < 30 * 60
    record("synthetic end-to-end", ok,
           f"recall@1 {trained:.1f}% (>= 80) vs untrained {untrained:.1f}% (needs >= {untrained + 30:.1f}); "
           f"top-1% {result.report.recall_top1pct:.1f}%; {len(result.split.queries)} queries; "
           f"{cpu / 60:.1f} CPU-min, {wall / 60:.1f} wall-min (< 30)")
    assert ok


@pytest.mark.slow
def test_determinism(record, reference):
    (a, *_), (b, *_) = reference
    files = ["data/manifest.tsv", "out/model.ckpt", "out/trace.tsv",
             "out/report/recall_curve.tsv", "out/report/summary.tsv", "out/report/queries.tsv"]
    files += [str(p.relative_to(a)) for p in sorted((a / "data" / "runs").rglob("*.pcf"))]
    differing = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = not differing
    record("determinism", ok, f"{len(files) - len(differing)}/{len(files)} artifacts bit-identical across two runs"
           + (f"; differing: {differing[:3]}" if differing else ""))
    assert ok


# -- performance ---------------------------------------------------------------------


def test_query_latency(record):
    rng = np.random.default_rng(0)
    index = retrieval.index_from_arrays(rng.standard_normal((10_000, 256)))
    queries = rng.standard_normal((100, 256))
    times = []
    for q in queries:
        t0 = time.perf_counter()
        retrieval.query_knn(index, q, retrieval.MAX_N)
        times.append((time.perf_counter() - t0) * 1e3)
    med = float(np.median(times))
    ok = med < 10.0
    record("query latency", ok, f"median {med:.2f} ms (< 10 ms) for 10,000 x 256 linear scan, top-25")
    assert ok
