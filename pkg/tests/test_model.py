import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarplace.model import (
    ModelConfig,
    ModelParams,
    bind_params,
    describe,
    describe_many,
    init_params,
    netvlad_brute_oracle,
    netvlad_forward,
    netvlad_raw,
    pointnet_forward,
    with_variant,
)
from lidarplace.numerics import Graph, grad_check


def _raw_vlad(params, features):
    g = Graph()
    b = bind_params(g, params)
    return np.array(g.value(netvlad_raw(g, b, g.const(features)))).reshape(-1)


def _vlad_params(w, b, c):
    c = np.asarray(c, dtype=np.float64)
    return ModelParams([], np.zeros((c.size, 1)), np.zeros(1), c, np.asarray(w, dtype=np.float64),
                       np.asarray(b, dtype=np.float64))


def test_init_is_deterministic():
    a = init_params(ModelConfig(seed=3)).named()
    b = init_params(ModelConfig(seed=3)).named()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_init_distributions():
    cfg = ModelConfig()
    p = init_params(cfg)
    w0, b0 = p.mlp[0]
    assert np.abs(w0).max() <= np.sqrt(6 / (3 + 64))
    assert not b0.any() and not p.head_bias.any()
    assert np.abs(p.clusters).max() <= 1.0
    np.testing.assert_array_equal(p.assign_weights, 20.0 * p.clusters.T)
    np.testing.assert_array_equal(p.assign_bias, -10.0 * (p.clusters**2).sum(axis=1))


def test_desk_head_shape():
    p = init_params(ModelConfig.desk())
    assert p.head_weight.shape == (256 * 16, 64)
    assert p.clusters.shape == (16, 256)
    assert p.assign_weights.shape == (256, 16)


def test_paper_profile_shapes():
    cfg = ModelConfig.paper()
    assert (cfg.n_points, cfg.feature_dim, cfg.n_clusters, cfg.out_dim) == (4096, 1024, 64, 256)


def test_max_variant_has_no_vlad_params():
    p = init_params(ModelConfig(variant="max"))
    assert p.clusters is None
    assert p.head_weight.shape == (256, 64)


@pytest.mark.parametrize("bad", [dict(n_clusters=0), dict(mlp_widths=()), dict(out_dim=-1), dict(variant="std")])
def test_bad_config_rejected(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_single_cluster_softmax_is_constant():
    p = _vlad_params(np.array([[3.0], [-7.0]]), [2.5], [[0.0, 0.0]])
    # oracle: with one cluster every weight is 1, so V_1 = sum of residuals
    np.testing.assert_array_equal(_raw_vlad(p, [[1.0, 0.0], [0.0, 1.0]]), [1.0, 1.0])


def test_two_cluster_scalar_case():
    p = _vlad_params([[1.0, -1.0]], [0.0, 0.0], [[0.5], [-0.5]])
    a1 = np.exp(1.0) / (np.exp(1.0) + np.exp(-1.0))
    expected = [a1 * 0.5, (1 - a1) * 1.5]
    np.testing.assert_allclose(_raw_vlad(p, [[1.0]]), expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(_raw_vlad(p, [[1.0]]), [0.4404, 0.1788], atol=1e-4)


def test_features_at_their_cluster_give_zero_block():
    c = np.array([[1.0, 2.0], [-3.0, 0.5]])
    p = _vlad_params(200.0 * c.T, -100.0 * (c**2).sum(axis=1), c)
    raw = _raw_vlad(p, np.repeat(c[:1], 3, axis=0)).reshape(2, 2)
    np.testing.assert_allclose(raw[0], 0.0, atol=1e-12)


def test_brute_oracle_single_point_single_cluster():
    p = _vlad_params([[0.4], [0.1]], [0.0], [[0.25, -1.0]])
    np.testing.assert_array_equal(netvlad_brute_oracle(p, [[1.0, 2.0]]), [0.75, 3.0])


def test_pointnet_rows_are_independent():
    cfg = ModelConfig.tiny()
    p = init_params(cfg)
    x = np.random.default_rng(0).uniform(-1, 1, (8, 3))
    x[5] = x[2]

    def feats(cloud):
        g = Graph()
        return np.array(g.value(pointnet_forward(g, bind_params(g, p), g.const(cloud))))

    base = feats(x)
    np.testing.assert_array_equal(base[2], base[5])
    moved = x.copy()
    moved[4] += 0.3
    changed = np.flatnonzero(np.abs(feats(moved) - base).max(axis=1) > 0)
    assert changed.tolist() == [4]
    zero = feats(np.zeros((8, 3)))
    assert (zero == zero[0]).all()


def test_describe_unit_norm_and_deterministic():
    cfg = ModelConfig()
    p = init_params(cfg)
    x = np.random.default_rng(1).uniform(-1, 1, (256, 3))
    d1, d2 = describe(p, cfg, x), describe(p, cfg, x)
    assert d1.shape == (64,)
    assert abs(np.linalg.norm(d1) - 1) < 1e-9
    assert d1.tobytes() == d2.tobytes()


def test_describe_rejects_wrong_point_count():
    cfg = ModelConfig.tiny()
    with pytest.raises(ValueError, match="shape"):
        describe(init_params(cfg), cfg, np.zeros((7, 3)))


def test_describe_many_matches_describe_bitwise():
    cfg = ModelConfig.tiny()
    p = init_params(cfg)
    clouds = np.random.default_rng(2).uniform(-1, 1, (5, 8, 3))
    many = describe_many(p, cfg, clouds)
    for c, row in zip(clouds, many):
        assert describe(p, cfg, c).tobytes() == row.tobytes()
    np.testing.assert_allclose(describe_many(p, cfg, clouds, chunk=4), many, rtol=0, atol=1e-12)


def test_max_variant_describes_unit_vectors():
    cfg = with_variant(ModelConfig.tiny(), "max")
    d = describe(init_params(cfg), cfg, np.random.default_rng(0).uniform(-1, 1, (8, 3)))
    assert abs(np.linalg.norm(d) - 1) < 1e-9


def test_intra_norm_flag_changes_descriptor():
    cfg = ModelConfig.tiny()
    p = init_params(cfg)
    x = np.random.default_rng(4).uniform(-1, 1, (8, 3))
    off = ModelConfig.tiny(intra_norm=False)
    assert not np.allclose(describe(p, cfg, x), describe(p, off, x))


def test_named_round_trip():
    p = init_params(ModelConfig.tiny())
    q = ModelParams.from_named(p.named())
    assert all(np.array_equal(a, b) for a, b in zip(p.named().values(), q.named().values()))


@pytest.mark.parametrize("variant", ["vlad", "max"])
def test_tiny_model_gradients(variant):
    cfg = ModelConfig.tiny(variant=variant, seed=5)
    params = init_params(cfg)
    names = list(params.named())
    clouds = np.random.default_rng(5).uniform(-1, 1, (2, 8, 3))
    from lidarplace.model import describe_nodes

    def build(g, ids):
        named = dict(zip(names, ids))
        bound = _bound_from_ids(named, len(params.mlp))
        desc = describe_nodes(g, bound, cfg, clouds)
        top = g.reshape(g.slice_rows(desc, 0, 1), (cfg.out_dim,))
        bottom = g.reshape(g.slice_rows(desc, 1, 2), (cfg.out_dim,))
        diff = g.sub(top, bottom)
        return g.sum_rows(g.mul(diff, diff))

    assert grad_check(build, list(params.named().values())) < 1e-4


def _bound_from_ids(named, n_layers):
    from lidarplace.model import BoundParams

    return BoundParams(
        mlp=[(named[f"mlp.{i}.weight"], named[f"mlp.{i}.bias"]) for i in range(n_layers)],
        head_weight=named["head.weight"],
        head_bias=named["head.bias"],
        clusters=named.get("vlad.clusters"),
        assign_weights=named.get("vlad.assign_weights"),
        assign_bias=named.get("vlad.assign_bias"),
        by_name=named,
    )


# -- properties ------------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_vlad_pooling_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d, k = (int(v) for v in rng.integers(1, 7, 3))
    p = _vlad_params(rng.normal(size=(d, k)) * 2, rng.normal(size=k), rng.normal(size=(k, d)))
    feats = rng.normal(size=(n, d))
    assert np.abs(_raw_vlad(p, feats) - netvlad_brute_oracle(p, feats)).max() < 1e-10


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["vlad", "max"]))
def test_descriptor_permutation_invariance(seed, variant):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_points=32, mlp_widths=(16, 24), n_clusters=5, out_dim=12, variant=variant,
                      seed=int(rng.integers(1 << 31)))
    p = init_params(cfg)
    x = rng.uniform(-1, 1, (32, 3))
    perm = rng.permutation(32)
    assert np.abs(describe(p, cfg, x) - describe(p, cfg, x[perm])).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_vlad_vector_is_unit_norm(seed):
    rng = np.random.default_rng(seed)
    p = _vlad_params(rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 3)))
    g = Graph()
    out = g.value(netvlad_forward(g, bind_params(g, p), g.const(rng.normal(size=(6, 3)))))
    assert abs(np.linalg.norm(out) - 1) < 1e-12
