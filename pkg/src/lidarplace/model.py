"""Point-cloud descriptor network: shared per-point MLP, NetVLAD pooling,
fully connected compression and L2 normalization (plus a max-pool baseline)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Graph

VARIANTS = ("vlad", "max")
ASSIGN_SHARPNESS = 10.0


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 256
    mlp_widths: tuple[int, ...] = (64, 128, 256)
    n_clusters: int = 16
    out_dim: int = 64
    variant: str = "vlad"
    seed: int = 0
    intra_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        dims = [self.n_points, self.n_clusters, self.out_dim, *self.mlp_widths]
        if not self.mlp_widths or any(int(d) <= 0 for d in dims):
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def feature_dim(self) -> int:
        return self.mlp_widths[-1]

    @property
    def pooled_dim(self) -> int:
        if self.variant == "max":
            return self.feature_dim
        return self.feature_dim * self.n_clusters

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(n_points=4096, mlp_widths=(64, 64, 64, 128, 1024), n_clusters=64, out_dim=256)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(n_points=8, mlp_widths=(8, 8), n_clusters=4, out_dim=8)
        base.update(kw)
        return cls(**base)


@dataclass
class ModelParams:
    mlp: list[tuple[np.ndarray, np.ndarray]]
    head_weight: np.ndarray
    head_bias: np.ndarray
    clusters: np.ndarray | None = None
    assign_weights: np.ndarray | None = None
    assign_bias: np.ndarray | None = None

    def named(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping in a fixed order."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(self.mlp):
            out[f"mlp.{i}.weight"] = w
            out[f"mlp.{i}.bias"] = b
        if self.clusters is not None:
            out["vlad.clusters"] = self.clusters
            out["vlad.assign_weights"] = self.assign_weights
            out["vlad.assign_bias"] = self.assign_bias
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = sum(1 for k in arrays if k.startswith("mlp.") and k.endswith(".weight"))
        mlp = [(arrays[f"mlp.{i}.weight"], arrays[f"mlp.{i}.bias"]) for i in range(n_layers)]
        return cls(
            mlp=mlp,
            head_weight=arrays["head.weight"],
            head_bias=arrays["head.bias"],
            clusters=arrays.get("vlad.clusters"),
            assign_weights=arrays.get("vlad.assign_weights"),
            assign_bias=arrays.get("vlad.assign_bias"),
        )


def _glorot(rng, n_in, n_out):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def init_params(config: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    mlp = []
    n_in = 3
    for width in config.mlp_widths:
        mlp.append((_glorot(rng, n_in, width), np.zeros(width)))
        n_in = width
    d, k = config.feature_dim, config.n_clusters
    if config.variant == "max":
        return ModelParams(mlp, _glorot(rng, d, config.out_dim), np.zeros(config.out_dim))
    clusters = rng.uniform(-1.0, 1.0, size=(k, d))
    head = _glorot(rng, d * k, config.out_dim)
    return ModelParams(
        mlp=mlp,
        head_weight=head,
        head_bias=np.zeros(config.out_dim),
        clusters=clusters,
        # w_k . x + b_k = -a||x - c_k||^2 + a||x||^2: softmax over distance to clusters
        assign_weights=np.ascontiguousarray(2.0 * ASSIGN_SHARPNESS * clusters.T),
        assign_bias=-ASSIGN_SHARPNESS * (clusters**2).sum(axis=1),
    )


@dataclass
class BoundParams:
    """Node ids of a ModelParams recorded on one graph."""

    mlp: list[tuple[int, int]]
    head_weight: int
    head_bias: int
    clusters: int | None = None
    assign_weights: int | None = None
    assign_bias: int | None = None
    by_name: dict[str, int] = field(default_factory=dict)


def bind_params(graph: Graph, params: ModelParams, trainable: bool = False) -> BoundParams:
    ids = {name: graph.leaf(arr, trainable=trainable) for name, arr in params.named().items()}
    n = len(params.mlp)
    return BoundParams(
        mlp=[(ids[f"mlp.{i}.weight"], ids[f"mlp.{i}.bias"]) for i in range(n)],
        head_weight=ids["head.weight"],
        head_bias=ids["head.bias"],
        clusters=ids.get("vlad.clusters"),
        assign_weights=ids.get("vlad.assign_weights"),
        assign_bias=ids.get("vlad.assign_bias"),
        by_name=ids,
    )


def pointnet_forward(graph: Graph, bound: BoundParams, points: int) -> int:
    """Per-point shared MLP: [M,3] -> [M,D]. No activation after the last layer."""
    x = points
    last = len(bound.mlp) - 1
    for i, (w, b) in enumerate(bound.mlp):
        x = graph.affine_rows(x, w, b)
        if i < last:
            x = graph.relu(x)
    return x


def netvlad_raw(graph: Graph, bound: BoundParams, features: int, assign: int | None = None) -> int:
    """Unnormalized VLAD residual sums as a [K,D] node for one cloud's features."""
    if assign is None:
        assign = graph.softmax_rows(graph.affine_rows(features, bound.assign_weights, bound.assign_bias))
    at = graph.transpose(assign)
    weighted = graph.matmul(at, features)
    mass = graph.sum_rows(at)
    return graph.sub(weighted, graph.scale_rows(bound.clusters, mass))


def _vlad_block(graph, bound, features, assign, intra_norm):
    k, d = graph.value(bound.clusters).shape
    raw = netvlad_raw(graph, bound, features, assign)
    if intra_norm:
        raw = graph.l2_normalize_rows(raw)
    return graph.reshape(raw, (1, k * d))


def netvlad_forward(graph: Graph, bound: BoundParams, features: int, intra_norm: bool = True) -> int:
    """[N,D] features -> normalized VLAD vector of length D*K (block k = cluster k)."""
    flat = _vlad_block(graph, bound, features, None, intra_norm)
    return graph.l2_normalize_vec(graph.reshape(flat, (graph.value(flat).size,)))


def netvlad_brute_oracle(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Scalar-loop evaluation of V_k = sum_t h_k(p'_t); returns [K*D], unnormalized."""
    w = params.assign_weights
    b = params.assign_bias
    c = params.clusters
    k_total, d = c.shape
    out = np.zeros((k_total, d))
    for p in np.asarray(features, dtype=np.float64):
        logits = [sum(w[j, k] * p[j] for j in range(d)) + b[k] for k in range(k_total)]
        top = max(logits)
        expd = [np.exp(v - top) for v in logits]
        denom = sum(expd)
        for k in range(k_total):
            out[k] += (expd[k] / denom) * (p - c[k])
    return out.reshape(-1)


def describe_nodes(graph: Graph, bound: BoundParams, config: ModelConfig, clouds: np.ndarray) -> int:
    """Record descriptors of a [B,N,3] batch; returns a [B,O] node of unit rows."""
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim == 2:
        clouds = clouds[None]
    if clouds.ndim != 3 or clouds.shape[1:] != (config.n_points, 3):
        raise ValueError(f"expected clouds of shape [B,{config.n_points},3], got {clouds.shape}")
    n_clouds, n = clouds.shape[:2]
    points = graph.const(clouds.reshape(-1, 3))
    feats = pointnet_forward(graph, bound, points)

    if config.variant == "max":
        pooled = []
        for i in range(n_clouds):
            f = graph.slice_rows(feats, i * n, (i + 1) * n)
            pooled.append(graph.reshape(graph.max_rows(graph.transpose(f)), (1, config.feature_dim)))
        stacked = graph.concat(pooled) if n_clouds > 1 else pooled[0]
    else:
        # soft assignment is row-wise, so it runs on the whole stacked batch at once
        assign = graph.softmax_rows(graph.affine_rows(feats, bound.assign_weights, bound.assign_bias))
        blocks = []
        for i in range(n_clouds):
            f = graph.slice_rows(feats, i * n, (i + 1) * n)
            a = graph.slice_rows(assign, i * n, (i + 1) * n)
            blocks.append(_vlad_block(graph, bound, f, a, config.intra_norm))
        stacked = graph.concat(blocks) if n_clouds > 1 else blocks[0]
        stacked = graph.l2_normalize_rows(stacked)
    head = graph.affine_rows(stacked, bound.head_weight, bound.head_bias)
    return graph.l2_normalize_rows(head)


def describe(params: ModelParams, config: ModelConfig, cloud: np.ndarray) -> np.ndarray:
    """Global descriptor of one [N,3] cloud, computed on a private graph."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape != (config.n_points, 3):
        raise ValueError(f"expected a cloud of shape ({config.n_points}, 3), got {cloud.shape}")
    graph = Graph()
    out = describe_nodes(graph, bind_params(graph, params), config, cloud[None])
    return np.array(graph.value(out)[0])


def describe_many(params: ModelParams, config: ModelConfig, clouds, chunk: int = 1) -> np.ndarray:
    """Descriptors for a sequence of clouds.

    With ``chunk=1`` every row is bit-identical to :func:`describe`; larger
    chunks are faster but BLAS may round the stacked products differently.
    """
    clouds = np.asarray(clouds, dtype=np.float64)
    out = np.empty((len(clouds), config.out_dim))
    for start in range(0, len(clouds), chunk):
        graph = Graph()
        node = describe_nodes(graph, bind_params(graph, params), config, clouds[start : start + chunk])
        out[start : start + chunk] = graph.value(node)
    return out


def with_variant(config: ModelConfig, variant: str) -> ModelConfig:
    return replace(config, variant=variant)
