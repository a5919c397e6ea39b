"""On-disk formats: point cloud files, dataset manifest, checkpoints,
descriptor index files and flat ``key=value`` run configuration."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import LOSS_KINDS
from .model import ModelConfig, ModelParams

PCF_TEXT_MAGIC = "PCF1"
PCF_BINARY_MAGIC = b"PCFB0001"
INDEX_MAGIC = b"PNVIDX01"
CHECKPOINT_MAGIC = "LIDARPLACE-CHECKPOINT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _ensure_parent(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_text(path, text: str) -> None:
    try:
        _ensure_parent(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as err:
        raise OSError(f"cannot write {path}: {err}") from err


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise OSError(f"cannot read {path}: {err}") from err


# -- point cloud files ----------------------------------------------------------


def write_pcf(path, points, binary: bool = False) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if binary:
        blob = PCF_BINARY_MAGIC + struct.pack("<Q", len(pts)) + pts.astype("<f8").tobytes()
        _ensure_parent(path).write_bytes(blob)
        return
    # repr() of a float round-trips exactly
    lines = [f"{PCF_TEXT_MAGIC} {len(pts)}"]
    lines += [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in pts]
    write_text(path, "\n".join(lines) + "\n")


def read_pcf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data.startswith(PCF_BINARY_MAGIC):
        (count,) = struct.unpack_from("<Q", data, 8)
        body = data[16:]
        if len(body) != count * 24:
            raise FormatError(f"{path}: expected {count} points, found {len(body) / 24:.1f}")
        return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(count, 3)
    lines = data.decode("utf-8").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != PCF_TEXT_MAGIC:
        raise FormatError(f"{path}: not a point cloud file")
    count = int(head[1])
    rows = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(rows) != count or any(len(r) != 3 for r in rows):
        raise FormatError(f"{path}: expected {count} rows of 'x y z'")
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(count, 3)


# -- dataset manifest -----------------------------------------------------------

MANIFEST_HEADER = "run_id\tindex\tx\ty"


def write_manifest(path, rows) -> None:
    lines = [MANIFEST_HEADER] + [f"{r}\t{int(i)}\t{float(x)!r}\t{float(y)!r}" for r, i, x, y in rows]
    write_text(path, "\n".join(lines) + "\n")


def read_manifest(path) -> list[tuple[str, int, float, float]]:
    lines = read_text(path).splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: bad manifest header")
    out = []
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 columns")
        out.append((parts[0], int(parts[1]), float(parts[2]), float(parts[3])))
    return out


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Text manifest, an ``END`` line, then the concatenated little-endian f64 blob."""
    header = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        header.append(f"config.{f.name}={value}")
    offset = 0
    blobs = []
    for name, arr in params.named().items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(s) for s in arr.shape)
        header.append(f"param {name} {shape} {offset} {arr.size}")
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size
    header.append(f"total {offset}")
    header.append("END")
    data = ("\n".join(header) + "\n").encode("utf-8") + b"".join(blobs)
    try:
        _ensure_parent(path).write_bytes(data)
    except OSError as err:
        raise OSError(f"cannot write checkpoint {path}: {err}") from err


def _parse_config_value(name: str, raw: str):
    if name == "mlp_widths":
        return tuple(int(v) for v in raw.split(","))
    if name in ("variant",):
        return raw
    if name == "intra_norm":
        return raw == "True"
    return int(raw)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    data = Path(path).read_bytes()
    marker = b"\nEND\n"
    cut = data.find(marker)
    if cut < 0:
        raise FormatError(f"{path}: missing END marker")
    header = data[:cut].decode("utf-8").split("\n")
    blob = data[cut + len(marker):]
    if header[0] != f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}":
        raise FormatError(f"{path}: unsupported checkpoint header {header[0]!r}")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    cfg, arrays, total = {}, {}, None
    for line in header[1:]:
        if line.startswith("config."):
            key, raw = line[len("config."):].split("=", 1)
            cfg[key] = _parse_config_value(key, raw)
        elif line.startswith("param "):
            _, name, shape, offset, size = line.split()
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            offset, size = int(offset), int(size)
            if offset + size > len(values) or int(np.prod(dims)) != size:
                raise FormatError(f"{path}: parameter {name} does not fit the blob")
            arrays[name] = values[offset:offset + size].reshape(dims).copy()
        elif line.startswith("total "):
            total = int(line.split()[1])
    if total != len(values):
        raise FormatError(f"{path}: blob holds {len(values)} values, manifest says {total}")
    return ModelParams.from_named(arrays), ModelConfig(**cfg)


# -- descriptor index files -----------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_index(path, index) -> None:
    """Header (magic, dimension, count), then per entry: id, run id,
    centroid as two f64 and the descriptor as O f64, all little-endian."""
    n, dim = index.descriptors.shape
    parts = [INDEX_MAGIC, struct.pack("<QQ", dim, n)]
    for i in range(n):
        parts.append(_pack_str(index.ids[i]))
        parts.append(_pack_str(index.run_ids[i]))
        parts.append(np.asarray(index.centroids[i], dtype="<f8").tobytes())
        parts.append(np.asarray(index.descriptors[i], dtype="<f8").tobytes())
    _ensure_parent(path).write_bytes(b"".join(parts))


def load_index(path):
    from .retrieval import DescriptorIndex

    data = Path(path).read_bytes()
    if not data.startswith(INDEX_MAGIC):
        raise FormatError(f"{path}: not an index file")
    dim, n = struct.unpack_from("<QQ", data, 8)
    pos = 24
    ids, runs, cents, descs = [], [], [], []

    def take_str():
        nonlocal pos
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        s = data[pos:pos + length].decode("utf-8")
        pos += length
        return s

    for _ in range(n):
        ids.append(take_str())
        runs.append(take_str())
        cents.append(np.frombuffer(data, "<f8", 2, pos))
        pos += 16
        descs.append(np.frombuffer(data, "<f8", dim, pos))
        pos += 8 * dim
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {n} entries")
    return DescriptorIndex(
        ids,
        runs,
        np.array(cents, dtype=np.float64).reshape(n, 2),
        np.array(descs, dtype=np.float64).reshape(n, dim),
    )


# -- run configuration file -----------------------------------------------------


@dataclass
class TrainSection:
    loss: str = "lazy_quadruplet"
    alpha: float = 0.5
    beta: float = 0.2
    tuples_per_batch: int = 3
    negatives_per_tuple: int = 18
    mining_pool: int = 2000
    cache_refresh_iters: int = 1000
    positives_sampled: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 2000
    seed: int = 0
    trace_every: int = 50


@dataclass
class PipelineSection:
    positive_m: float = 10.0
    negative_m: float = 50.0
    radius_m: float = 25.0
    topn: int = 25
    interval_m: float = 10.0
    extent_m: float = 25.0
    test_fraction: float = 0.3
    region_side_m: float = 150.0
    split_seed: int = 0


@dataclass
class ModelSection:
    n_points: int = 256
    mlp_widths: str = "64,128,256"
    n_clusters: int = 16
    out_dim: int = 64
    variant: str = "vlad"
    seed: int = 0
    intra_norm: bool = True

    def to_config(self) -> ModelConfig:
        widths = tuple(int(v) for v in self.mlp_widths.split(","))
        return ModelConfig(self.n_points, widths, self.n_clusters, self.out_dim, self.variant,
                           self.seed, self.intra_norm)


@dataclass
class PathsSection:
    data: str = ""
    out: str = ""


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    paths: PathsSection = field(default_factory=PathsSection)


def _coerce(raw: str, kind):
    if kind is bool or kind == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment.

    Every key has a default; unknown keys and malformed values are errors
    naming the offending line.
    """
    cfg = RunConfig()
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        section_name, _, name = key.partition(".")
        section = getattr(cfg, section_name, None) if name else None
        known = {f.name: f for f in fields(section)} if dataclasses.is_dataclass(section) else {}
        if name not in known:
            raise ValueError(f"{source}:{n}: unknown key {key!r}")
        try:
            value = _coerce(raw, known[name].type)
        except ValueError as err:
            raise ValueError(f"{source}:{n}: bad value for {key}: {err}") from None
        setattr(section, name, value)
    if cfg.train.loss not in LOSS_KINDS:
        raise ValueError(f"{source}: train.loss must be one of {', '.join(LOSS_KINDS)}")
    return cfg


def load_run_config(path) -> RunConfig:
    return parse_run_config(read_text(path), str(path))


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for section in fields(cfg):
        for f in fields(getattr(cfg, section.name)):
            lines.append(f"{section.name}.{f.name}={getattr(getattr(cfg, section.name), f.name)}")
    return "\n".join(lines) + "\n"
