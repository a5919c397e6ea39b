"""Submap preprocessing: ground removal, fixed-count downsampling, normalization,
trajectory-interval submap extraction, pair labels and geographic splitting."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

POSITIVE_M = 10.0
NEGATIVE_M = 50.0


@dataclass
class RawScanCloud:
    points: np.ndarray  # [n,3] world frame, meters
    pose_xy: tuple[float, float]
    run_id: str
    timestamp: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1 or not np.isfinite(self.points).all():
            raise ValueError("a scan needs at least one finite point")
        self.pose_xy = (float(self.pose_xy[0]), float(self.pose_xy[1]))


@dataclass
class Submap:
    cloud: np.ndarray  # [T,3], zero mean, inside [-1,1]
    centroid_xy: tuple[float, float]
    run_id: str
    extent: float
    index: int = 0

    @property
    def id(self) -> str:
        return f"{self.run_id}/{self.index}"


class PairLabel(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class PipelineConfig:
    interval_m: float = 10.0
    extent_m: float = 25.0
    n_points: int = 256
    inlier_tol: float = 0.15
    max_tilt_deg: float = 15.0
    ransac_iters: int = 500
    seed: int = 0


@dataclass
class BuildLog:
    """Submaps skipped during construction, with the reason."""

    skipped: list[tuple[int, str]] = field(default_factory=list)


# -- ground removal ------------------------------------------------------------


def fit_ground_plane(points, inlier_tol=0.15, max_tilt=15.0, iterations=500, seed=0):
    """Seeded consensus fit of a near-horizontal plane.

    Returns ``(normal, offset, inlier_mask)`` of the best plane, or ``None``
    when no sample passes the tilt constraint.
    """
    pts = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    cos_tilt = math.cos(math.radians(max_tilt))
    best = None
    best_count = -1
    samples = rng.integers(0, len(pts), size=(iterations, 3))
    for i, j, k in samples:
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if abs(normal[2]) < cos_tilt:
            continue
        offset = -float(normal @ pts[i])
        mask = np.abs(pts @ normal + offset) <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best, best_count = (normal, offset, mask), count
    return best


def remove_ground(scan: RawScanCloud, inlier_tol=0.15, max_tilt=15.0, iterations=500, seed=0,
                  min_inlier_ratio=0.2) -> RawScanCloud:
    n = len(scan.points)
    if n < 50:
        raise ValueError(f"ground removal needs at least 50 points, got {n}")
    fit = fit_ground_plane(scan.points, inlier_tol, max_tilt, iterations, seed)
    if fit is None or fit[2].sum() < min_inlier_ratio * n:
        return scan
    return _with_points(scan, scan.points[~fit[2]])


def _with_points(scan: RawScanCloud, points: np.ndarray) -> RawScanCloud:
    # bypass the non-empty check: an all-ground crop is legitimately empty
    out = object.__new__(RawScanCloud)
    out.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out.pose_xy = scan.pose_xy
    out.run_id = scan.run_id
    out.timestamp = scan.timestamp
    return out


# -- downsampling --------------------------------------------------------------


def _voxel_keys(points, lo, size):
    return np.floor((points - lo) / size).astype(np.int64)


def _linear_keys(keys):
    span = keys.max(axis=0) + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2.0**62:
        return keys[:, 0] + span[0] * (keys[:, 1] + span[1] * keys[:, 2])
    return None


def _count_voxels(points, lo, size):
    keys = _voxel_keys(points, lo, size)
    flat = _linear_keys(keys)
    if flat is None:
        return len(np.unique(keys, axis=0))
    return len(np.unique(flat))


def voxel_centroids(points, size):
    """Centroid of every occupied voxel of side ``size`` (sorted by voxel key)."""
    pts = np.asarray(points, dtype=np.float64)
    keys = _voxel_keys(pts, pts.min(axis=0), size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def find_voxel_size(points, target, iterations=32):
    """Bisect the voxel side over (0, bbox diagonal] for the smallest occupied
    count that still reaches ``target``. Returns ``None`` if no size does."""
    pts = np.asarray(points, dtype=np.float64)
    lo_corner = pts.min(axis=0)
    diag = float(np.linalg.norm(pts.max(axis=0) - lo_corner))
    if diag == 0.0:
        return None
    lo, hi = 0.0, diag
    best_size, best_count = None, None
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        count = _count_voxels(pts, lo_corner, mid)
        if count >= target:
            if best_count is None or count < best_count or (count == best_count and mid > best_size):
                best_size, best_count = mid, count
            lo = mid
        else:
            hi = mid
    return best_size


def downsample_to_fixed(points, target: int, seed: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot downsample an empty point set")
    if len(pts) < math.ceil(target / 4):
        raise ValueError(f"need at least {math.ceil(target / 4)} points for target {target}, got {len(pts)}")
    rng = np.random.default_rng(seed)
    size = find_voxel_size(pts, target) if len(pts) >= target else None
    if size is None:
        base = np.unique(pts, axis=0) if len(pts) >= target else pts
        if len(base) >= target:
            return base[np.sort(rng.choice(len(base), target, replace=False))]
        extra = rng.choice(len(base), target - len(base), replace=True)
        return np.concatenate([base, base[extra]])
    cents = voxel_centroids(pts, size)
    return cents[np.sort(rng.choice(len(cents), target, replace=False))]


# -- normalization -------------------------------------------------------------


def normalize_cloud(points):
    """Center on the per-axis mean and divide by the largest |coordinate|.

    Returns ``(cloud, centroid, scale)``; ``cloud * scale + centroid`` inverts it.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.abs(centered).max()) if len(pts) else 0.0
    if scale == 0.0:
        scale = 1.0
    return centered / scale, centroid, scale


def denormalize_cloud(cloud, centroid, scale):
    return np.asarray(cloud) * scale + np.asarray(centroid)


# -- submaps -------------------------------------------------------------------


def trajectory(run) -> np.ndarray:
    scans = sorted(run, key=lambda s: s.timestamp)
    return np.array([s.pose_xy for s in scans], dtype=np.float64)


def points_along(path: np.ndarray, interval: float) -> np.ndarray:
    """Positions every ``interval`` meters of arc length, start and end inclusive."""
    if interval <= 0:
        raise ValueError("interval must be positive")
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = int(math.floor(total / interval + 1e-9)) + 1
    stations = np.arange(n) * interval
    out = np.empty((n, 2))
    for i, s in enumerate(stations):
        j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1) if len(seg) else 0
        if not len(seg) or seg[j] == 0:
            out[i] = path[min(j, len(path) - 1)]
            continue
        t = (s - cum[j]) / seg[j]
        out[i] = path[j] + t * (path[j + 1] - path[j])
    return out


def build_submaps(run, interval: float = 10.0, extent: float = 25.0, target: int = 256,
                  config: PipelineConfig | None = None, build_log: BuildLog | None = None) -> list[Submap]:
    """Crop extent x extent boxes along the run's trajectory and preprocess each."""
    cfg = config or PipelineConfig(interval_m=interval, extent_m=extent, n_points=target)
    run = list(run)
    if not run:
        return []
    run_id = run[0].run_id
    world = np.concatenate([s.points for s in run])
    half = 0.5 * extent
    out = []
    for k, (cx, cy) in enumerate(points_along(trajectory(run), interval)):
        inside = (np.abs(world[:, 0] - cx) <= half) & (np.abs(world[:, 1] - cy) <= half)
        crop = world[inside]
        seed = cfg.seed * 1_000_003 + k
        try:
            if len(crop) < 50:
                raise ValueError(f"crop holds only {len(crop)} points")
            scan = _with_points(run[0], crop)
            ground_free = remove_ground(scan, cfg.inlier_tol, cfg.max_tilt_deg, cfg.ransac_iters, seed).points
            fixed = downsample_to_fixed(ground_free, target, seed)
        except ValueError as err:
            log.warning("run %s submap %d at (%.1f, %.1f) skipped: %s", run_id, k, cx, cy, err)
            if build_log is not None:
                build_log.skipped.append((k, str(err)))
            continue
        cloud, _, _ = normalize_cloud(fixed)
        out.append(Submap(cloud, (float(cx), float(cy)), run_id, float(extent), k))
    return out


# -- labels & split ------------------------------------------------------------


def planar_distance(a: Submap, b: Submap) -> float:
    return math.hypot(a.centroid_xy[0] - b.centroid_xy[0], a.centroid_xy[1] - b.centroid_xy[1])


def label_distance(dist: float, positive_m=POSITIVE_M, negative_m=NEGATIVE_M) -> PairLabel:
    if dist <= positive_m:
        return PairLabel.POSITIVE
    if dist >= negative_m:
        return PairLabel.NEGATIVE
    return PairLabel.INDETERMINATE


def label_pair(a: Submap, b: Submap, positive_m=POSITIVE_M, negative_m=NEGATIVE_M) -> PairLabel:
    return label_distance(planar_distance(a, b), positive_m, negative_m)


def centroid_array(submaps) -> np.ndarray:
    return np.array([s.centroid_xy for s in submaps], dtype=np.float64).reshape(-1, 2)


def split_regions(submaps, test_fraction=0.3, region_side=150.0, seed=0, slack=0.05, attempts=200):
    """Assign whole square tiles to the test set until its share of submaps
    lands within ``test_fraction +- slack``. Returns ``(train, test)``."""
    submaps = list(submaps)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    xy = centroid_array(submaps)
    tiles = np.floor((xy - xy.min(axis=0)) / region_side).astype(np.int64)
    keys, inverse, counts = np.unique(tiles, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if len(keys) < 2:
        raise ValueError("submaps span a single region; cannot split geographically")
    n = len(submaps)
    lo, hi = (test_fraction - slack) * n, (test_fraction + slack) * n
    rng = np.random.default_rng(seed)
    chosen = None
    for _ in range(attempts):
        picked, total = [], 0
        for t in rng.permutation(len(keys)):
            if total + counts[t] <= hi:
                picked.append(t)
                total += counts[t]
            if total >= lo:
                break
        if lo <= total <= hi:
            chosen = set(int(t) for t in picked)
            break
    if chosen is None:
        raise ValueError(
            f"no tiling of {region_side} m regions gives a test share near {test_fraction}"
        )
    test_mask = np.isin(inverse, list(chosen))
    train = [s for s, m in zip(submaps, test_mask) if not m]
    test = [s for s, m in zip(submaps, test_mask) if m]
    return train, test
