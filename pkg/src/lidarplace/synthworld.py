"""Procedural LiDAR-like world: landmarks on a flat ground plane, repeatable
traversals that sample landmark surfaces, with noise, dropout, heading
jitter and transient clutter."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline, store

KINDS = ("box", "cylinder", "wall")
MIN_SEPARATION_M = 5.0
CAR_SIZE = (4.5, 1.8, 1.5)


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    extent_m: float = 600.0
    n_landmarks: int = 120
    kind_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    box_side_m: tuple[float, float] = (4.0, 14.0)
    box_height_m: tuple[float, float] = (3.0, 15.0)
    cylinder_radius_m: tuple[float, float] = (0.3, 3.0)
    cylinder_height_m: tuple[float, float] = (2.0, 12.0)
    wall_length_m: tuple[float, float] = (8.0, 25.0)
    wall_height_m: tuple[float, float] = (1.5, 6.0)
    wall_thickness_m: float = 0.4
    ground_z: float = 0.0
    # optional street network: landmarks then line the roads instead of filling the square
    roads: tuple[tuple[tuple[float, float], ...], ...] = ()
    road_clearance_m: float = 4.0
    road_band_m: float = 30.0


@dataclass(frozen=True)
class Landmark:
    kind: str
    x: float
    y: float
    yaw: float
    size: tuple[float, float, float]  # box/wall: (length, width, height); cylinder: (radius, radius, height)

    @property
    def radius(self) -> float:
        """Radius of the planar footprint's bounding circle."""
        if self.kind == "cylinder":
            return self.size[0]
        return 0.5 * math.hypot(self.size[0], self.size[1])


@dataclass
class World:
    spec: WorldSpec
    landmarks: list[Landmark] = field(default_factory=list)


@dataclass(frozen=True)
class RunSpec:
    seed: int
    route: tuple[tuple[float, float], ...]
    run_id: str = "run0"
    scan_spacing_m: float = 2.0
    start_offset_m: float = 0.0
    noise_sigma_m: float = 0.03
    dropout: float = 0.1
    heading_jitter_deg: float = 5.0
    clutter_max: int = 3
    scan_radius_m: float = 30.0
    points_per_scan: int = 8000


# -- geometry helpers ------------------------------------------------------------


def _seg_distance(p, a, b):
    a, b, p = np.asarray(a, float), np.asarray(b, float), np.asarray(p, float)
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(max(float((p - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _road_distance(p, roads):
    return min(_seg_distance(p, a, b) for road in roads for a, b in zip(road[:-1], road[1:]))


def _rectangles(lm: Landmark, ground_z: float):
    """Planar faces as (center, u_half, v_half) with u, v spanning the face."""
    length, width, height = lm.size
    c, s = math.cos(lm.yaw), math.sin(lm.yaw)
    ex = np.array([c, s, 0.0]) * (0.5 * length)
    ey = np.array([-s, c, 0.0]) * (0.5 * width)
    ez = np.array([0.0, 0.0, 0.5 * height])
    mid = np.array([lm.x, lm.y, ground_z + 0.5 * height])
    faces = [
        (mid + ey, ex, ez), (mid - ey, ex, ez),
        (mid + ex, ey, ez), (mid - ex, ey, ez),
        (mid + ez, ex, ey),
    ]
    return faces


def _surface_area(lm: Landmark) -> float:
    if lm.kind == "cylinder":
        r, _, h = lm.size
        return 2 * math.pi * r * h + math.pi * r * r
    length, width, h = lm.size
    return 2 * (length + width) * h + length * width


def _sample_landmark(lm: Landmark, n: int, rng, ground_z: float) -> np.ndarray:
    if n <= 0:
        return np.empty((0, 3))
    if lm.kind == "cylinder":
        r, _, h = lm.size
        side = 2 * math.pi * r * h
        n_side = rng.binomial(n, side / (side + math.pi * r * r))
        theta = rng.uniform(0, 2 * math.pi, n_side)
        z = rng.uniform(0, h, n_side) + ground_z
        side_pts = np.column_stack([lm.x + r * np.cos(theta), lm.y + r * np.sin(theta), z])
        rad = r * np.sqrt(rng.uniform(0, 1, n - n_side))
        phi = rng.uniform(0, 2 * math.pi, n - n_side)
        top = np.column_stack([lm.x + rad * np.cos(phi), lm.y + rad * np.sin(phi), np.full(n - n_side, ground_z + h)])
        return np.concatenate([side_pts, top])
    faces = _rectangles(lm, ground_z)
    areas = np.array([4 * np.linalg.norm(u) * np.linalg.norm(v) for _, u, v in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for (center, u, v), k in zip(faces, counts):
        a = rng.uniform(-1, 1, (k, 1))
        b = rng.uniform(-1, 1, (k, 1))
        out.append(center + a * u + b * v)
    return np.concatenate(out)


# -- world -----------------------------------------------------------------------


def _draw_landmark(spec: WorldSpec, rng) -> Landmark:
    kind = KINDS[rng.choice(len(KINDS), p=np.asarray(spec.kind_weights) / sum(spec.kind_weights))]
    yaw = rng.uniform(0, math.pi)
    if kind == "box":
        size = (rng.uniform(*spec.box_side_m), rng.uniform(*spec.box_side_m), rng.uniform(*spec.box_height_m))
    elif kind == "cylinder":
        r = rng.uniform(*spec.cylinder_radius_m)
        size = (r, r, rng.uniform(*spec.cylinder_height_m))
    else:
        size = (rng.uniform(*spec.wall_length_m), spec.wall_thickness_m, rng.uniform(*spec.wall_height_m))
    return Landmark(kind, 0.0, 0.0, yaw, size)


def _propose_center(spec: WorldSpec, radius: float, rng):
    if not spec.roads:
        return rng.uniform(radius, spec.extent_m - radius, 2)
    segs = [(np.asarray(a, float), np.asarray(b, float)) for road in spec.roads for a, b in zip(road[:-1], road[1:])]
    lengths = np.array([np.linalg.norm(b - a) for a, b in segs])
    a, b = segs[rng.choice(len(segs), p=lengths / lengths.sum())]
    along = a + rng.uniform(0, 1) * (b - a)
    direction = (b - a) / max(np.linalg.norm(b - a), 1e-12)
    normal = np.array([-direction[1], direction[0]])
    lateral = rng.uniform(spec.road_clearance_m + radius, max(spec.road_band_m, spec.road_clearance_m + radius))
    return along + normal * lateral * rng.choice([-1.0, 1.0])


def generate_world(spec: WorldSpec, max_attempts_per_landmark: int = 500) -> World:
    """Place landmarks deterministically with >= 5 m gaps between footprints."""
    if spec.extent_m <= 0 or spec.n_landmarks < 0:
        raise ValueError(f"invalid world spec: {spec}")
    rng = np.random.default_rng(spec.seed)
    placed: list[Landmark] = []
    for i in range(spec.n_landmarks):
        for _ in range(max_attempts_per_landmark):
            proto = _draw_landmark(spec, rng)
            r = proto.radius
            x, y = _propose_center(spec, r, rng)
            if not (r <= x <= spec.extent_m - r and r <= y <= spec.extent_m - r):
                continue
            if spec.roads and _road_distance((x, y), spec.roads) < r + spec.road_clearance_m:
                continue
            if any(math.hypot(x - o.x, y - o.y) < r + o.radius + MIN_SEPARATION_M for o in placed):
                continue
            placed.append(Landmark(proto.kind, float(x), float(y), proto.yaw, proto.size))
            break
        else:
            raise ValueError(f"world overcrowded: placed {i} of {spec.n_landmarks} landmarks")
    return World(spec, placed)


# -- runs ------------------------------------------------------------------------


def route_poses(route, spacing: float, offset: float = 0.0) -> np.ndarray:
    path = np.asarray(route, dtype=np.float64)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    total = float(seg.sum())
    stations = np.arange(offset, total + 1e-9, spacing)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = []
    for s in stations:
        j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        t = 0.0 if seg[j] == 0 else (s - cum[j]) / seg[j]
        out.append(path[j] + t * (path[j + 1] - path[j]))
    return np.array(out).reshape(-1, 2)


def _pose_seed(world_seed: int, pose) -> list[int]:
    return [int(world_seed), *(int(round(abs(v) * 1000)) for v in pose)]


def _static_points(world: World, pose, run: RunSpec) -> tuple[np.ndarray, float]:
    """Surface samples of ground and landmarks around ``pose``; depends only on the
    pose, so repeated visits sample the same surfaces. Returns (points, density)."""
    rng = np.random.default_rng(_pose_seed(world.spec.seed, pose))
    radius = run.scan_radius_m
    near = [lm for lm in world.landmarks if math.hypot(lm.x - pose[0], lm.y - pose[1]) <= radius + lm.radius]
    areas = np.array([math.pi * radius * radius] + [_surface_area(lm) for lm in near])
    counts = rng.multinomial(run.points_per_scan, areas / areas.sum())
    rad = radius * np.sqrt(rng.uniform(0, 1, counts[0]))
    phi = rng.uniform(0, 2 * math.pi, counts[0])
    parts = [np.column_stack([pose[0] + rad * np.cos(phi), pose[1] + rad * np.sin(phi),
                              np.full(counts[0], world.spec.ground_z)])]
    for lm, k in zip(near, counts[1:]):
        parts.append(_sample_landmark(lm, int(k), rng, world.spec.ground_z))
    pts = np.concatenate(parts)
    inside = np.hypot(pts[:, 0] - pose[0], pts[:, 1] - pose[1]) <= radius
    return pts[inside], run.points_per_scan / areas.sum()


def _clutter(pose, density: float, run: RunSpec, rng, ground_z: float) -> np.ndarray:
    n_obj = int(rng.integers(0, run.clutter_max + 1)) if run.clutter_max > 0 else 0
    parts = [np.empty((0, 3))]
    for _ in range(n_obj):
        dist = rng.uniform(4.0, 20.0)
        bearing = rng.uniform(0, 2 * math.pi)
        car = Landmark("box", pose[0] + dist * math.cos(bearing), pose[1] + dist * math.sin(bearing),
                       rng.uniform(0, math.pi), CAR_SIZE)
        parts.append(_sample_landmark(car, int(round(density * _surface_area(car))), rng, ground_z))
    return np.concatenate(parts)


def simulate_run(world: World, run: RunSpec) -> list[pipeline.RawScanCloud]:
    poses = route_poses(run.route, run.scan_spacing_m, run.start_offset_m)
    ext = world.spec.extent_m
    if len(poses) == 0 or np.any(poses < 0) or np.any(poses > ext):
        raise ValueError(f"route of {run.run_id} leaves the {ext} m world")
    scans = []
    for t, pose in enumerate(poses):
        pts, density = _static_points(world, pose, run)
        rng = np.random.default_rng([int(run.seed), t])
        pts = np.concatenate([pts, _clutter(pose, density, run, rng, world.spec.ground_z)])
        if run.dropout > 0:
            pts = pts[rng.uniform(0, 1, len(pts)) >= run.dropout]
        if run.heading_jitter_deg > 0:
            # registration error: the scan is rotated about the sensor pose
            ang = math.radians(rng.uniform(-run.heading_jitter_deg, run.heading_jitter_deg))
            c, s = math.cos(ang), math.sin(ang)
            local = pts[:, :2] - pose
            pts = np.column_stack([pose[0] + c * local[:, 0] - s * local[:, 1],
                                   pose[1] + s * local[:, 0] + c * local[:, 1], pts[:, 2]])
        if run.noise_sigma_m > 0:
            pts = pts + rng.normal(0.0, run.noise_sigma_m, pts.shape)
        scans.append(pipeline.RawScanCloud(pts, (float(pose[0]), float(pose[1])), run.run_id, t))
    return scans


# -- dataset directory ---------------------------------------------------------------


def world_to_json(world: World, runs, config: pipeline.PipelineConfig) -> str:
    doc = {
        "format": "lidarplace-world/1",
        "spec": asdict(world.spec),
        "landmarks": [asdict(lm) for lm in world.landmarks],
        "runs": [asdict(r) for r in runs],
        "pipeline": asdict(config),
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def emit_dataset(world: World, runs, config: pipeline.PipelineConfig, out_dir) -> dict[str, list[pipeline.Submap]]:
    """Simulate every run, build submaps and write the dataset directory.

    Layout: ``world.json``, ``runs/<run_id>/submap_<k>.pcf``, ``manifest.tsv``.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError("a dataset needs at least two runs (database + query)")
    out = Path(out_dir)
    result: dict[str, list[pipeline.Submap]] = {}
    rows = []
    for run in runs:
        scans = simulate_run(world, run)
        subs = pipeline.build_submaps(scans, config.interval_m, config.extent_m, config.n_points, config)
        result[run.run_id] = subs
        for sm in subs:
            store.write_pcf(out / "runs" / run.run_id / f"submap_{sm.index}.pcf", sm.cloud)
            rows.append((run.run_id, sm.index, sm.centroid_xy[0], sm.centroid_xy[1]))
    store.write_text(out / "world.json", world_to_json(world, runs, config))
    store.write_manifest(out / "manifest.tsv", rows)
    return result


def load_dataset(data_dir) -> list[pipeline.Submap]:
    """Reload the submaps of a dataset directory in manifest order."""
    root = Path(data_dir)
    doc = json.loads(store.read_text(root / "world.json"))
    extent = float(doc["pipeline"]["extent_m"])
    subs = []
    for run_id, index, x, y in store.read_manifest(root / "manifest.tsv"):
        cloud = store.read_pcf(root / "runs" / run_id / f"submap_{index}.pcf")
        subs.append(pipeline.Submap(cloud, (x, y), run_id, extent, index))
    return subs
