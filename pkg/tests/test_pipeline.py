import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarplace import pipeline
from lidarplace.pipeline import (
    PairLabel,
    RawScanCloud,
    Submap,
    build_submaps,
    denormalize_cloud,
    downsample_to_fixed,
    find_voxel_size,
    label_distance,
    label_pair,
    normalize_cloud,
    points_along,
    remove_ground,
    split_regions,
)


def _plane_and_box(rng, n_ground=2000, n_box=400):
    ground = np.column_stack([rng.uniform(-20, 20, n_ground), rng.uniform(-20, 20, n_ground),
                              rng.normal(0, 0.02, n_ground)])
    box = np.column_stack([rng.uniform(2, 6, n_box), rng.uniform(-3, 1, n_box), rng.uniform(1.0, 5.0, n_box)])
    return ground, box


def test_ground_removed_box_kept():
    rng = np.random.default_rng(0)
    ground, box = _plane_and_box(rng)
    scan = RawScanCloud(np.concatenate([ground, box]), (0, 0), "r", 0)
    out = remove_ground(scan).points
    # membership is known by construction: every box point survives, no ground point does
    assert len(out) == len(box)
    assert {tuple(p) for p in out} == {tuple(p) for p in box}


def test_tilted_ground_within_limit_removed():
    rng = np.random.default_rng(1)
    xy = rng.uniform(-20, 20, (2000, 2))
    z = math.tan(math.radians(8)) * xy[:, 0]
    scan = RawScanCloud(np.column_stack([xy, z]), (0, 0), "r", 0)
    assert len(remove_ground(scan).points) == 0


def test_no_horizontal_plane_leaves_cloud_unchanged():
    rng = np.random.default_rng(2)
    wall = np.column_stack([rng.uniform(-10, 10, 500), np.zeros(500), rng.uniform(0, 10, 500)])
    scan = RawScanCloud(wall, (0, 0), "r", 0)
    np.testing.assert_array_equal(remove_ground(scan).points, wall)


def test_ground_removal_needs_fifty_points():
    with pytest.raises(ValueError, match="50"):
        remove_ground(RawScanCloud(np.zeros((49, 3)), (0, 0), "r", 0))


def test_ground_removal_seeded():
    rng = np.random.default_rng(3)
    ground, box = _plane_and_box(rng)
    scan = RawScanCloud(np.concatenate([ground, box]), (0, 0), "r", 0)
    assert remove_ground(scan, seed=4).points.tobytes() == remove_ground(scan, seed=4).points.tobytes()


def test_downsample_identity_when_already_spread():
    # a grid with one point per unit voxel: the found voxel size keeps every point apart
    g = np.arange(4, dtype=np.float64)
    pts = np.array([(x, y, z) for x in g for y in g for z in g]) + 0.5
    out = downsample_to_fixed(pts, len(pts), seed=0)
    assert {tuple(p) for p in out} == {tuple(p) for p in pts}


def test_downsample_oversampled_cube():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-3, 3, (5120, 3))
    out = downsample_to_fixed(pts, 512, seed=1)
    assert out.shape == (512, 3)
    assert (out >= pts.min(axis=0)).all() and (out <= pts.max(axis=0)).all()


def test_downsample_pads_by_duplication():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(100, 3))
    out = downsample_to_fixed(pts, 256, seed=2)
    assert out.shape == (256, 3)
    src = {tuple(p) for p in pts}
    assert all(tuple(p) in src for p in out)


def test_downsample_rejects_empty_and_sparse():
    with pytest.raises(ValueError, match="empty"):
        downsample_to_fixed(np.empty((0, 3)), 16)
    with pytest.raises(ValueError):
        downsample_to_fixed(np.zeros((3, 3)), 16)


def test_voxel_size_reaches_target_count():
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 10, (3000, 3))
    size = find_voxel_size(pts, 256)
    cents = pipeline.voxel_centroids(pts, size)
    assert len(cents) >= 256


def test_normalize_symmetric_pair():
    cloud, centroid, scale = normalize_cloud([[2, 2, 2], [4, 4, 4]])
    np.testing.assert_array_equal(cloud, [[-1, -1, -1], [1, 1, 1]])
    np.testing.assert_array_equal(centroid, [3, 3, 3])
    assert scale == 1.0


def test_normalize_single_point():
    cloud, centroid, scale = normalize_cloud([[5.0, -1.0, 2.0]])
    np.testing.assert_array_equal(cloud, [[0, 0, 0]])
    assert scale == 1.0


def test_straight_trajectory_submap_centres():
    path = np.column_stack([np.linspace(0, 100, 51), np.zeros(51)])
    pts = points_along(path, 10.0)
    assert len(pts) in (10, 11)
    np.testing.assert_allclose(np.diff(pts[:, 0]), 10.0, atol=1e-6)


def test_interval_longer_than_trajectory():
    path = np.array([[0.0, 0.0], [5.0, 0.0]])
    assert len(points_along(path, 10.0)) == 1


def _straight_run(rng, length=60.0, step=2.0):
    scans = []
    for t, x in enumerate(np.arange(0, length + 1e-9, step)):
        ground, box = _plane_and_box(rng, 600, 150)
        ground[:, :2] += (x, 0)
        box[:, :2] += (x, 0)
        scans.append(RawScanCloud(np.concatenate([ground, box]), (x, 0.0), "r0", t))
    return scans


def test_build_submaps_contract():
    rng = np.random.default_rng(8)
    subs = build_submaps(_straight_run(rng), interval=10.0, extent=25.0, target=128)
    assert len(subs) == 7
    for s in subs:
        assert s.cloud.shape == (128, 3)
        assert np.abs(s.cloud.mean(axis=0)).max() < 1e-9
        assert np.abs(s.cloud).max() <= 1.0
        assert s.extent == 25.0
    np.testing.assert_allclose(np.diff([s.centroid_xy[0] for s in subs]), 10.0, atol=1e-6)


def test_build_submaps_logs_empty_crops():
    scans = [RawScanCloud(np.array([[0.0, 0.0, 1.0]] * 60), (0.0, 0.0), "r", 0),
             RawScanCloud(np.array([[100.0, 0.0, 1.0]]), (100.0, 0.0), "r", 1)]
    log = pipeline.BuildLog()
    subs = build_submaps(scans, interval=50.0, extent=10.0, target=32, build_log=log)
    # stations at 0, 50 and 100 m; the last two crops hold 0 and 1 points
    assert [k for k, _ in log.skipped] == [1, 2]
    assert [s.index for s in subs] == [0]


@pytest.mark.parametrize("dist, label", [(8.0, PairLabel.POSITIVE), (10.0, PairLabel.POSITIVE),
                                         (60.0, PairLabel.NEGATIVE), (50.0, PairLabel.NEGATIVE),
                                         (30.0, PairLabel.INDETERMINATE), (10.01, PairLabel.INDETERMINATE)])
def test_label_thresholds(dist, label):
    a = Submap(np.zeros((1, 3)), (0.0, 0.0), "a", 25.0)
    b = Submap(np.zeros((1, 3)), (dist * 0.6, dist * 0.8), "b", 25.0)
    assert label_pair(a, b) == label
    assert label_pair(b, a) == label


def test_label_thresholds_configurable():
    assert label_distance(15.0, positive_m=20.0) == PairLabel.POSITIVE
    assert label_distance(35.0, negative_m=30.0) == PairLabel.NEGATIVE


def _grid_submaps(n_side=12, spacing=40.0):
    return [Submap(np.zeros((1, 3)), (i * spacing, j * spacing), "r", 25.0, i * n_side + j)
            for i in range(n_side) for j in range(n_side)]


def test_split_share_and_disjointness():
    subs = _grid_submaps()
    train, test = split_regions(subs, 0.3, 150.0, seed=3)
    assert 0.25 <= len(test) / len(subs) <= 0.35
    assert not {s.id for s in train} & {s.id for s in test}
    assert len(train) + len(test) == len(subs)
    tile = lambda s: (int(s.centroid_xy[0] // 150), int(s.centroid_xy[1] // 150))
    assert not {tile(s) for s in train} & {tile(s) for s in test}


def test_split_deterministic():
    subs = _grid_submaps()
    a = split_regions(subs, seed=5)
    b = split_regions(subs, seed=5)
    assert [s.id for s in a[1]] == [s.id for s in b[1]]


def test_split_rejects_impossible_fraction():
    with pytest.raises(ValueError):
        split_regions(_grid_submaps(), test_fraction=1.2)
    two_tiles = [Submap(np.zeros((1, 3)), (x, 0.0), "r", 25.0, i) for i, x in enumerate([0.0, 200.0] * 5)]
    with pytest.raises(ValueError):
        split_regions(two_tiles, 0.3, 150.0)


# -- properties ------------------------------------------------------------------

clouds = st.integers(0, 2**32 - 1).flatmap(
    lambda s: st.integers(1, 400).map(lambda n: np.random.default_rng(s).normal(size=(n, 3)) * 50 + 7)
)


@settings(max_examples=100, deadline=None)
@given(clouds)
def test_normalize_contract_and_round_trip(pts):
    cloud, centroid, scale = normalize_cloud(pts)
    assert np.abs(cloud.mean(axis=0)).max() < 1e-9
    assert np.abs(cloud).max() <= 1.0
    assert np.abs(denormalize_cloud(cloud, centroid, scale) - pts).max() < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(64, 1500), st.sampled_from([32, 64, 128]))
def test_downsample_exact_count(seed, n, target):
    pts = np.random.default_rng(seed).uniform(-5, 5, (n, 3))
    out = downsample_to_fixed(pts, target, seed=seed % 97)
    assert out.shape == (target, 3)
    assert np.isfinite(out).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ground_removal_bounded_by_inliers(seed):
    rng = np.random.default_rng(seed)
    ground, box = _plane_and_box(rng, 300, int(rng.integers(20, 300)))
    pts = np.concatenate([ground, box])
    fit = pipeline.fit_ground_plane(pts, seed=seed)
    out = remove_ground(RawScanCloud(pts, (0, 0), "r", 0), seed=seed).points
    removed = len(pts) - len(out)
    assert fit is not None and removed <= int(fit[2].sum())
