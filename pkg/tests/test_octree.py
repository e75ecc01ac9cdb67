import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import cell_centers_brute, octree_levels_brute

from pcmp.errors import DepthOutOfRange, NotNormalized
from pcmp.octree import (
    Octree,
    build_octree,
    morton_decode,
    morton_encode,
    node_codes,
    parent_contexts,
    popcount,
    quantize,
    reconstruct,
    truncate,
)
from pcmp.pointcloud import PointCloud

unit_points = arrays(
    np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=st.floats(0.0, 1.0, exclude_max=True, allow_nan=False)
)


def cloud(pts):
    return PointCloud(pts, normalized=True)


def test_single_point_one_level():
    t = build_octree(cloud([[0.75, 0.25, 0.75]]), 1)
    # x high, y low, z high -> octant 0b101
    assert t.levels[0].tolist() == [1 << 5]


def test_two_opposite_corners():
    t = build_octree(cloud([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]), 2)
    assert t.levels[0].tolist() == [0b10000001]
    assert t.levels[1].tolist() == [1, 1 << 7]


@given(unit_points, st.integers(1, 6))
def test_matches_brute_force_subdivision(pts, depth):
    t = build_octree(cloud(pts), depth)
    assert [lv.tolist() for lv in t.levels] == octree_levels_brute(pts.tolist(), depth)
    t.validate()


@given(unit_points, st.integers(1, 6))
def test_reconstruct_is_cell_centers(pts, depth):
    rec = reconstruct(build_octree(cloud(pts), depth))
    assert sorted(map(tuple, rec.points.tolist())) == cell_centers_brute(pts.tolist(), depth)
    assert rec.normalized


@given(unit_points, st.integers(2, 6))
def test_truncation_equals_shallower_build(pts, depth):
    t = build_octree(cloud(pts), depth)
    for k in range(1, depth + 1):
        assert truncate(t, k) == build_octree(cloud(pts), k)


@given(unit_points, st.integers(1, 6))
def test_node_counts_follow_popcounts(pts, depth):
    t = build_octree(cloud(pts), depth)
    for i in range(1, depth):
        assert len(t.levels[i]) == popcount(t.levels[i - 1])
    assert popcount(t.levels[-1]) == len(np.unique(quantize(pts, depth), axis=0))


def test_permutation_and_duplicates_do_not_matter():
    pts = np.random.default_rng(0).random((100, 3))
    a = build_octree(cloud(pts), 5)
    assert a == build_octree(cloud(pts[::-1]), 5)
    doubled = build_octree(cloud(np.vstack([pts, pts])), 5)
    assert doubled.point_count == 200
    assert all(np.array_equal(x, y) for x, y in zip(a.levels, doubled.levels))


def test_morton_round_trip():
    q = np.random.default_rng(1).integers(0, 1 << 10, size=(200, 3))
    assert np.array_equal(morton_decode(morton_encode(q, 10), 10), q)


def test_node_codes_sorted_breadth_first():
    pts = np.random.default_rng(2).random((300, 3))
    codes = node_codes(build_octree(cloud(pts), 4), 4)
    assert np.all(np.diff(codes.astype(np.int64)) > 0)


def test_parent_contexts():
    t = build_octree(cloud([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]), 2)
    assert parent_contexts(t.levels, 0).tolist() == [0]
    assert parent_contexts(t.levels, 1).tolist() == [0b10000001, 0b10000001]


def test_rejects_unnormalized_and_bad_depth():
    with pytest.raises(NotNormalized):
        build_octree(PointCloud([[0.5, 0.5, 1.0]]), 3)
    with pytest.raises(NotNormalized):
        build_octree(PointCloud([[-0.1, 0.5, 0.5]]), 3)
    with pytest.raises(DepthOutOfRange):
        build_octree(cloud([[0.5, 0.5, 0.5]]), 0)
    with pytest.raises(DepthOutOfRange):
        build_octree(cloud([[0.5, 0.5, 0.5]]), 17)


def test_invalid_tree_rejected():
    with pytest.raises(ValueError):
        Octree((np.array([3], np.uint8), np.array([1], np.uint8)), 1).validate()
