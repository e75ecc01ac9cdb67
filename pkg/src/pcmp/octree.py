"""Level-ordered occupancy-byte octrees.

Octant index of a point at a level is ``(x_bit << 2) | (y_bit << 1) | z_bit``
and bit ``k`` of a node's occupancy byte is set iff octant ``k`` is
non-empty.  Nodes of a level are stored in breadth-first order, which for
this bit layout coincides with Morton order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthOutOfRange, NotNormalized
from .pointcloud import PointCloud

MAX_DEPTH = 16


@dataclass(frozen=True, eq=False)
class Octree:
    """``levels[i]`` holds the occupancy bytes of the nodes at depth ``i``."""

    levels: tuple[np.ndarray, ...]
    point_count: int

    def __post_init__(self):
        levels = tuple(np.ascontiguousarray(lv, dtype=np.uint8) for lv in self.levels)
        for lv in levels:
            lv.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def max_depth(self) -> int:
        return len(self.levels)

    def validate(self) -> None:
        if not self.levels or len(self.levels[0]) != 1:
            raise ValueError("root level must hold exactly one byte")
        for i, lv in enumerate(self.levels):
            if np.any(lv == 0):
                raise ValueError(f"zero occupancy byte at level {i}")
            if i + 1 < len(self.levels) and len(self.levels[i + 1]) != popcount(lv):
                raise ValueError(f"level {i + 1} size does not match level {i} popcount")

    def node_count(self, depth: int) -> int:
        """Number of occupied nodes at ``depth`` (1 at depth 0)."""
        if depth == 0:
            return 1
        return popcount(self.levels[depth - 1])

    def __eq__(self, other):
        if not isinstance(other, Octree):
            return NotImplemented
        return (
            self.point_count == other.point_count
            and len(self.levels) == len(other.levels)
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
        )

    __hash__ = None


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def popcount(data: np.ndarray) -> int:
    return int(_POPCOUNT[np.asarray(data, dtype=np.uint8)].sum())


def _check_depth(depth: int, limit: int = MAX_DEPTH) -> None:
    if not 1 <= depth <= limit:
        raise DepthOutOfRange(f"depth {depth} outside [1, {limit}]")


def morton_encode(q: np.ndarray, depth: int) -> np.ndarray:
    """Interleave integer voxel coordinates, x most significant per level."""
    q = np.asarray(q, dtype=np.uint64)
    code = np.zeros(len(q), dtype=np.uint64)
    for bit in range(depth - 1, -1, -1):
        b = np.uint64(bit)
        code = (code << np.uint64(3)) | (
            (((q[:, 0] >> b) & np.uint64(1)) << np.uint64(2))
            | (((q[:, 1] >> b) & np.uint64(1)) << np.uint64(1))
            | ((q[:, 2] >> b) & np.uint64(1))
        )
    return code


def morton_decode(code: np.ndarray, depth: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.uint64)
    q = np.zeros((len(code), 3), dtype=np.uint64)
    for bit in range(depth):
        shift = np.uint64(3 * bit)
        b = np.uint64(bit)
        q[:, 0] |= ((code >> (shift + np.uint64(2))) & np.uint64(1)) << b
        q[:, 1] |= ((code >> (shift + np.uint64(1))) & np.uint64(1)) << b
        q[:, 2] |= ((code >> shift) & np.uint64(1)) << b
    return q.astype(np.int64)


def quantize(points: np.ndarray, depth: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size and (pts.min() < 0.0 or pts.max() >= 1.0):
        raise NotNormalized("coordinates must lie in [0, 1) before octree construction")
    return np.floor(pts * float(1 << depth)).astype(np.int64)


def build_octree(cloud: PointCloud, max_depth: int) -> Octree:
    _check_depth(max_depth)
    if len(cloud) == 0:
        raise ValueError("cannot build an octree from an empty cloud")
    codes = np.unique(morton_encode(quantize(cloud.points, max_depth), max_depth))
    levels = []
    for depth in range(1, max_depth + 1):
        child = codes >> np.uint64(3 * (max_depth - depth))
        child = child[np.concatenate(([True], child[1:] != child[:-1]))]
        parent = child >> np.uint64(3)
        bits = (np.uint64(1) << (child & np.uint64(7))).astype(np.uint8)
        starts = np.flatnonzero(np.concatenate(([True], parent[1:] != parent[:-1])))
        levels.append(np.bitwise_or.reduceat(bits, starts))
    return Octree(tuple(levels), len(cloud))


def node_codes(tree: Octree, depth: int) -> np.ndarray:
    """Morton codes of the occupied nodes at ``depth``, breadth-first."""
    codes = np.zeros(1, dtype=np.uint64)
    for lv in tree.levels[:depth]:
        bits = np.unpackbits(lv[:, None], axis=1, bitorder="little")
        parent_idx, octant = np.nonzero(bits)
        codes = (codes[parent_idx] << np.uint64(3)) | octant.astype(np.uint64)
    return codes


def reconstruct(tree: Octree, depth: int | None = None) -> PointCloud:
    """One point per occupied node at ``depth``, placed at its cell center."""
    depth = tree.max_depth if depth is None else depth
    _check_depth(depth, tree.max_depth)
    q = morton_decode(node_codes(tree, depth), depth)
    return PointCloud((q + 0.5) / float(1 << depth), normalized=True)


def truncate(tree: Octree, depth: int) -> Octree:
    _check_depth(depth, tree.max_depth)
    return Octree(tree.levels[:depth], tree.point_count)


def parent_contexts(tree_levels, level: int) -> np.ndarray:
    """Parent occupancy byte of every node whose byte sits at ``level``.

    The root (level 0) has the sentinel parent byte 0x00.
    """
    if level == 0:
        return np.zeros(1, dtype=np.uint8)
    parent = np.asarray(tree_levels[level - 1], dtype=np.uint8)
    return np.repeat(parent, _POPCOUNT[parent])
