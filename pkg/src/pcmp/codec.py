"""Level-partitioned ``.pcmp`` bit-streams.

Every octree level is range-coded into its own segment with the coder
flushed at the boundary, so the first ``k`` segments alone rebuild the tree
down to depth ``k``.  The context of a node's byte is its parent's byte; the
root uses 0x00.

File layout, little-endian::

    "PCMP"  version:u8  max_depth:u8  reserved:u16  point_count:u64
    offset:3*f64  scale:f64
    symbol_count[max_depth]:u32  payload_length[max_depth]:u32
    payload[0] ... payload[max_depth-1]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._util import fnv1a64
from .errors import CorruptStream, DepthOutOfRange
from .octree import (
    MAX_DEPTH,
    Octree,
    build_octree,
    parent_contexts,
    popcount,
    reconstruct,
)
from .pointcloud import NormalizationTransform, PointCloud, denormalize, normalize
from .rangecoder import COUNT_LIMIT, INCREMENT, ContextModel, arith_decode, arith_encode

MAGIC = b"PCMP"
VERSION = 1
_FIXED = struct.Struct("<4sBBHQ4d")
FIXED_HEADER_SIZE = _FIXED.size
ROOT_CONTEXT = 0x00


def header_size(depth: int) -> int:
    return FIXED_HEADER_SIZE + 8 * depth


def codec_config_hash(max_depth: int) -> str:
    return fnv1a64(f"pcmp-v{VERSION};depth={max_depth};inc={INCREMENT};limit={COUNT_LIMIT}")


@dataclass(frozen=True)
class Bitstream:
    max_depth: int
    point_count: int
    transform: NormalizationTransform
    symbol_counts: tuple[int, ...]
    segments: tuple[bytes, ...]

    def __post_init__(self):
        if not 1 <= self.max_depth <= MAX_DEPTH:
            raise DepthOutOfRange(f"max_depth {self.max_depth} outside [1, {MAX_DEPTH}]")
        if len(self.symbol_counts) != self.max_depth:
            raise ValueError("one symbol count per level required")
        if len(self.segments) > self.max_depth:
            raise ValueError("more segments than levels")

    @property
    def complete(self) -> bool:
        return len(self.segments) == self.max_depth

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.segments)

    @property
    def payload_size(self) -> int:
        return sum(self.lengths)

    @property
    def header_size(self) -> int:
        return header_size(self.max_depth)

    def prefix_size(self, depth: int) -> int:
        """Payload bytes of segments 1..depth."""
        return sum(self.lengths[:depth])

    def header_bytes(self, lengths=None) -> bytes:
        lengths = self.lengths if lengths is None else lengths
        fixed = _FIXED.pack(
            MAGIC, VERSION, self.max_depth, 0, self.point_count, *self.transform.offset, self.transform.scale
        )
        n = self.max_depth
        return fixed + struct.pack(f"<{n}I", *self.symbol_counts) + struct.pack(f"<{n}I", *lengths)

    def to_bytes(self) -> bytes:
        if not self.complete:
            raise ValueError("cannot serialize a stream with missing segments; truncate it first")
        return self.header_bytes() + b"".join(self.segments)

    @classmethod
    def from_bytes(cls, data: bytes, *, partial: bool = False) -> "Bitstream":
        """Parse a stream.  With ``partial`` a file cut at a segment boundary
        keeps the segments that are fully present."""
        data = bytes(data)
        if len(data) < FIXED_HEADER_SIZE:
            raise CorruptStream("file shorter than the fixed header")
        magic, version, depth, _, point_count, ox, oy, oz, scale = _FIXED.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStream(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStream(f"unsupported version {version}")
        if not 1 <= depth <= MAX_DEPTH:
            raise CorruptStream(f"max_depth {depth} out of range")
        if not (scale > 0 and np.isfinite([ox, oy, oz, scale]).all()):
            raise CorruptStream("invalid normalization transform")
        hsize = header_size(depth)
        if len(data) < hsize:
            raise CorruptStream("truncated header")
        counts = struct.unpack_from(f"<{depth}I", data, FIXED_HEADER_SIZE)
        lengths = struct.unpack_from(f"<{depth}I", data, FIXED_HEADER_SIZE + 4 * depth)
        segments = []
        pos = hsize
        for n in lengths:
            if pos + n > len(data):
                if partial:
                    break
                raise CorruptStream(f"payload truncated: need {pos + n} bytes, have {len(data)}")
            segments.append(data[pos : pos + n])
            pos += n
        if pos != len(data) and len(segments) == depth:
            raise CorruptStream(f"{len(data) - pos} trailing bytes after the last segment")
        return cls(depth, point_count, NormalizationTransform((ox, oy, oz), scale), counts, tuple(segments))


@dataclass
class DecodeStats:
    """Instrumentation filled in by :func:`decode_cloud`."""

    bytes_consumed: int = 0
    segments_read: list[int] = field(default_factory=list)


def encode_octree(tree: Octree, transform: NormalizationTransform | None = None) -> Bitstream:
    segments = []
    for level, symbols in enumerate(tree.levels):
        ctx = parent_contexts(tree.levels, level)
        segments.append(arith_encode(symbols, ctx, ContextModel(256)))
    return Bitstream(
        tree.max_depth,
        tree.point_count,
        transform or NormalizationTransform(),
        tuple(len(lv) for lv in tree.levels),
        tuple(segments),
    )


def encode_cloud(cloud: PointCloud, max_depth: int, transform: NormalizationTransform | None = None) -> Bitstream:
    """Code levels 1..max_depth; clouds not yet normalized are normalized here
    and the transform is stored in the header.

    An explicit ``transform`` (e.g. the frame of a previously decoded stream)
    is used as-is; it must map every point into [0, 1)^3.
    """
    if transform is not None:
        cloud = PointCloud(transform.apply(cloud.points), normalized=True)
    elif cloud.normalized:
        transform = NormalizationTransform()
    else:
        cloud, transform = normalize(cloud)
    return encode_octree(build_octree(cloud, max_depth), transform)


def decode_octree(stream: Bitstream, depth: int, stats: DecodeStats | None = None) -> Octree:
    if not 1 <= depth <= stream.max_depth:
        raise DepthOutOfRange(f"depth {depth} outside [1, {stream.max_depth}]")
    if depth > len(stream.segments):
        raise CorruptStream(f"segments for levels {len(stream.segments) + 1}..{depth} are missing")
    levels: list[np.ndarray] = []
    for level in range(depth):
        expected = 1 if level == 0 else popcount(levels[-1])
        if stream.symbol_counts[level] != expected:
            raise CorruptStream(f"level {level + 1}: header says {stream.symbol_counts[level]} nodes, tree has {expected}")
        seg = stream.segments[level]
        used: list[int] = []
        symbols = arith_decode(seg, parent_contexts(levels, level), expected, ContextModel(256), consumed=used)
        if used[0] != len(seg):
            raise CorruptStream(f"level {level + 1}: decoder used {used[0]} of {len(seg)} bytes")
        if np.any(symbols == 0):
            raise CorruptStream(f"level {level + 1}: decoded an empty node")
        if stats is not None:
            stats.bytes_consumed += used[0]
            stats.segments_read.append(level + 1)
        levels.append(symbols)
    return Octree(tuple(levels), stream.point_count)


def decode_cloud(
    stream: Bitstream, depth: int | None = None, stats: DecodeStats | None = None
) -> tuple[Octree, PointCloud]:
    """Rebuild the octree to ``depth`` from segments 1..depth only and return
    it with its cell-center cloud mapped back through the header transform."""
    depth = stream.max_depth if depth is None else depth
    tree = decode_octree(stream, depth, stats)
    cloud = reconstruct(tree, depth)
    if not stream.transform.is_identity:
        cloud = denormalize(cloud, stream.transform)
    return tree, cloud


def truncate_stream(stream: Bitstream, depth: int) -> Bitstream:
    if not 1 <= depth <= stream.max_depth:
        raise DepthOutOfRange(f"depth {depth} outside [1, {stream.max_depth}]")
    if depth > len(stream.segments):
        raise CorruptStream(f"cannot truncate to {depth}: only {len(stream.segments)} segments present")
    return Bitstream(
        depth, stream.point_count, stream.transform, stream.symbol_counts[:depth], stream.segments[:depth]
    )


def bpp(stream: Bitstream, point_count: int | None = None, *, include_header: bool = False) -> float:
    """Bits per point of the stream's payload (optionally plus its header)."""
    n = stream.point_count if point_count is None else point_count
    if n <= 0:
        raise ValueError("point_count must be positive")
    size = stream.payload_size + (stream.header_size if include_header else 0)
    return 8.0 * size / n


def level_bpp(stream: Bitstream) -> list[float]:
    """Cumulative payload bpp for each prefix depth 1..n."""
    sizes = np.cumsum(stream.lengths)
    return [8.0 * int(s) / stream.point_count for s in sizes]


def header_fields(stream: Bitstream) -> dict:
    return {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "max_depth": stream.max_depth,
        "point_count": stream.point_count,
        "offset": list(stream.transform.offset),
        "scale": stream.transform.scale,
        "symbol_counts": list(stream.symbol_counts),
        "payload_lengths": list(stream.lengths),
        "header_size": stream.header_size,
        "payload_size": stream.payload_size,
    }
