"""Depth-partitioned octree point-cloud codec with a learned per-cloud depth selector."""

__version__ = "0.1.0"

from .codec import Bitstream, bpp, decode_cloud, encode_cloud, truncate_stream
from .errors import (
    CacheCorrupt,
    ConfigError,
    CorruptStream,
    DataError,
    DepthOutOfRange,
    DomainError,
    EmptyCloud,
    InvalidDataset,
    NotNormalized,
    ParseError,
    PcmpError,
    TableMismatch,
)
from .metrics import d1_psnr
from .octree import Octree, build_octree, reconstruct
from .pointcloud import (
    LabeledCloud,
    NormalizationTransform,
    PointCloud,
    generate_shape,
    load_cloud,
    make_dataset,
    normalize,
)

__all__ = [
    "Bitstream",
    "CacheCorrupt",
    "ConfigError",
    "CorruptStream",
    "DataError",
    "DepthOutOfRange",
    "DomainError",
    "EmptyCloud",
    "InvalidDataset",
    "LabeledCloud",
    "NormalizationTransform",
    "NotNormalized",
    "Octree",
    "ParseError",
    "PcmpError",
    "PointCloud",
    "TableMismatch",
    "bpp",
    "build_octree",
    "d1_psnr",
    "decode_cloud",
    "encode_cloud",
    "generate_shape",
    "load_cloud",
    "make_dataset",
    "normalize",
    "reconstruct",
    "truncate_stream",
]
