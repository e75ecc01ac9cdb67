"""Point-cloud data model, XYZ/PLY ingestion, unit-cube normalization and
synthetic labeled shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyCloud, ParseError

NORMALIZE_EPS = 1e-6

SHAPE_KINDS = (
    "sphere-surface",
    "cube-surface",
    "plane",
    "torus",
    "two-spheres",
    "gaussian-blob",
)


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates to the unit cube: ``(p - offset) * scale``."""

    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.offset)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.offset)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.offset == (0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normalized: bool = False
    bbox: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if len(pts):
            lo, hi = pts.min(axis=0), pts.max(axis=0)
        else:
            lo = hi = np.zeros(3)
        object.__setattr__(self, "bbox", (lo, hi))

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.normalized == other.normalized and np.array_equal(self.points, other.points)

    __hash__ = None

    @property
    def max_edge(self) -> float:
        lo, hi = self.bbox
        return float(np.max(hi - lo)) if len(self) else 0.0


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    cloud: PointCloud
    label: int
    shape_params: dict = field(default_factory=dict)
    part_labels: np.ndarray | None = None


# --------------------------------------------------------------------------
# file formats


def _parse_floats(tokens: Sequence[str], lineno: int, path) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-numeric token in {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(f"{path}:{lineno}: non-finite coordinate")
    return vals


def _load_xyz(lines: list[str], path) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 values, got {len(tokens)}")
        rows.append(_parse_floats(tokens, lineno, path))
    return rows


def _load_ply(lines: list[str], path) -> list[list[float]]:
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body_start = None
    for lineno, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if tokens[1:2] != ["ascii"]:
                raise ParseError(f"{path}:{lineno}: only ascii PLY is supported")
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}:{lineno}: malformed element line")
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad vertex count") from None
            elif n_vertex is None:
                raise ParseError(f"{path}:{lineno}: vertex element must come first")
        elif key == "property":
            if in_vertex:
                if tokens[1] == "list":
                    raise ParseError(f"{path}:{lineno}: list properties on vertices unsupported")
                props.append(tokens[-1])
        elif key == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(f"{path}:{lineno}: unexpected header line {line.strip()!r}")
    if body_start is None:
        raise ParseError(f"{path}: header has no end_header")
    if n_vertex is None:
        raise ParseError(f"{path}: header declares no vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError(f"{path}: vertex properties must start with x y z, got {props}")
    body = [ln for ln in lines[body_start:] if ln.strip()]
    if len(body) < n_vertex:
        raise ParseError(f"{path}: header declares {n_vertex} vertices, found {len(body)}")
    rows = []
    for i, line in enumerate(body[:n_vertex]):
        tokens = line.split()
        if len(tokens) != len(props):
            raise ParseError(f"{path}:{body_start + i + 1}: expected {len(props)} values")
        rows.append(_parse_floats(tokens[:3], body_start + i + 1, path))
    return rows


def _guess_format(path) -> str:
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read an ASCII ``xyz`` or ``ply`` file; points keep file order."""
    fmt = format or _guess_format(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not an ASCII file ({exc})") from None
    lines = text.splitlines()
    if fmt == "xyz":
        rows = _load_xyz(lines, path)
    elif fmt in ("ply", "ply-ascii"):
        rows = _load_ply(lines, path)
    else:
        raise ConfigError(f"unknown cloud format {fmt!r}")
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    return PointCloud(np.array(rows, dtype=np.float64))


def format_cloud(cloud: PointCloud, format: str = "xyz", comments: Sequence[str] = ()) -> str:
    body = "\n".join(" ".join(repr(float(v)) for v in p) for p in cloud.points)
    if format == "xyz":
        return body + "\n" if body else ""
    if format in ("ply", "ply-ascii"):
        header = (
            "ply\nformat ascii 1.0\n"
            + "".join(f"comment {c}\n" for c in comments)
            + f"element vertex {len(cloud)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        return header + (body + "\n" if body else "")
    raise ConfigError(f"unknown cloud format {format!r}")


def write_cloud(cloud: PointCloud, path, format: str | None = None, comments: Sequence[str] = ()) -> None:
    """``comments`` only survive in PLY output."""
    from ._util import atomic_write

    atomic_write(path, format_cloud(cloud, format or _guess_format(path), comments).encode("ascii"))


def ply_comments(path) -> list[str]:
    """Header comment lines of a PLY file (empty for anything else)."""
    out = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        if fh.readline().strip() != "ply":
            return out
        for line in fh:
            if line.startswith("comment "):
                out.append(line[len("comment ") :].rstrip("\n"))
            elif line.strip() == "end_header":
                break
    return out


# --------------------------------------------------------------------------
# normalization


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Translate by the bbox minimum and scale isotropically into [0, 1)^3.

    A cloud whose points all coincide is mapped to (0.5, 0.5, 0.5) with scale 1.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    lo, _ = cloud.bbox
    edge = cloud.max_edge
    if edge == 0.0:
        tf = NormalizationTransform(tuple(float(v) - 0.5 for v in lo), 1.0)
    else:
        tf = NormalizationTransform(tuple(float(v) for v in lo), 1.0 / (edge * (1.0 + NORMALIZE_EPS)))
    pts = tf.apply(cloud.points)
    # rounding can land a max coordinate on exactly 1.0
    np.clip(pts, 0.0, np.nextafter(1.0, 0.0), out=pts)
    return PointCloud(pts, normalized=True), tf


def denormalize(cloud: PointCloud, transform: NormalizationTransform) -> PointCloud:
    return PointCloud(transform.invert(cloud.points), normalized=False)


# --------------------------------------------------------------------------
# synthetic shapes


def _yaw(rng) -> np.ndarray:
    a = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _unit_sphere(rng, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    radius = 1.0
    pts = radius * _unit_sphere(rng, n)
    return pts, np.zeros(n, dtype=np.int64), {"center": [0.0, 0.0, 0.0], "radius": radius}


def _cube(rng, n):
    half = 1.0
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, -half, half)
    pts = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        m = axis == a
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    # points near an edge: two coordinates close to the boundary
    near = (np.abs(pts) > 0.8 * half).sum(axis=1) >= 2
    return pts, near.astype(np.int64), {"half_edge": half}


def _plane(rng, n):
    aspect = rng.uniform(0.5, 1.0)
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-aspect, aspect, size=n)
    pts = np.stack([u, v, np.zeros(n)], axis=1)
    border = (np.abs(u) > 0.8) | (np.abs(v) > 0.8 * aspect)
    return pts, border.astype(np.int64), {"aspect": aspect}


def _torus(rng, n):
    major, minor = 1.0, rng.uniform(0.25, 0.45)
    out = np.empty((0, 2))
    # rejection sampling in (u, v) for uniform surface density
    while len(out) < n:
        u = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        w = rng.uniform(0.0, major + minor, size=2 * n)
        keep = w <= major + minor * np.cos(v)
        out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
    u, v = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
    return pts, (np.cos(v) < 0).astype(np.int64), {"major": major, "minor": minor}


def _two_spheres(rng, n):
    r1, r2 = 0.6, rng.uniform(0.3, 0.45)
    gap = rng.uniform(0.05, 0.3)
    c1 = np.array([-r1 - gap / 2, 0.0, 0.0])
    c2 = np.array([r2 + gap / 2, 0.0, 0.0])
    second = rng.uniform(size=n) < r2**2 / (r1**2 + r2**2)
    pts = _unit_sphere(rng, n)
    pts = np.where(second[:, None], c2 + r2 * pts, c1 + r1 * pts)
    return pts, second.astype(np.int64), {"radii": [r1, r2], "centers": [c1.tolist(), c2.tolist()]}


def _blob(rng, n):
    sigma = np.array([1.0, rng.uniform(0.4, 0.8), rng.uniform(0.2, 0.5)])
    z = rng.normal(size=(n, 3))
    pts = z * sigma
    return pts, (np.linalg.norm(z, axis=1) > 1.5).astype(np.int64), {"sigma": sigma.tolist()}


_GENERATORS = {
    "sphere-surface": _sphere,
    "cube-surface": _cube,
    "plane": _plane,
    "torus": _torus,
    "two-spheres": _two_spheres,
    "gaussian-blob": _blob,
}


def generate_shape(kind: str, n: int, seed: int, noise_sigma: float = 0.0) -> LabeledCloud:
    """Sample ``n`` points from a synthetic shape, yawed by a random angle.

    ``part_labels`` marks per-point structure (edges, borders, inner rings,
    the smaller sphere, blob tails) for the segmentation toy task.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPE_KINDS)}")
    if n < 8:
        raise ConfigError(f"need at least 8 points, got {n}")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    pts, parts, params = _GENERATORS[kind](rng, n)
    pts = pts @ _yaw(rng).T
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    params = {"kind": kind, "seed": seed, "noise_sigma": noise_sigma, **params}
    return LabeledCloud(PointCloud(pts), SHAPE_KINDS.index(kind), params, parts)


def make_dataset(
    per_class: int,
    n_points: int = 128,
    seed: int = 0,
    noise_sigma: float = 0.01,
    kinds: Sequence[str] = SHAPE_KINDS,
) -> list[LabeledCloud]:
    """Balanced dataset of normalized clouds, interleaved by class."""
    out = []
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.generate_state(per_class * len(kinds), dtype=np.uint32)
    for i in range(per_class):
        for j, kind in enumerate(kinds):
            s = int(child_seeds[i * len(kinds) + j])
            item = generate_shape(kind, n_points, s, noise_sigma)
            cloud, _ = normalize(item.cloud)
            out.append(LabeledCloud(cloud, SHAPE_KINDS.index(kind), item.shape_params, item.part_labels))
    return out


def dataset_from_dir(directory) -> list[LabeledCloud]:
    """Load a directory written by :func:`save_dataset`."""
    import json

    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    out = []
    for entry in index["samples"]:
        cloud = load_cloud(directory / entry["file"])
        parts = entry.get("parts")
        out.append(
            LabeledCloud(
                PointCloud(cloud.points, normalized=entry.get("normalized", False)),
                int(entry["label"]),
                entry.get("shape_params", {}),
                None if parts is None else np.asarray(parts, dtype=np.int64),
            )
        )
    return out


def save_dataset(dataset: Sequence[LabeledCloud], directory) -> None:
    import json

    from ._util import atomic_write

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, item in enumerate(dataset):
        name = f"{i:05d}.xyz"
        write_cloud(item.cloud, directory / name, "xyz")
        samples.append(
            {
                "file": name,
                "label": item.label,
                "normalized": item.cloud.normalized,
                "shape_params": item.shape_params,
                "parts": None if item.part_labels is None else item.part_labels.tolist(),
            }
        )
    doc = {"classes": list(SHAPE_KINDS), "samples": samples}
    atomic_write(directory / "index.json", json.dumps(doc, indent=1).encode())
