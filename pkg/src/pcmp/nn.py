"""Minimal numpy PointNet with hand-written backprop and Adam.

A shared per-point MLP (affine + ReLU per layer) is max-pooled into a global
feature, then a small fully connected head produces logits.  Batches are a
single ``(sum P_b, 3)`` array plus per-sample start offsets so clouds of
different sizes can share one matmul.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from ._util import fnv1a64

INPUT_CENTER = 0.5


@dataclass
class PointBatch:
    points: np.ndarray  # (N, 3), samples stored contiguously
    starts: np.ndarray  # (B,) first row of every sample

    @classmethod
    def from_clouds(cls, clouds: Sequence[np.ndarray], dtype=np.float64) -> "PointBatch":
        arrays = [np.asarray(getattr(c, "points", c), dtype=dtype).reshape(-1, 3) for c in clouds]
        if any(len(a) == 0 for a in arrays):
            raise ValueError("empty cloud in batch")
        sizes = np.array([len(a) for a in arrays])
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        return cls(np.concatenate(arrays), starts)

    @property
    def size(self) -> int:
        return len(self.starts)

    def segment_ids(self) -> np.ndarray:
        sizes = np.diff(np.append(self.starts, len(self.points)))
        return np.repeat(np.arange(self.size), sizes)


def relu(x):
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@numba.njit(cache=True)
def _segment_max(a, starts):
    n_seg, channels = len(starts), a.shape[1]
    m = np.empty((n_seg, channels), dtype=a.dtype)
    arg = np.empty((n_seg, channels), dtype=np.int64)
    for s in range(n_seg):
        lo = starts[s]
        hi = starts[s + 1] if s + 1 < n_seg else a.shape[0]
        for c in range(channels):
            m[s, c] = a[lo, c]
            arg[s, c] = lo
        for r in range(lo + 1, hi):
            for c in range(channels):
                if a[r, c] > m[s, c]:
                    m[s, c] = a[r, c]
                    arg[s, c] = r
    return m, arg


def segment_max(a: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample channel max and the first row attaining it."""
    return _segment_max(np.ascontiguousarray(a), np.asarray(starts, dtype=np.int64))


class PointNet:
    """Weights are kept in one ordered list: point layers then head layers,
    each as ``W, b``."""

    def __init__(self, point_dims: Sequence[int], head_dims: Sequence[int], seed: int = 0):
        if point_dims[0] != 3 or point_dims[-1] != head_dims[0]:
            raise ValueError("point_dims must start at 3 and end at head_dims[0]")
        self.point_dims = tuple(int(d) for d in point_dims)
        self.head_dims = tuple(int(d) for d in head_dims)
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for dims in (self.point_dims, self.head_dims):
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                self.params.append(rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
                self.params.append(np.zeros(fan_out))

    @property
    def n_point_layers(self) -> int:
        return len(self.point_dims) - 1

    @property
    def n_head_layers(self) -> int:
        return len(self.head_dims) - 1

    def point_layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[2 * i], self.params[2 * i + 1]

    def head_layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        j = 2 * (self.n_point_layers + i)
        return self.params[j], self.params[j + 1]

    def copy(self) -> "PointNet":
        out = PointNet.__new__(PointNet)
        out.point_dims, out.head_dims = self.point_dims, self.head_dims
        out.params = [p.copy() for p in self.params]
        return out

    def digest(self) -> str:
        h = fnv1a64(struct.pack("<" + "I" * len(self.point_dims + self.head_dims), *self.point_dims, *self.head_dims))
        for p in self.params:
            h = fnv1a64(h.encode() + np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h

    # ---------------------------------------------------------------- forward

    def features(self, batch: PointBatch, cache: dict | None = None) -> np.ndarray:
        a = batch.points - INPUT_CENTER
        acts = [a]
        for i in range(self.n_point_layers):
            w, b = self.point_layer(i)
            a = relu(a @ w + b)
            acts.append(a)
        feat, arg = segment_max(a, batch.starts)
        if cache is not None:
            cache.update(acts=acts, arg=arg, starts=batch.starts)
        return feat

    def head(self, feat: np.ndarray, cache: dict | None = None) -> np.ndarray:
        h = feat
        hs = [h]
        for i in range(self.n_head_layers):
            w, b = self.head_layer(i)
            h = h @ w + b
            if i < self.n_head_layers - 1:
                h = relu(h)
            hs.append(h)
        if cache is not None:
            cache["head"] = hs
        return h

    def forward(self, batch: PointBatch) -> tuple[np.ndarray, dict]:
        cache: dict = {}
        return self.head(self.features(batch, cache), cache), cache

    def logits(self, batch: PointBatch) -> np.ndarray:
        return self.head(self.features(batch))

    # --------------------------------------------------------------- backward

    def backward(self, cache: dict, dlogits: np.ndarray) -> list[np.ndarray]:
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        hs = cache["head"]
        g = dlogits
        base = 2 * self.n_point_layers
        for i in range(self.n_head_layers - 1, -1, -1):
            w, _ = self.head_layer(i)
            grads[base + 2 * i] = hs[i].T @ g
            grads[base + 2 * i + 1] = g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                g = g * (hs[i] > 0)
        # g is d loss / d feature; route it to the argmax rows only
        acts, arg = cache["acts"], cache["arg"]
        last = acts[-1]
        n_rows, channels = last.shape
        g = g * (np.take_along_axis(last, arg, axis=0) > 0)
        # (row, channel) pairs are unique: samples own disjoint rows
        active, inverse = np.unique(arg, return_inverse=True)
        dz = np.zeros((len(active), channels), dtype=g.dtype)
        dz[inverse.reshape(arg.shape), np.arange(channels)] = g
        for i in range(self.n_point_layers - 1, -1, -1):
            w, _ = self.point_layer(i)
            x = acts[i][active]
            grads[2 * i] = x.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i > 0:
                dz = (dz @ w.T) * (x > 0)
        return grads


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ checkpoints

_CKPT_VERSION = 1


def dump_weights(net: PointNet, magic: bytes, n_outputs: int) -> bytes:
    """``magic | version:u8 | K:u32 | n_point:u8 dims:u32* | n_head:u8 dims:u32* | f64 weights``."""
    out = [magic, struct.pack("<BI", _CKPT_VERSION, n_outputs)]
    for dims in (net.point_dims, net.head_dims):
        out.append(struct.pack(f"<B{len(dims)}I", len(dims), *dims))
    for p in net.params:
        out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(out)


def load_weights(data: bytes, magic: bytes) -> tuple[PointNet, int]:
    if data[: len(magic)] != magic:
        raise ValueError(f"bad checkpoint magic {data[:len(magic)]!r}")
    pos = len(magic)
    version, k = struct.unpack_from("<BI", data, pos)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 5
    dims = []
    for _ in range(2):
        (n,) = struct.unpack_from("<B", data, pos)
        dims.append(struct.unpack_from(f"<{n}I", data, pos + 1))
        pos += 1 + 4 * n
    net = PointNet.__new__(PointNet)
    net.point_dims, net.head_dims = tuple(dims[0]), tuple(dims[1])
    net.params = []
    for d in (net.point_dims, net.head_dims):
        for fan_in, fan_out in zip(d[:-1], d[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                n = int(np.prod(shape))
                arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
                net.params.append(arr.astype(np.float64))
                pos += 8 * n
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return net, k
