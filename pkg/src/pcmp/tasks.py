"""Toy machine-vision tasks and the per-sample rate/loss tables built from them.

Two frozen networks stand in for the downstream consumers of decoded clouds:
a shape classifier and a two-class per-point segmenter.  A table row holds,
for every candidate depth, the prefix bit cost of the sample's stream and the
task loss on the cloud reconstructed from that prefix.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._util import Fnv1a, atomic_write, fnv1a64, write_json
from .codec import bpp, codec_config_hash, decode_cloud, encode_cloud, truncate_stream
from .errors import CacheCorrupt, ConfigError, InvalidDataset
from .nn import (
    Adam,
    PointBatch,
    PointNet,
    dump_weights,
    load_weights,
    log_softmax,
    relu,
    segment_max,
    softmax,
)
from .pointcloud import LabeledCloud, PointCloud

CLS_POINT_DIMS = (3, 32, 64)
CLS_HEAD_HIDDEN = 32
CLS_MAGIC = b"TNET"
SEG_MAGIC = b"TSEG"


@dataclass(frozen=True)
class TaskOutcome:
    loss: float
    metric: float  # top-1 correctness (0/1) or mIoU


class TaskNetwork:
    """PointNet classifier: per-point 3->32->64, max-pool, FC 64->32->C."""

    task_id = "classification"
    metric_name = "accuracy"

    def __init__(self, n_classes: int, seed: int = 0, net: PointNet | None = None):
        self.n_classes = int(n_classes)
        self.net = net or PointNet(CLS_POINT_DIMS, (CLS_POINT_DIMS[-1], CLS_HEAD_HIDDEN, self.n_classes), seed=seed)
        self.frozen = False

    def digest(self) -> str:
        return self.net.digest()

    def probs(self, clouds: Sequence) -> np.ndarray:
        return softmax(self.net.logits(PointBatch.from_clouds(clouds)))

    def evaluate(self, clouds: Sequence[PointCloud], items: Sequence[LabeledCloud]) -> list[TaskOutcome]:
        logp = log_softmax(self.net.logits(PointBatch.from_clouds(clouds)))
        labels = np.array([it.label for it in items])
        rows = np.arange(len(labels))
        loss = -logp[rows, labels]
        hit = np.argmax(logp, axis=1) == labels
        return [TaskOutcome(float(l), float(h)) for l, h in zip(loss, hit)]

    def save(self, path) -> None:
        atomic_write(path, dump_weights(self.net, CLS_MAGIC, self.n_classes))

    @classmethod
    def load(cls, path) -> "TaskNetwork":
        net, k = load_weights(Path(path).read_bytes(), CLS_MAGIC)
        out = cls(k, net=net)
        out.frozen = True
        return out


def _check_classes(items: Sequence[LabeledCloud]) -> np.ndarray:
    labels = np.array([it.label for it in items], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise InvalidDataset("training needs at least two classes")
    return labels


def train_task_network(
    train_set: Sequence[LabeledCloud],
    epochs: int = 60,
    seed: int = 0,
    *,
    n_classes: int | None = None,
    batch_size: int = 32,
    lr: float = 3e-3,
) -> TaskNetwork:
    """Cross-entropy training on raw clouds, then freeze."""
    labels = _check_classes(train_set)
    n_classes = n_classes or int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    model = TaskNetwork(n_classes, seed=seed)
    opt = Adam(model.net.params, lr=lr)
    points = [np.asarray(it.cloud.points) for it in train_set]
    for epoch in range(epochs):
        step_lr = lr if epoch < int(0.8 * epochs) else lr * 0.1
        order = rng.permutation(len(points))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            logits, cache = model.net.forward(PointBatch.from_clouds([points[i] for i in idx]))
            d = softmax(logits)
            d[np.arange(len(idx)), labels[idx]] -= 1.0
            opt.step(model.net.backward(cache, d / len(idx)), step_lr)
    model.frozen = True
    return model


def task_loss(network, reconstructed: PointCloud, item: LabeledCloud | int) -> TaskOutcome:
    """Cross-entropy of the frozen network's prediction against the label."""
    if not isinstance(item, LabeledCloud):
        item = LabeledCloud(reconstructed, int(item))
    return network.evaluate([reconstructed], [item])[0]


def accuracy(network: TaskNetwork, items: Sequence[LabeledCloud]) -> float:
    return float(np.mean([o.metric for o in network.evaluate([it.cloud for it in items], items)]))


# ---------------------------------------------------------------------------
# per-point segmentation toy task


def transfer_labels(source: PointCloud, labels: np.ndarray, target: PointCloud) -> np.ndarray:
    """Label every target point with the label of its nearest source point."""
    _, idx = cKDTree(source.points).query(target.points, k=1)
    return np.asarray(labels)[idx]


def mean_iou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    ious = []
    for c in range(n_classes):
        union = np.sum((pred == c) | (truth == c))
        if union:
            ious.append(np.sum((pred == c) & (truth == c)) / union)
    return float(np.mean(ious)) if ious else 1.0


class SegmentationNetwork:
    """Per-point 3->32->64, global max-pool, then per-point [local, global]
    128->32->S."""

    task_id = "segmentation"
    metric_name = "miou"

    def __init__(self, n_parts: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_parts = n_parts
        dims = [(3, 32), (32, 64), (128, 32), (32, n_parts)]
        self.params = []
        for fan_in, fan_out in dims:
            self.params.append(rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.frozen = False

    def digest(self) -> str:
        h = Fnv1a().update(b"seg")
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8"))
        return h.hexdigest()

    def forward(self, batch: PointBatch):
        w1, b1, w2, b2, w3, b3, w4, b4 = self.params
        x = batch.points - 0.5
        z1 = x @ w1 + b1
        a1 = relu(z1)
        z2 = a1 @ w2 + b2
        a2 = relu(z2)
        g, arg = segment_max(a2, batch.starts)
        seg = batch.segment_ids()
        h = np.concatenate([a2, g[seg]], axis=1)
        z3 = h @ w3 + b3
        a3 = relu(z3)
        out = a3 @ w4 + b4
        return out, (x, z1, a1, z2, a2, arg, seg, h, z3, a3, batch.starts)

    def backward(self, cache, dout):
        w1, b1, w2, b2, w3, b3, w4, b4 = self.params
        x, z1, a1, z2, a2, arg, seg, h, z3, a3, starts = cache
        g4 = a3.T @ dout
        dz3 = (dout @ w4.T) * (z3 > 0)
        g3 = h.T @ dz3
        dh = dz3 @ w3.T
        da2 = dh[:, :64].copy()
        dg = np.add.reduceat(dh[:, 64:], starts, axis=0)
        dg = dg * (np.take_along_axis(a2, arg, axis=0) > 0)
        np.add.at(da2, (arg.ravel(), np.tile(np.arange(64), len(arg))), dg.ravel())
        dz2 = da2 * (z2 > 0)
        g2 = a1.T @ dz2
        dz1 = (dz2 @ w2.T) * (z1 > 0)
        g1 = x.T @ dz1
        return [g1, dz1.sum(0), g2, dz2.sum(0), g3, dz3.sum(0), g4, dout.sum(0)]

    def evaluate(self, clouds: Sequence[PointCloud], items: Sequence[LabeledCloud]) -> list[TaskOutcome]:
        batch = PointBatch.from_clouds(clouds)
        logp = log_softmax(self.forward(batch)[0])
        out = []
        ends = np.append(batch.starts[1:], len(batch.points))
        for cloud, item, lo, hi in zip(clouds, items, batch.starts, ends):
            truth = transfer_labels(item.cloud, item.part_labels, cloud)
            lp = logp[lo:hi]
            loss = float(-lp[np.arange(len(truth)), truth].mean())
            out.append(TaskOutcome(loss, mean_iou(np.argmax(lp, axis=1), truth, self.n_parts)))
        return out

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(buf, *self.params)
        atomic_write(path, SEG_MAGIC + buf.getvalue())

    @classmethod
    def load(cls, path) -> "SegmentationNetwork":
        data = Path(path).read_bytes()
        if data[:4] != SEG_MAGIC:
            raise ValueError("not a segmentation checkpoint")
        arrs = np.load(io.BytesIO(data[4:]))
        params = [arrs[f"arr_{i}"] for i in range(8)]
        out = cls(params[-1].shape[0])
        out.params = params
        out.frozen = True
        return out


def train_segmentation_network(
    train_set: Sequence[LabeledCloud], epochs: int = 40, seed: int = 0, *, batch_size: int = 32, lr: float = 3e-3
) -> SegmentationNetwork:
    if any(it.part_labels is None for it in train_set):
        raise InvalidDataset("segmentation training needs per-point part labels")
    rng = np.random.default_rng(seed)
    model = SegmentationNetwork(seed=seed)
    opt = Adam(model.params, lr=lr)
    points = [np.asarray(it.cloud.points) for it in train_set]
    parts = [np.asarray(it.part_labels) for it in train_set]
    for epoch in range(epochs):
        step_lr = lr if epoch < int(0.8 * epochs) else lr * 0.1
        order = rng.permutation(len(points))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            batch = PointBatch.from_clouds([points[i] for i in idx])
            out, cache = model.forward(batch)
            truth = np.concatenate([parts[i] for i in idx])
            sizes = np.diff(np.append(batch.starts, len(batch.points)))
            d = softmax(out)
            d[np.arange(len(truth)), truth] -= 1.0
            d /= (len(idx) * np.repeat(sizes, sizes))[:, None]
            opt.step(model.backward(cache, d), step_lr)
    model.frozen = True
    return model


# ---------------------------------------------------------------------------
# rate / loss tables


@dataclass
class RateLossTable:
    sample_ids: np.ndarray  # (S,)
    levels: tuple[int, ...]
    bpp: np.ndarray  # (S, K)
    loss: np.ndarray  # (S, K)
    metric: np.ndarray  # (S, K)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s, k = len(self.sample_ids), len(self.levels)
        for name in ("bpp", "loss", "metric"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (s, k):
                raise CacheCorrupt(f"{name} has shape {arr.shape}, expected {(s, k)}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, rows) -> "RateLossTable":
        rows = np.asarray(rows)
        return RateLossTable(self.sample_ids[rows], self.levels, self.bpp[rows], self.loss[rows], self.metric[rows], dict(self.meta))

    def validate(self) -> None:
        if len(np.unique(self.sample_ids)) != len(self.sample_ids):
            raise CacheCorrupt("duplicate sample ids")
        if not (np.isfinite(self.bpp).all() and np.isfinite(self.loss).all()):
            raise CacheCorrupt("non-finite table entries")
        if np.any(np.diff(self.bpp, axis=1) <= 0):
            raise CacheCorrupt("bpp must increase strictly with depth")
        if np.any(self.loss < 0):
            raise CacheCorrupt("negative task loss")

    def objective(self, lam: float) -> np.ndarray:
        return lam * self.bpp + self.loss

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "level", "bpp", "loss", "correct"])
        for i, sid in enumerate(self.sample_ids):
            for j, level in enumerate(self.levels):
                w.writerow([int(sid), level, repr(float(self.bpp[i, j])), repr(float(self.loss[i, j])), repr(float(self.metric[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, meta: dict | None = None) -> "RateLossTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise CacheCorrupt("empty table")
        try:
            sids = sorted({int(r["sample_id"]) for r in rows})
            levels = sorted({int(r["level"]) for r in rows})
            pos_s = {s: i for i, s in enumerate(sids)}
            pos_l = {lv: j for j, lv in enumerate(levels)}
            arrs = {k: np.full((len(sids), len(levels)), np.nan) for k in ("bpp", "loss", "correct")}
            seen = np.zeros((len(sids), len(levels)), dtype=int)
            for r in rows:
                i, j = pos_s[int(r["sample_id"])], pos_l[int(r["level"])]
                seen[i, j] += 1
                for k in arrs:
                    arrs[k][i, j] = float(r[k])
        except (KeyError, ValueError) as exc:
            raise CacheCorrupt(f"malformed table row: {exc}") from None
        if np.any(seen != 1):
            raise CacheCorrupt("every (sample, level) pair must appear exactly once")
        return cls(np.array(sids), tuple(levels), arrs["bpp"], arrs["loss"], arrs["correct"], dict(meta or {}))

    def save(self, path) -> None:
        """Write ``path`` (CSV) and ``path.json`` (metadata incl. a CSV hash)."""
        path = Path(path)
        text = self.to_csv()
        atomic_write(path, text.encode("utf-8"))
        write_json(_meta_path(path), {**self.meta, "levels": list(self.levels), "csv_hash": fnv1a64(text)})

    @classmethod
    def load(cls, path) -> "RateLossTable":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        mp = _meta_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        if "csv_hash" in meta and meta["csv_hash"] != fnv1a64(text):
            raise CacheCorrupt(f"{path}: content hash mismatch")
        meta.pop("csv_hash", None)
        table = cls.from_csv(text, meta)
        if "levels" in meta and tuple(meta["levels"]) != table.levels:
            raise CacheCorrupt(f"{path}: levels disagree with metadata")
        return table


def _meta_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def dataset_hash(dataset: Sequence[LabeledCloud]) -> str:
    h = Fnv1a()
    for item in dataset:
        h.update(np.int64(item.label).tobytes())
        h.update(np.int64(len(item.cloud)).tobytes())
        h.update(np.ascontiguousarray(item.cloud.points, dtype="<f8"))
        if item.part_labels is not None:
            h.update(np.ascontiguousarray(item.part_labels, dtype="<i8"))
    return h.hexdigest()


def table_key(dataset, network, levels, max_depth) -> dict:
    return {
        "task_id": network.task_id,
        "dataset_hash": dataset_hash(dataset),
        "codec_hash": codec_config_hash(max_depth),
        "network_hash": network.digest(),
        "levels": list(levels),
        "max_depth": max_depth,
    }


def _compute_table(dataset, network, levels, max_depth) -> RateLossTable:
    s, k = len(dataset), len(levels)
    bpp_m, loss_m, metric_m = np.zeros((s, k)), np.zeros((s, k)), np.zeros((s, k))
    for i, item in enumerate(dataset):
        stream = encode_cloud(item.cloud, max_depth)
        recon = []
        for j, level in enumerate(levels):
            prefix = truncate_stream(stream, level)
            bpp_m[i, j] = bpp(prefix, len(item.cloud))
            recon.append(decode_cloud(prefix, level)[1])
        for j, outcome in enumerate(network.evaluate(recon, [item] * k)):
            loss_m[i, j] = outcome.loss
            metric_m[i, j] = outcome.metric
    return RateLossTable(np.arange(s), tuple(levels), bpp_m, loss_m, metric_m)


def build_rate_loss_table(
    dataset: Sequence[LabeledCloud],
    network,
    levels: Sequence[int],
    max_depth: int,
    cache_dir=None,
) -> RateLossTable:
    """Encode every sample once to ``max_depth``, then per candidate level take
    the prefix bpp and the task loss on the prefix reconstruction.

    Results are cached under ``cache_dir`` (default ``$PCMP_CACHE_DIR``)
    keyed by dataset, codec and network hashes; a corrupt cache entry is
    rebuilt.
    """
    if not getattr(network, "frozen", False):
        raise ConfigError("task network must be frozen before building tables")
    levels = tuple(int(v) for v in levels)
    if not levels or min(levels) < 1 or max(levels) > max_depth:
        raise ConfigError(f"candidate levels must lie in [1, {max_depth}]")
    if any(not item.cloud.normalized for item in dataset):
        raise ConfigError("table building expects normalized clouds")
    key = table_key(dataset, network, levels, max_depth)
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("PCMP_CACHE_DIR")
    path = None
    if cache_dir:
        path = Path(cache_dir) / f"table-{fnv1a64(json.dumps(key, sort_keys=True))}.csv"
        if path.exists():
            try:
                table = RateLossTable.load(path)
                if {k: table.meta.get(k) for k in key} != key:
                    raise CacheCorrupt("cache key mismatch")
                table.validate()
                return table
            except CacheCorrupt:
                pass
    table = _compute_table(dataset, network, levels, max_depth)
    table.meta = dict(key)
    table.meta["metric"] = network.metric_name
    if path is not None:
        table.save(path)
    return table


def lambda_scale(table: RateLossTable) -> float:
    """Exchange rate between rate and task loss on this table: the mean loss
    drop from the shallowest to the deepest level per bpp spent.  Multiplying
    nominal lambdas by it makes lambda = 1 price the whole bpp range like the
    whole loss range."""
    loss_gain = table.loss[:, 0].mean() - table.loss[:, -1].mean()
    rate_cost = table.bpp[:, -1].mean() - table.bpp[:, 0].mean()
    if not (loss_gain > 0 and rate_cost > 0):
        return 1.0
    return float(loss_gain / rate_cost)
