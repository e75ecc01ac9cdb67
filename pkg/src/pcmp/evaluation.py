"""Depth-selection policies, their evaluation, RD sweeps and partition plans."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ._util import atomic_write
from .codec import Bitstream, bpp, decode_cloud, encode_cloud, truncate_stream
from .errors import ConfigError, TableMismatch
from .predictor import PredictorModel, predict_depth, predict_indices


@dataclass(frozen=True)
class Policy:
    kind: str  # "fixed" | "oracle" | "learned"
    level: int | None = None
    model: PredictorModel | None = None

    @classmethod
    def fixed(cls, level: int) -> "Policy":
        return cls("fixed", level=int(level))

    @classmethod
    def oracle(cls) -> "Policy":
        return cls("oracle")

    @classmethod
    def learned(cls, model: PredictorModel) -> "Policy":
        return cls("learned", model=model)

    @property
    def name(self) -> str:
        return f"fixed:{self.level}" if self.kind == "fixed" else self.kind


def _clouds(dataset):
    return [getattr(item, "cloud", item) for item in dataset]


def oracle_indices(table, lam: float) -> np.ndarray:
    """Per-sample argmin of lam*bpp + L; np.argmin keeps the first (lowest) level on ties."""
    return np.argmin(lam * table.bpp + table.loss, axis=1)


def oracle_select(table, lam: float) -> np.ndarray:
    return np.asarray(table.levels)[oracle_indices(table, lam)]


def select_indices(policy: Policy, dataset, table, lam: float) -> np.ndarray:
    levels = tuple(table.levels)
    if policy.kind == "fixed":
        if policy.level not in levels:
            raise ConfigError(f"fixed level {policy.level} is not a candidate level {levels}")
        return np.full(len(table), levels.index(policy.level))
    if policy.kind == "oracle":
        return oracle_indices(table, lam)
    if policy.kind == "learned":
        if tuple(policy.model.levels) != levels:
            raise TableMismatch("predictor levels differ from the table's")
        return predict_indices(policy.model, _clouds(dataset))
    raise ConfigError(f"unknown policy kind {policy.kind!r}")


def selection_percentages(indices: np.ndarray, levels: Sequence[int]) -> dict[int, float]:
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=len(levels))
    pct = 100.0 * counts / max(len(indices), 1)
    return {int(lv): float(p) for lv, p in zip(levels, pct)}


@dataclass(frozen=True)
class EvalReport:
    policy: str
    lam: float
    n_samples: int
    mean_bpp: float
    mean_loss: float
    metric: float
    mean_objective: float
    mean_depth: float
    selection: dict

    def row(self) -> dict:
        return {
            "lambda": self.lam,
            "policy": self.policy,
            "mean_bpp": self.mean_bpp,
            "mean_loss": self.mean_loss,
            "metric": self.metric,
            "objective": self.mean_objective,
            "mean_depth": self.mean_depth,
        }


def _outcomes_by_decoding(dataset, network, levels, indices, max_depth):
    """Re-run codec and task network for the chosen levels (the table-free path)."""
    bpps, losses, metrics = [], [], []
    for item, j in zip(dataset, indices):
        stream = encode_cloud(item.cloud, max_depth)
        prefix = truncate_stream(stream, levels[j])
        bpps.append(bpp(prefix, len(item.cloud)))
        outcome = network.evaluate([decode_cloud(prefix, levels[j])[1]], [item])[0]
        losses.append(outcome.loss)
        metrics.append(outcome.metric)
    return np.array(bpps), np.array(losses), np.array(metrics)


def evaluate_policy(
    policy: Policy, dataset, table, lam: float, *, network=None, max_depth: int | None = None
) -> EvalReport:
    """Aggregate rate, task loss, task metric and objective of ``policy``.

    With a ``network`` the chosen prefixes are actually decoded and scored;
    otherwise the table's entries (computed the same way) are used.
    """
    if len(dataset) != len(table):
        raise TableMismatch(f"{len(dataset)} samples but {len(table)} table rows")
    idx = select_indices(policy, dataset, table, lam)
    levels = tuple(table.levels)
    rows = np.arange(len(idx))
    if network is None:
        b, l, m = table.bpp[rows, idx], table.loss[rows, idx], table.metric[rows, idx]
    else:
        b, l, m = _outcomes_by_decoding(dataset, network, levels, idx, max_depth or table.meta.get("max_depth", max(levels)))
    return EvalReport(
        policy=policy.name,
        lam=float(lam),
        n_samples=len(idx),
        mean_bpp=float(b.mean()),
        mean_loss=float(l.mean()),
        metric=float(m.mean()),
        mean_objective=float((lam * b + l).mean()),
        mean_depth=float(np.asarray(levels)[idx].mean()),
        selection=selection_percentages(idx, levels),
    )


def selection_histogram(policy: Policy, dataset, table, lam: float = 0.0) -> dict[int, float]:
    return selection_percentages(select_indices(policy, dataset, table, lam), table.levels)


# ---------------------------------------------------------------------------
# RD sweeps

CSV_FIELDS = ("lambda", "policy", "mean_bpp", "mean_loss", "metric", "objective", "mean_depth")


def rd_sweep(
    lams: Sequence[float], dataset, table, learned: Mapping[float, PredictorModel] | None = None
) -> list[EvalReport]:
    """Reports for learned (when a model exists for that lambda), oracle and
    every fixed level, lambda by lambda."""
    if not len(lams):
        raise ConfigError("lambda list must be non-empty")
    learned = learned or {}
    out = []
    for lam in lams:
        policies = []
        if lam in learned:
            policies.append(Policy.learned(learned[lam]))
        policies.append(Policy.oracle())
        policies.extend(Policy.fixed(lv) for lv in table.levels)
        out.extend(evaluate_policy(p, dataset, table, lam) for p in policies)
    return out


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_FIELDS) + "\n")
    for r in reports:
        row = r.row()
        buf.write(",".join(_fmt(row[k]) for k in CSV_FIELDS) + "\n")
    return buf.getvalue()


def write_reports(reports: Sequence[EvalReport], path) -> None:
    atomic_write(path, reports_to_csv(reports).encode("utf-8"))


# ---------------------------------------------------------------------------
# multi-task partitions


@dataclass(frozen=True)
class PartitionPlan:
    tasks: tuple[tuple[str, int], ...]  # (task id, depth), ordered by depth
    cuts: tuple[int, ...]  # strictly increasing, last == full_depth
    full_depth: int

    def depth_of(self, task_id: str) -> int:
        return dict(self.tasks)[task_id]


def plan_partition(tasks: Sequence[tuple[PredictorModel, str]], cloud, full_depth: int) -> PartitionPlan:
    """Each task's predictor picks a depth; distinct depths plus the full
    depth become the cut points of one shared stream."""
    if not tasks:
        raise ConfigError("need at least one task")
    chosen = []
    for model, task_id in tasks:
        depth = predict_depth(model, cloud)
        if depth > full_depth:
            raise ConfigError(f"task {task_id!r} selected depth {depth} beyond the stream depth {full_depth}")
        chosen.append((task_id, depth))
    chosen.sort(key=lambda t: (t[1], t[0]))
    cuts = tuple(sorted({d for _, d in chosen} | {full_depth}))
    return PartitionPlan(tuple(chosen), cuts, full_depth)


def split_stream(stream: Bitstream, plan: PartitionPlan) -> list[bytes]:
    """Byte chunks per cut: header plus levels 1..c1, then c1+1..c2, and so on.
    Concatenated they are exactly ``stream.to_bytes()``."""
    if plan.full_depth != stream.max_depth:
        raise ConfigError("plan depth differs from the stream depth")
    chunks = []
    prev = 0
    for i, cut in enumerate(plan.cuts):
        body = b"".join(stream.segments[prev:cut])
        chunks.append(stream.header_bytes() + body if i == 0 else body)
        prev = cut
    return chunks


def task_extra_bytes(stream: Bitstream, plan: PartitionPlan) -> dict[str, int]:
    """Payload bytes each task needs beyond what shallower tasks already got."""
    out = {}
    prev = 0
    for task_id, depth in plan.tasks:
        out[task_id] = stream.prefix_size(depth) - stream.prefix_size(prev)
        prev = max(prev, depth)
    return out
