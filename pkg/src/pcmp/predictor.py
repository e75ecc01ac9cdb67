"""Octree depth-level predictor.

A PointNet-style extractor (3->64->128->256, max-pooled) feeds a two-layer
head (256->128->K) whose softmax gives one probability per candidate depth.
Training perturbs those probabilities with Gumbel noise, selects the argmax
in the forward pass and back-propagates through the tempered softmax of the
noisy scores; the objective ``sum((lam * bpp + L) * h_soft)`` treats the
per-level rates and task losses as constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import atomic_write, write_json
from .errors import ConfigError, DomainError, TableMismatch
from .nn import (
    Adam,
    PointBatch,
    PointNet,
    dump_weights,
    load_weights,
    relu,
    segment_max,
    softmax,
)
from .pointcloud import PointCloud

POINT_DIMS = (3, 64, 128, 256)
HEAD_HIDDEN = 128
CKPT_MAGIC = b"PMDL"


@dataclass(frozen=True)
class TemperatureSchedule:
    """Exponential interpolation from ``start`` (first epoch) to ``end`` (last)."""

    start: float = 3.0
    end: float = 0.001
    total_epochs: int = 50

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0 and self.start >= self.end):
            raise ConfigError("temperatures must satisfy start >= end > 0")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be positive")

    def tau(self, epoch: int) -> float:
        if self.total_epochs == 1:
            return self.start
        frac = min(max(epoch, 0), self.total_epochs - 1) / (self.total_epochs - 1)
        return self.start * (self.end / self.start) ** frac


class PredictorModel:
    """Depth predictor over candidate octree levels ``levels`` (K = len(levels))."""

    def __init__(self, levels: Sequence[int], seed: int = 0, net: PointNet | None = None):
        self.levels = tuple(int(v) for v in levels)
        if len(self.levels) < 2:
            raise ConfigError("need at least two candidate depth levels")
        if list(self.levels) != sorted(set(self.levels)):
            raise ConfigError("candidate levels must be strictly increasing")
        self.net = net or PointNet(POINT_DIMS, (POINT_DIMS[-1], HEAD_HIDDEN, len(self.levels)), seed=seed)
        if self.net.point_dims != POINT_DIMS or self.net.head_dims != (POINT_DIMS[-1], HEAD_HIDDEN, self.K):
            raise ConfigError("predictor weights have unexpected layer shapes")
        self.meta: dict = {}

    @property
    def K(self) -> int:
        return len(self.levels)

    def copy(self) -> "PredictorModel":
        out = PredictorModel(self.levels, net=self.net.copy())
        out.meta = dict(self.meta)
        return out

    def probs(self, clouds: Sequence[PointCloud]) -> np.ndarray:
        return softmax(self.net.logits(PointBatch.from_clouds(clouds)))

    def save(self, path) -> None:
        path = Path(path)
        atomic_write(path, dump_weights(self.net, CKPT_MAGIC, self.K))
        write_json(path.with_suffix(path.suffix + ".json"), {"levels": list(self.levels), **self.meta})

    @classmethod
    def load(cls, path) -> "PredictorModel":
        path = Path(path)
        net, k = load_weights(path.read_bytes(), CKPT_MAGIC)
        side = path.with_suffix(path.suffix + ".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        levels = meta.pop("levels", list(range(1, k + 1)))
        if len(levels) != k:
            raise ConfigError(f"sidecar lists {len(levels)} levels, checkpoint has K={k}")
        model = cls(levels, net=net)
        model.meta = meta
        return model


# ---------------------------------------------------------------------------
# forward pieces


def extract_feature(cloud: PointCloud, model: PredictorModel) -> np.ndarray:
    """Max-pooled 256-d global feature; independent of point order."""
    return model.net.features(PointBatch.from_clouds([cloud]))[0]


def forward_probs(feature: np.ndarray, model: PredictorModel) -> np.ndarray:
    return softmax(model.net.head(np.asarray(feature, dtype=np.float64)[None, :]))[0]


def gumbel_noise(eps):
    """Standard Gumbel sample ``-log(-log eps)`` for ``eps`` in (0, 1)."""
    e = np.asarray(eps, dtype=np.float64)
    if np.any(~((e > 0.0) & (e < 1.0))):
        raise DomainError("Gumbel noise needs uniform samples strictly inside (0, 1)")
    g = -np.log(-np.log(e))
    return float(g) if g.ndim == 0 else g


def draw_uniforms(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return np.where(u == 0.0, np.finfo(np.float64).tiny, u)


@dataclass(frozen=True)
class SelectionOutcome:
    probs: np.ndarray
    scores: np.ndarray  # p + G
    hard: np.ndarray  # one-hot at argmax of scores
    soft: np.ndarray  # softmax(scores / tau)
    tau: float

    @property
    def index(self) -> int:
        return int(np.argmax(self.hard))


def gumbel_select(
    p: np.ndarray,
    tau: float,
    uniforms: np.ndarray | None = None,
    *,
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> SelectionOutcome:
    """Noisy hard selection plus its tempered-softmax relaxation.

    Noise is ``gumbel_noise(uniforms)`` unless ``noise`` is given directly
    (pass zeros to disable it).  Ties go to the lowest index.
    """
    if not tau > 0:
        raise DomainError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    if noise is None:
        if uniforms is None:
            uniforms = draw_uniforms(rng or np.random.default_rng(), p.shape)
        noise = gumbel_noise(uniforms)
    scores = p + np.asarray(noise, dtype=np.float64)
    hard = np.zeros_like(scores)
    np.put_along_axis(hard, np.argmax(scores, axis=-1)[..., None], 1.0, axis=-1)
    return SelectionOutcome(p, scores, hard, softmax(scores / tau), float(tau))


def selection_loss(bpp_vec, loss_vec, h, lam: float) -> float:
    """``sum((lam * bpp + L) * h)``; linear in ``h``."""
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    cost = lam * np.asarray(bpp_vec, dtype=np.float64) + np.asarray(loss_vec, dtype=np.float64)
    return float(np.sum(cost * np.asarray(h, dtype=np.float64)))


def _relaxed_logit_grad(p, soft, cost, tau):
    """d/d logits of mean_b sum_k cost*soft, with scores = p + G."""
    g_scores = soft * (cost - (soft * cost).sum(-1, keepdims=True)) / tau
    return p * (g_scores - (p * g_scores).sum(-1, keepdims=True)) / len(p)


def relaxed_objective(logits, cost, noise, tau) -> np.ndarray:
    """Mean relaxed objective; leading axes of ``logits`` beyond (B, K) are kept."""
    soft = softmax((softmax(logits) + noise) / tau)
    return (soft * cost).sum(-1).mean(-1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lam: float
    epochs: int = 50
    batch_size: int = 48
    lr: float = 1e-3
    lr_late: float = 1e-4
    lr_drop_epoch: int = 40
    seed: int = 0
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    precision: str = "float32"  # compute dtype of forward/backward; Adam state stays float64

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, not {self.precision!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_drop_epoch else self.lr_late


def _cost_matrix(table, n_samples: int, lam: float) -> np.ndarray:
    bpp_m = np.asarray(table.bpp, dtype=np.float64)
    loss_m = np.asarray(table.loss, dtype=np.float64)
    if bpp_m.shape != loss_m.shape or bpp_m.shape[0] != n_samples:
        raise TableMismatch(f"table has {bpp_m.shape[0]} rows for {n_samples} samples")
    if not (np.isfinite(bpp_m).all() and np.isfinite(loss_m).all()):
        raise TableMismatch("table has missing rate/loss entries")
    return lam * bpp_m + loss_m


def train_predictor(dataset, table, config: TrainConfig, *, model: PredictorModel | None = None):
    """Fit a predictor; only its own weights change.  Returns ``(model, history)``."""
    if config.lam < 0:
        raise ConfigError("lambda must be non-negative")
    clouds = [getattr(item, "cloud", item) for item in dataset]
    cost = _cost_matrix(table, len(clouds), config.lam)
    levels = tuple(table.levels)
    if cost.shape[1] != len(levels):
        raise TableMismatch("table level count does not match its columns")
    model = model or PredictorModel(levels, seed=config.seed)
    if model.levels != levels:
        raise TableMismatch("predictor levels differ from the table's")
    schedule = config.schedule
    if schedule.total_epochs != config.epochs:
        schedule = TemperatureSchedule(schedule.start, schedule.end, config.epochs)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.net.params, lr=config.lr)
    dtype = np.dtype(config.precision)
    points = [np.asarray(c.points, dtype=dtype) for c in clouds]
    work = model.net.copy()
    history = []
    for epoch in range(config.epochs):
        tau = schedule.tau(epoch)
        lr = config.lr_at(epoch)
        order = rng.permutation(len(points))
        relaxed, hard = [], []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = PointBatch.from_clouds([points[i] for i in idx], dtype=dtype)
            work.params = [w.astype(dtype) for w in model.net.params]
            logits, cache = work.forward(batch)
            p = softmax(logits.astype(np.float64))
            sel = gumbel_select(p, tau, draw_uniforms(rng, p.shape))
            c = cost[idx]
            relaxed.append(float((sel.soft * c).sum(-1).mean()))
            hard.append(float((sel.hard * c).sum(-1).mean()))
            grads = work.backward(cache, _relaxed_logit_grad(p, sel.soft, c, tau).astype(dtype))
            opt.step([g.astype(np.float64) for g in grads], lr)
        sizes = [min(config.batch_size, len(order) - lo) for lo in range(0, len(order), config.batch_size)]
        history.append(
            {
                "epoch": epoch + 1,
                "tau": tau,
                "lr": lr,
                "objective": float(np.average(relaxed, weights=sizes)),
                "hard_objective": float(np.average(hard, weights=sizes)),
            }
        )
    model.meta = {
        "lambda": config.lam,
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": [config.lr, config.lr_late, config.lr_drop_epoch],
        "schedule": asdict(schedule),
        "precision": config.precision,
    }
    return model, history


def predict_indices(model: PredictorModel, clouds: Sequence[PointCloud], chunk: int = 256) -> np.ndarray:
    """Index into ``model.levels`` of the most probable level, no noise."""
    out = []
    for lo in range(0, len(clouds), chunk):
        out.append(np.argmax(model.probs(clouds[lo : lo + chunk]), axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def predict_depth(model: PredictorModel, cloud: PointCloud) -> int:
    return model.levels[int(predict_indices(model, [cloud])[0])]


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kinks: int  # perturbations that crossed a ReLU or max-pool switch
    grad_norm: float


def _segment_max_batched(a: np.ndarray, starts: np.ndarray):
    """``segment_max`` over axis 1 of an (M, N, C) stack."""
    m = np.maximum.reduceat(a, starts, axis=1)
    n = a.shape[1]
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
    rows = np.where(a == m[:, seg], np.arange(n)[None, :, None], n)
    return m, np.minimum.reduceat(rows, starts, axis=1)


class _Probe:
    """Base activations plus evaluators that restart the forward pass at a
    perturbed pre-activation for a whole stack of perturbations at once."""

    def __init__(self, net: PointNet, batch: PointBatch, cost, noise, tau):
        self.net, self.batch = net, batch
        self.cost, self.noise, self.tau = cost, noise, tau
        a = batch.points - 0.5
        self.point_in, self.point_pre = [], []
        for i in range(net.n_point_layers):
            w, b = net.point_layer(i)
            self.point_in.append(a)
            z = a @ w + b
            self.point_pre.append(z)
            a = relu(z)
        self.feat, self.arg = segment_max(a, batch.starts)
        h = self.feat
        self.head_in, self.head_pre = [], []
        for i in range(net.n_head_layers):
            w, b = net.head_layer(i)
            self.head_in.append(h)
            z = h @ w + b
            self.head_pre.append(z)
            h = relu(z)

    def from_point_pre(self, layer: int, z: np.ndarray):
        net = self.net
        kink = np.any((z > 0) != (self.point_pre[layer] > 0), axis=(1, 2))
        a = relu(z)
        for i in range(layer + 1, net.n_point_layers):
            w, b = net.point_layer(i)
            z = a @ w + b
            kink |= np.any((z > 0) != (self.point_pre[i] > 0), axis=(1, 2))
            a = relu(z)
        feat, arg = _segment_max_batched(a, self.batch.starts)
        kink |= np.any(arg != self.arg[None], axis=(1, 2))
        w, b = net.head_layer(0)
        return self.from_head_pre(0, feat @ w + b, kink)

    def from_head_pre(self, layer: int, z: np.ndarray, kink=None):
        net = self.net
        kink = np.zeros(len(z), dtype=bool) if kink is None else kink
        for i in range(layer, net.n_head_layers - 1):
            kink |= np.any((z > 0) != (self.head_pre[i] > 0), axis=(1, 2))
            w, b = net.head_layer(i + 1)
            z = relu(z) @ w + b
        return relaxed_objective(z, self.cost, self.noise, self.tau), kink

    def perturbed(self, param_index: int, flat: np.ndarray, delta: float):
        """Objective and kink flag with ``params[param_index].flat[flat] += delta``.

        A single weight only moves one column of its layer's pre-activation,
        so the next layer is updated by a rank-one correction.
        """
        net = self.net
        n_point = 2 * net.n_point_layers
        is_head = param_index >= n_point
        layer = (param_index - n_point) // 2 if is_head else param_index // 2
        shape = net.params[param_index].shape
        if param_index % 2 == 1:
            cols = flat
            shift = np.full((len(flat), 1), delta)
        else:
            rows, cols = np.unravel_index(flat, shape)
            shift = delta * (self.head_in if is_head else self.point_in)[layer][:, rows].T
        base_pre = (self.head_pre if is_head else self.point_pre)[layer]
        old = base_pre[:, cols].T  # (M, rows)
        new = old + shift
        kink = np.any((new > 0) != (old > 0), axis=1)
        n_layers = net.n_head_layers if is_head else net.n_point_layers
        if is_head and layer == n_layers - 1:
            z = np.repeat(base_pre[None], len(flat), axis=0)
            z[np.arange(len(flat)), :, cols] = new
            return self.from_head_pre(layer, z, kink)
        d_act = relu(new) - relu(old)
        if is_head:
            w, _ = net.head_layer(layer + 1)
            z = self.head_pre[layer + 1][None] + d_act[:, :, None] * w[cols][:, None, :]
            return self.from_head_pre(layer + 1, z, kink)
        if layer < n_layers - 1:
            w, _ = net.point_layer(layer + 1)
            z = self.point_pre[layer + 1][None] + d_act[:, :, None] * w[cols][:, None, :]
            f, k = self.from_point_pre(layer + 1, z)
            return f, k | kink
        # last point layer: only feature channel ``cols`` changes
        starts = self.batch.starts
        act = relu(new)
        feat = np.maximum.reduceat(act, starts, axis=1)
        n = act.shape[1]
        seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
        arg = np.minimum.reduceat(np.where(act == feat[:, seg], np.arange(n)[None], n), starts, axis=1)
        kink |= np.any(arg != self.arg[:, cols].T, axis=1)
        w, _ = net.head_layer(0)
        d_feat = feat - self.feat[:, cols].T
        z = self.head_pre[0][None] + d_feat[:, :, None] * w[cols][:, None, :]
        return self.from_head_pre(0, z, kink)


def gradient_check(
    model: PredictorModel | PointNet,
    clouds: Sequence,
    cost: np.ndarray,
    noise: np.ndarray,
    tau: float,
    *,
    step: float = 1e-4,
    head_only: bool = False,
    floor: float = 1e-7,
    chunk_elems: int = 2_000_000,
) -> GradCheckReport:
    """Compare the analytic gradient of the relaxed objective with central
    differences for every weight.

    ``cost`` is the per-sample ``lam * bpp + L`` matrix and ``noise`` the
    frozen Gumbel draws, both shaped (B, K).  Relative error is
    ``|a - n| / max(|a| + |n|, floor)``; perturbations that flip a ReLU or a
    max-pool winner are counted in ``n_kinks`` and skipped.
    """
    net = model.net if isinstance(model, PredictorModel) else model
    batch = PointBatch.from_clouds(clouds)
    cost = np.asarray(cost, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    logits, cache = net.forward(batch)
    p = softmax(logits)
    soft = softmax((p + noise) / tau)
    grads = net.backward(cache, _relaxed_logit_grad(p, soft, cost, tau))
    probe = _Probe(net, batch, cost, noise, tau)
    first = 2 * net.n_point_layers if head_only else 0
    worst, checked, kinks = 0.0, 0, 0
    for pi in range(first, len(net.params)):
        size = net.params[pi].size
        is_head = pi >= 2 * net.n_point_layers
        rows = probe.head_pre[0].shape[0] if is_head else probe.point_pre[0].shape[0]
        width = max(a.shape[1] for a in (probe.head_pre if is_head else probe.point_pre))
        per = max(1, chunk_elems // (rows * width))
        analytic = grads[pi].ravel()
        for lo in range(0, size, per):
            flat = np.arange(lo, min(size, lo + per))
            f_plus, k_plus = probe.perturbed(pi, flat, step)
            f_minus, k_minus = probe.perturbed(pi, flat, -step)
            numeric = (f_plus - f_minus) / (2 * step)
            ok = ~(k_plus | k_minus)
            a = analytic[flat][ok]
            n = numeric[ok]
            if len(a):
                rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
                worst = max(worst, float(rel.max()))
            checked += int(ok.sum())
            kinks += int((~ok).sum())
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads[first:]))
    return GradCheckReport(worst, checked, kinks, norm)
