"""``pcmp`` command line: encode/decode/info on single clouds plus the batch
pipeline synth -> train-task -> build-table -> train-predictor -> eval/rd-curve.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 corrupt stream.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from ._util import atomic_write, fnv1a64, write_json
from .codec import Bitstream, bpp, decode_cloud, encode_cloud, header_fields, level_bpp
from .errors import ConfigError, CorruptStream, DataError, DepthOutOfRange, PcmpError
from .evaluation import (
    Policy,
    evaluate_policy,
    plan_partition,
    rd_sweep,
    reports_to_csv,
    split_stream,
)
from .octree import MAX_DEPTH
from .pointcloud import (
    SHAPE_KINDS,
    NormalizationTransform,
    dataset_from_dir,
    load_cloud,
    make_dataset,
    normalize,
    ply_comments,
    save_dataset,
    write_cloud,
)
from .predictor import PredictorModel, TrainConfig, train_predictor
from .tasks import (
    RateLossTable,
    SegmentationNetwork,
    TaskNetwork,
    build_rate_loss_table,
    lambda_scale,
    train_segmentation_network,
    train_task_network,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CORRUPT = 0, 2, 3, 4
FRAME_COMMENT = "pcmp-frame"


@dataclass
class RunConfig:
    subcommand: str
    args: dict = field(default_factory=dict)

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "RunConfig":
        args = {k: v for k, v in vars(ns).items() if k not in ("func", "command")}
        return cls(ns.command, args)

    def to_json(self) -> dict:
        return asdict(self)


def file_hash(path) -> str:
    p = Path(path)
    if p.is_dir():
        return fnv1a64(b"".join(fnv1a64(f.read_bytes()).encode() for f in sorted(p.iterdir()) if f.is_file()))
    return fnv1a64(p.read_bytes())


def write_sidecar(out, config: RunConfig, inputs=(), **extra) -> None:
    doc = {"config": config.to_json(), "inputs": {str(p): file_hash(p) for p in inputs}, "version": __version__}
    doc.update(extra)
    write_json(Path(str(out) + ".json"), doc)


# ---------------------------------------------------------------- parsing


def parse_levels(text: str) -> tuple[int, ...]:
    """``lo..hi`` (inclusive) or a comma list."""
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            levels = tuple(range(lo, hi + 1))
        else:
            levels = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"--levels expects lo..hi or a comma list, got {text!r}") from None
    if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < 1:
        raise ConfigError(f"--levels needs at least two increasing depths >= 1, got {text!r}")
    return levels


def parse_lambdas(text: str) -> list[float]:
    try:
        lams = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--lambdas expects a comma list of numbers, got {text!r}") from None
    if not lams or any(v < 0 for v in lams):
        raise ConfigError("--lambdas needs at least one non-negative value")
    return lams


def _check_depth(depth: int) -> int:
    if not 1 <= depth <= MAX_DEPTH:
        raise ConfigError(f"--depth must lie in [1, {MAX_DEPTH}], got {depth}")
    return depth


def _resolve_scale(text: str, table: RateLossTable) -> float:
    if text == "auto":
        return lambda_scale(table)
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"--lambda-scale expects a number or 'auto', got {text!r}") from None
    if not v > 0:
        raise ConfigError("--lambda-scale must be positive")
    return v


def _load_task_network(path):
    data = Path(path).read_bytes()[:4]
    if data == b"TSEG":
        return SegmentationNetwork.load(path)
    try:
        return TaskNetwork.load(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_dataset(path):
    try:
        return dataset_from_dir(path)
    except FileNotFoundError:
        raise DataError(f"{path}: not a dataset directory (missing index.json)") from None


# ---------------------------------------------------------------- commands


def cmd_encode(ns, cfg) -> int:
    depth = _check_depth(ns.depth)
    cloud = load_cloud(ns.input, ns.format)
    transform = None
    for c in ply_comments(ns.input) if str(ns.input).lower().endswith(".ply") else []:
        tokens = c.split()
        if tokens[:1] == [FRAME_COMMENT] and len(tokens) == 5:
            transform = NormalizationTransform(tuple(float.fromhex(t) for t in tokens[1:4]), float.fromhex(tokens[4]))
    stream = encode_cloud(cloud, depth, transform)
    atomic_write(ns.out, stream.to_bytes())
    print(f"{'level':>5} {'bytes':>8} {'bpp':>10}")
    for level, (n, b) in enumerate(zip(stream.lengths, level_bpp(stream)), 1):
        print(f"{level:>5} {n:>8} {b:>10.4f}")
    print(f"total {stream.header_size + stream.payload_size} bytes, {bpp(stream, include_header=True):.4f} bpp incl. header")
    return EXIT_OK


def _read_stream(path, partial=False) -> Bitstream:
    return Bitstream.from_bytes(Path(path).read_bytes(), partial=partial)


def cmd_decode(ns, cfg) -> int:
    stream = _read_stream(ns.input, partial=ns.depth is not None)
    depth = stream.max_depth if ns.depth is None else ns.depth
    if not 1 <= depth <= stream.max_depth:
        raise ConfigError(f"--depth must lie in [1, {stream.max_depth}], got {depth}")
    _, cloud = decode_cloud(stream, depth)
    tf = stream.transform
    frame = " ".join([FRAME_COMMENT, *(float(v).hex() for v in tf.offset), float(tf.scale).hex()])
    write_cloud(cloud, ns.out, ns.format, comments=[frame])
    print(f"decoded {len(cloud)} points at depth {depth}")
    return EXIT_OK


def cmd_info(ns, cfg) -> int:
    data = Path(ns.input).read_bytes()
    stream = Bitstream.from_bytes(data)
    fields = header_fields(stream)
    fields["file_size"] = len(data)
    fields["level_bpp"] = level_bpp(stream)
    if ns.json:
        print(json.dumps(fields, indent=2))
        return EXIT_OK
    for k in ("magic", "version", "max_depth", "point_count", "offset", "scale", "header_size", "payload_size", "file_size"):
        print(f"{k:>13}: {fields[k]}")
    print(f"{'level':>5} {'nodes':>8} {'bytes':>8} {'cum bpp':>10}")
    for i, (n, b, c) in enumerate(zip(stream.symbol_counts, stream.lengths, fields["level_bpp"]), 1):
        print(f"{i:>5} {n:>8} {b:>8} {c:>10.4f}")
    return EXIT_OK


def cmd_synth(ns, cfg) -> int:
    if not 2 <= ns.classes <= len(SHAPE_KINDS):
        raise ConfigError(f"--classes must lie in [2, {len(SHAPE_KINDS)}]")
    if ns.per_class < 1 or ns.points < 8:
        raise ConfigError("--per-class must be >= 1 and --points >= 8")
    data = make_dataset(ns.per_class, ns.points, ns.seed, ns.noise, SHAPE_KINDS[: ns.classes])
    save_dataset(data, ns.out)
    write_json(Path(ns.out) / "run.json", {"config": cfg.to_json(), "version": __version__})
    print(f"wrote {len(data)} clouds to {ns.out}")
    return EXIT_OK


def cmd_train_task(ns, cfg) -> int:
    data = _load_dataset(ns.data)
    if ns.task == "classification":
        net = train_task_network(data, ns.epochs, ns.seed)
    else:
        net = train_segmentation_network(data, ns.epochs, ns.seed)
    net.save(ns.out)
    write_sidecar(ns.out, cfg, [ns.data], task=net.task_id, network_hash=net.digest())
    print(f"{net.task_id} network {net.digest()} -> {ns.out}")
    return EXIT_OK


def cmd_build_table(ns, cfg) -> int:
    depth = _check_depth(ns.depth)
    levels = parse_levels(ns.levels)
    if levels[-1] > depth:
        raise ConfigError(f"--levels must not exceed --depth {depth}")
    data = _load_dataset(ns.data)
    net = _load_task_network(ns.model)
    table = build_rate_loss_table(data, net, levels, depth)
    table.meta = {**table.meta, "run_config": cfg.to_json()}
    table.save(ns.out)
    print(f"table: {len(table)} samples x {len(levels)} levels -> {ns.out}")
    return EXIT_OK


def _train_config(ns, lam: float, seed: int) -> TrainConfig:
    if ns.epochs < 1 or ns.batch < 1:
        raise ConfigError("--epochs and --batch must be positive")
    lr_drop = max(1, round(ns.epochs * 0.8))
    return TrainConfig(lam=lam, epochs=ns.epochs, batch_size=ns.batch, lr_drop_epoch=lr_drop, seed=seed)


def cmd_train_predictor(ns, cfg) -> int:
    data = _load_dataset(ns.data)
    table = RateLossTable.load(ns.table)
    if ns.lam < 0:
        raise ConfigError("--lambda must be non-negative")
    lam = ns.lam * _resolve_scale(ns.lambda_scale, table)
    model, history = train_predictor(data, table, _train_config(ns, lam, ns.seed))
    model.meta["run_config"] = cfg.to_json()
    model.meta["history"] = history
    model.save(ns.out)
    print(f"lambda {lam:.6g}: objective {history[0]['hard_objective']:.4f} -> {history[-1]['hard_objective']:.4f}")
    return EXIT_OK


def _parse_policy(text: str):
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        try:
            return Policy.fixed(int(arg))
        except ValueError:
            raise ConfigError(f"policy fixed needs a level, e.g. fixed:5 (got {text!r})") from None
    if kind == "oracle":
        return Policy.oracle()
    if kind == "learned":
        if not arg:
            raise ConfigError("policy learned needs a model path, e.g. learned:pred.pmdl")
        return Policy.learned(PredictorModel.load(arg))
    raise ConfigError(f"unknown policy {text!r}; use fixed:K, oracle or learned:PATH")


def cmd_eval(ns, cfg) -> int:
    data = _load_dataset(ns.data)
    table = RateLossTable.load(ns.table)
    lam = ns.lam * _resolve_scale(ns.lambda_scale, table)
    policies = [_parse_policy(p) for p in (ns.policy or ["oracle"])]
    network = _load_task_network(ns.task_model) if ns.task_model else None
    reports = [evaluate_policy(p, data, table, lam, network=network) for p in policies]
    atomic_write(ns.out, reports_to_csv(reports).encode("utf-8"))
    inputs = [ns.table] + [p.partition(":")[2] for p in ns.policy or [] if p.startswith("learned:")]
    write_sidecar(ns.out, cfg, inputs, lambda_effective=lam, selection={r.policy: r.selection for r in reports})
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK


def cmd_rd_curve(ns, cfg) -> int:
    data = _load_dataset(ns.data)
    table = RateLossTable.load(ns.table)
    scale = _resolve_scale(ns.lambda_scale, table)
    lams = parse_lambdas(ns.lambdas)
    learned = {}
    if not ns.no_learned:
        for lam in lams:
            learned[lam * scale], _ = train_predictor(data, table, _train_config(ns, lam * scale, ns.seed))
    reports = rd_sweep([lam * scale for lam in lams], data, table, learned)
    atomic_write(ns.out, reports_to_csv(reports).encode("utf-8"))
    write_sidecar(ns.out, cfg, [ns.table], lambda_scale=scale)
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK


def cmd_plan(ns, cfg) -> int:
    depth = _check_depth(ns.depth)
    cloud = load_cloud(ns.input, ns.format)
    stream = encode_cloud(cloud, depth)
    tasks = []
    for spec in ns.predictor:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--predictor expects NAME=PATH, got {spec!r}")
        tasks.append((PredictorModel.load(path), name))
    normalized, _ = normalize(cloud)
    plan = plan_partition(tasks, normalized, depth)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (cut, chunk) in enumerate(zip(plan.cuts, split_stream(stream, plan))):
        atomic_write(out / f"part{i}-upto{cut}.bin", chunk)
    write_json(out / "plan.json", {"config": cfg.to_json(), "tasks": plan.tasks, "cuts": plan.cuts, "full_depth": depth})
    for task_id, d in plan.tasks:
        print(f"{task_id}: depth {d}, {stream.prefix_size(d)} payload bytes")
    print(f"human vision: depth {depth}, {stream.payload_size} payload bytes")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcmp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        return p

    p = add("encode", cmd_encode, "encode an XYZ/PLY cloud into a .pcmp stream")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--format", choices=["xyz", "ply"])

    p = add("decode", cmd_decode, "decode a stream (or a prefix of it) to XYZ/PLY")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int)
    p.add_argument("--format", choices=["xyz", "ply"])

    p = add("info", cmd_info, "print header fields and per-level sizes")
    p.add_argument("input")
    p.add_argument("--json", action="store_true")

    p = add("synth", cmd_synth, "generate a labeled synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=len(SHAPE_KINDS))
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)

    p = add("train-task", cmd_train_task, "train and freeze a task network on raw clouds")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["classification", "segmentation"], default="classification")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)

    p = add("build-table", cmd_build_table, "per-sample bpp and task loss at each candidate depth")
    p.add_argument("data")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--levels", default="2..8")

    for name, func, help in (
        ("train-predictor", cmd_train_predictor, "train a depth predictor for one lambda"),
        ("rd-curve", cmd_rd_curve, "train predictors over a lambda sweep and report all policies"),
    ):
        p = add(name, func, help)
        p.add_argument("data")
        p.add_argument("table")
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch", type=int, default=48)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--lambda-scale", default="1", help="multiplier for lambda values, or 'auto' (from the table)")
        if name == "train-predictor":
            p.add_argument("--lambda", dest="lam", type=float, required=True)
        else:
            p.add_argument("--lambdas", default="0.1,0.5,1,2,5,10")
            p.add_argument("--no-learned", action="store_true", help="only oracle and fixed policies")

    p = add("eval", cmd_eval, "evaluate policies on a dataset/table pair")
    p.add_argument("data")
    p.add_argument("table")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--lambda-scale", default="1")
    p.add_argument("--policy", action="append", help="fixed:K, oracle or learned:PATH (repeatable)")
    p.add_argument("--task-model", help="re-decode prefixes and score them with this network")

    p = add("plan", cmd_plan, "split one stream into nested per-task prefixes")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--predictor", action="append", required=True, help="NAME=PATH (repeatable)")
    p.add_argument("--format", choices=["xyz", "ply"])
    return ap


def _error_kind(exc: Exception) -> str:
    name = type(exc).__name__
    words = "".join(" " + c.lower() if c.isupper() else c for c in name).strip()
    return words if words.endswith("error") else words + " error"


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    cfg = RunConfig.from_namespace(ns)
    try:
        return ns.func(ns, cfg)
    except (PcmpError, OSError) as exc:
        if isinstance(exc, (ConfigError, DepthOutOfRange)):
            code = EXIT_CONFIG
        elif isinstance(exc, CorruptStream):
            code = EXIT_CORRUPT
        else:
            code = EXIT_DATA
        print(f"pcmp {ns.command}: {_error_kind(exc)}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
