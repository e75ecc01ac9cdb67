"""Acceptance criteria, one test each, every one printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines; the summary
is also printed at session end by ``conftest.py``.  The learned-policy
criteria (5-8) share one lambda sweep of 3 seeds x 6 lambdas that takes
roughly 20 minutes on one CPU core.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest
from oracles import adaptive_cross_entropy_bits, nearest_sq_brute

from pcmp.codec import DecodeStats, decode_cloud, encode_cloud, truncate_stream
from pcmp.evaluation import (
    Policy,
    evaluate_policy,
    oracle_indices,
    plan_partition,
    split_stream,
)
from pcmp.metrics import d1_psnr, nearest_sq_dist, nearest_sq_dist_brute
from pcmp.octree import build_octree, reconstruct
from pcmp.pointcloud import (
    SHAPE_KINDS,
    PointCloud,
    generate_shape,
    make_dataset,
    normalize,
)
from pcmp.predictor import (
    PredictorModel,
    TrainConfig,
    gradient_check,
    gumbel_noise,
    gumbel_select,
    train_predictor,
)
from pcmp.rangecoder import ContextModel, arith_decode, arith_encode
from pcmp.tasks import build_rate_loss_table, lambda_scale, train_task_network

RESULTS: list[str] = []

SWEEP_LAMBDAS = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
SEEDS = (0, 1, 2)
LEVELS = tuple(range(2, 9))
MAX_DEPTH = 8


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    RESULTS.append(line)
    print(line)


# ---------------------------------------------------------------- 1 and 2


@pytest.fixture(scope="module")
def codec_corpus():
    """1000 clouds: the six kinds cycled, sizes log-uniform in [64, 4096],
    depths uniform in [2, 8]."""
    rng = np.random.default_rng(20240601)
    corpus = []
    for i in range(1000):
        kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
        n = int(round(math.exp(rng.uniform(math.log(64), math.log(4096)))))
        depth = int(rng.integers(2, 9))
        item = generate_shape(kind, n, seed=int(rng.integers(2**31)), noise_sigma=float(rng.choice([0.0, 0.01])))
        cloud, _ = normalize(item.cloud)
        corpus.append((cloud, depth, encode_cloud(cloud, depth)))
    return corpus


def test_criterion_01_codec_lossless(codec_corpus):
    t0 = time.perf_counter()
    failures = checks = 0
    for cloud, n, stream in codec_corpus:
        for k in range(1, n + 1):
            tree, _ = decode_cloud(stream, k)
            checks += 1
            failures += tree != build_octree(cloud, k)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 120
    report("1", ok, f"{failures} failures in {checks} (cloud, k) decodes, {elapsed:.1f}s (budget 120s)")
    assert ok


def test_criterion_02_prefix_equivalence(codec_corpus):
    mismatches = byte_errors = checks = 0
    for _, n, stream in codec_corpus:
        for k in range(1, n + 1):
            full_stats, cut_stats = DecodeStats(), DecodeStats()
            tree_a, cloud_a = decode_cloud(stream, k, full_stats)
            tree_b, cloud_b = decode_cloud(truncate_stream(stream, k), k, cut_stats)
            checks += 1
            mismatches += not (tree_a == tree_b and cloud_a == cloud_b)
            expected = sum(len(s) for s in stream.segments[:k])
            byte_errors += not (full_stats.bytes_consumed == cut_stats.bytes_consumed == expected)
    ok = mismatches == 0 and byte_errors == 0
    report("2", ok, f"{mismatches} reconstruction mismatches, {byte_errors} byte-count errors in {checks} checks")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_entropy_bound():
    rng = np.random.default_rng(3)
    probs = np.array([0.4, 0.2, 0.15, 0.1, 0.06, 0.04, 0.03, 0.02])
    alphabet = rng.choice(256, size=len(probs), replace=False)
    symbols = alphabet[rng.choice(len(probs), size=100_000, p=probs)].astype(np.uint8)
    contexts = np.zeros(len(symbols), dtype=np.int64)
    payload = arith_encode(symbols, contexts, ContextModel(1))
    decoded = arith_decode(payload, contexts, len(symbols), ContextModel(1))
    ideal_bytes = adaptive_cross_entropy_bits(symbols.tolist(), contexts.tolist()) / 8
    bound = ideal_bytes * 1.02 + 64
    ok = len(payload) <= bound and np.array_equal(decoded, symbols)
    report("3", ok, f"coded {len(payload)} B vs replayed cross-entropy {ideal_bytes:.1f} B (bound {bound:.1f} B)")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04a_gradient_check():
    worst, kinks = 0.0, 0
    for draw in range(20):
        rng = np.random.default_rng(1000 + draw)
        model = PredictorModel(LEVELS, seed=draw)
        clouds = [rng.random((8, 3)) for _ in range(4)]
        cost = rng.uniform(0.0, 3.0, size=(4, len(LEVELS)))
        noise = gumbel_noise(rng.uniform(1e-6, 1 - 1e-6, size=(4, len(LEVELS))))
        rep = gradient_check(model, clouds, cost, noise, tau=float(rng.uniform(0.3, 3.0)))
        worst = max(worst, rep.max_rel_error)
        kinks += rep.n_kinks
    ok = worst < 1e-3
    report("4a", ok, f"max relative error {worst:.2e} over 20 draws (limit 1e-3; {kinks} kink-crossing steps skipped)")
    assert ok


def test_criterion_04b_gumbel_mean():
    rng = np.random.default_rng(4)
    eps = rng.random(1_000_000)
    eps = eps[eps > 0]
    mean = float(gumbel_noise(eps).mean())
    ok = abs(mean - 0.5772156649) < 0.01
    report("4b", ok, f"Monte-Carlo Gumbel mean {mean:.4f} (target 0.5772 +- 0.01)")
    assert ok


def test_criterion_04c_sharpening():
    rng = np.random.default_rng(5)
    tau = 0.001
    worst, bad_gaps = 1.0, []
    for _ in range(1000):
        p = rng.dirichlet(np.ones(len(LEVELS)))
        sel = gumbel_select(p, tau, rng.uniform(1e-12, 1.0, size=len(LEVELS)))
        assert len(np.unique(sel.scores)) == len(LEVELS)
        top = float(sel.soft.max())
        worst = min(worst, top)
        if top <= 0.99:
            s = np.sort(sel.scores)
            bad_gaps.append(s[-1] - s[-2])
    ok = worst > 0.99
    detail = f"min over 1000 trials of max(h) = {worst:.6f} at tau={tau} (need > 0.99)"
    if bad_gaps:
        # two scores closer than tau*ln(99) cannot give a winner weight above 0.99
        detail += f"; {len(bad_gaps)} trials had top-two score gaps {', '.join(f'{g:.1e}' for g in bad_gaps)} < tau*ln(99) = {tau * math.log(99):.1e}"
    report("4c", ok, detail)
    assert ok


# ---------------------------------------------------------------- sweep for 5-8


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    """Task network on its own raw split; predictors trained on 1800 clouds
    and scored on a 600-cloud held-out split."""
    cache = tmp_path_factory.mktemp("tables")
    task_train = make_dataset(300, seed=101)
    train = make_dataset(300, seed=202)
    held_out = make_dataset(100, seed=303)
    network = train_task_network(task_train, seed=0)
    train_table = build_rate_loss_table(train, network, LEVELS, MAX_DEPTH, cache_dir=cache)
    test_table = build_rate_loss_table(held_out, network, LEVELS, MAX_DEPTH, cache_dir=cache)
    scale = lambda_scale(train_table)
    results = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        for lam in SWEEP_LAMBDAS:
            eff = lam * scale
            model, _ = train_predictor(train, train_table, TrainConfig(eff, seed=seed))
            reports = {"learned": evaluate_policy(Policy.learned(model), held_out, test_table, eff)}
            reports["oracle"] = evaluate_policy(Policy.oracle(), held_out, test_table, eff)
            for lv in LEVELS:
                reports[f"fixed:{lv}"] = evaluate_policy(Policy.fixed(lv), held_out, test_table, eff)
            results[seed, lam] = reports
    elapsed = time.perf_counter() - t0
    for seed in SEEDS:
        for lam in SWEEP_LAMBDAS:
            r = results[seed, lam]
            best_fixed = min((v for k, v in r.items() if k.startswith("fixed")), key=lambda v: v.mean_objective)
            print(
                f"  seed {seed} lambda {lam:>4}: learned obj {r['learned'].mean_objective:.4f} "
                f"bpp {r['learned'].mean_bpp:.3f} acc {r['learned'].metric:.3f} depth {r['learned'].mean_depth:.2f} | "
                f"oracle {r['oracle'].mean_objective:.4f} | best fixed {best_fixed.policy} {best_fixed.mean_objective:.4f}"
            )
    return {"results": results, "scale": scale, "train_table": train_table, "test_table": test_table, "elapsed": elapsed}


@pytest.mark.slow
def test_criterion_05_oracle_dominance(sweep):
    violations = 0
    for reports in sweep["results"].values():
        o = reports["oracle"].mean_objective
        violations += sum(r.mean_objective < o for r in reports.values())
    ok = violations == 0
    report("5", ok, f"{violations} policies beat the oracle across {len(sweep['results'])} (seed, lambda) runs")
    assert ok


@pytest.mark.slow
def test_criterion_06_learned_quality(sweep):
    beat_fixed = near_oracle = both = 0
    runs = len(sweep["results"])
    ratios = []
    for reports in sweep["results"].values():
        learned = reports["learned"].mean_objective
        best_fixed = min(r.mean_objective for k, r in reports.items() if k.startswith("fixed"))
        oracle = reports["oracle"].mean_objective
        a, b = learned <= best_fixed, learned <= 1.10 * oracle
        beat_fixed += a
        near_oracle += b
        both += a and b
        ratios.append(learned / oracle)
    within_budget = sweep["elapsed"] < 30 * 60
    ok = both >= 0.8 * runs and within_budget
    report(
        "6",
        ok,
        f"{both}/{runs} runs meet both bounds (<= best fixed: {beat_fixed}, <= 1.10x oracle: {near_oracle}; "
        f"learned/oracle ratio {min(ratios):.2f}..{max(ratios):.2f}); sweep took {sweep['elapsed'] / 60:.1f} min",
    )
    assert ok


@pytest.mark.slow
def test_criterion_07_rate_saving(sweep):
    top = f"fixed:{LEVELS[-1]}"
    passing, lines = 0, []
    for seed in SEEDS:
        matched = [
            lam
            for lam in SWEEP_LAMBDAS
            if abs(sweep["results"][seed, lam]["learned"].metric - sweep["results"][seed, lam][top].metric) <= 0.01
        ]
        if not matched:
            lines.append(f"seed {seed}: no lambda within 1pp")
            continue
        lam = min(matched)  # the most conservative (highest-rate) matching point
        r = sweep["results"][seed, lam]
        ratio = r["learned"].mean_bpp / r[top].mean_bpp
        passing += ratio <= 0.85
        lines.append(f"seed {seed}: lambda {lam} bpp ratio {ratio:.3f}")
    ok = passing >= 2
    report("7", ok, f"{passing}/3 seeds save >= 15% bpp at matched accuracy ({'; '.join(lines)})")
    assert ok


@pytest.mark.slow
def test_criterion_08_selection_shift(sweep):
    oracle_ok = True
    for table in (sweep["train_table"], sweep["test_table"]):
        depths = [np.asarray(table.levels)[oracle_indices(table, lam * sweep["scale"])].mean() for lam in SWEEP_LAMBDAS]
        oracle_ok &= all(b <= a for a, b in zip(depths, depths[1:]))
    violations = []
    for seed in SEEDS:
        depths = [sweep["results"][seed, lam]["learned"].mean_depth for lam in SWEEP_LAMBDAS]
        violations.append(sum(b > a for a, b in zip(depths, depths[1:])))
    ok = oracle_ok and all(v <= 1 for v in violations)
    report("8", ok, f"oracle mean depth non-increasing: {oracle_ok}; learned adjacent-pair violations per seed {violations}")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_09_human_vision_invariance():
    clouds = [normalize(generate_shape(k, 1000, seed=i).cloud)[0] for i, k in enumerate(SHAPE_KINDS)]
    before = [encode_cloud(c, MAX_DEPTH).to_bytes() for c in clouds]
    data = make_dataset(8, seed=9)
    table_rng = np.random.default_rng(9)
    bpp_m = np.cumsum(table_rng.uniform(0.5, 2.0, size=(len(data), len(LEVELS))), axis=1)

    class _Table:
        levels = LEVELS
        bpp = bpp_m
        loss = table_rng.uniform(0.0, 1.0, size=bpp_m.shape)

    shallow, _ = train_predictor(data, _Table, TrainConfig(5.0, epochs=2, batch_size=16, seed=1))
    deep, _ = train_predictor(data, _Table, TrainConfig(0.0, epochs=2, batch_size=16, seed=2))
    after = [encode_cloud(c, MAX_DEPTH).to_bytes() for c in clouds]
    same_bytes = before == after
    concat_ok = True
    for c, full in zip(clouds, after):
        stream = encode_cloud(c, MAX_DEPTH)
        plan = plan_partition([(shallow, "a"), (deep, "b")], c, MAX_DEPTH)
        concat_ok &= b"".join(split_stream(stream, plan)) == full
    ok = same_bytes and concat_ok
    report("9", ok, f"stream bytes unchanged by predictor training: {same_bytes}; partitions concatenate to full stream: {concat_ok}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_psnr():
    rng = np.random.default_rng(10)
    exact = True
    for _ in range(20):
        a, b = rng.random((200, 3)), rng.random((200, 3))
        fast = nearest_sq_dist(a, b)
        exact &= np.array_equal(fast, nearest_sq_dist_brute(a, b))
        exact &= np.array_equal(fast, np.array(nearest_sq_brute(a.tolist(), b.tolist())))
    monotone = 0
    for i in range(1000):
        kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
        cloud, _ = normalize(generate_shape(kind, int(rng.integers(64, 512)), seed=i, noise_sigma=0.01).cloud)
        k = int(rng.integers(1, 8))
        p_k = d1_psnr(cloud, reconstruct(build_octree(cloud, k)), peak=1.0).d1_psnr
        p_k1 = d1_psnr(cloud, reconstruct(build_octree(cloud, k + 1)), peak=1.0).d1_psnr
        monotone += p_k1 >= p_k
    ex = d1_psnr(PointCloud([[0, 0, 0]]), PointCloud([[0.1, 0, 0]]), peak=1.0)
    ok = exact and monotone >= 990 and ex.d1_psnr == 20.0
    report("10", ok, f"k-d tree == brute force: {exact}; depth monotone on {monotone}/1000; example {ex.d1_psnr!r} dB")
    assert ok
