import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from pcmp.cli import main
from pcmp.codec import Bitstream, header_size
from pcmp.pointcloud import PointCloud, load_cloud, write_cloud


@pytest.fixture()
def cloud_file(tmp_path):
    pts = np.random.default_rng(0).normal(size=(500, 3)) * [2.0, 1.0, 0.5] + 10
    path = tmp_path / "in.xyz"
    write_cloud(PointCloud(pts), path)
    return path


def run(*args):
    return main([str(a) for a in args])


def test_encode_info_decode(tmp_path, cloud_file, capsys):
    out = tmp_path / "a.pcmp"
    assert run("encode", cloud_file, "--out", out, "--depth", 7) == 0
    stream = Bitstream.from_bytes(out.read_bytes())
    assert stream.point_count == 500 and stream.max_depth == 7
    capsys.readouterr()
    assert run("info", out, "--json") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["payload_lengths"] == list(stream.lengths)
    assert info["file_size"] == out.stat().st_size == header_size(7) + sum(stream.lengths)
    assert run("decode", out, "--out", tmp_path / "d1.xyz", "--depth", 1) == 0
    assert 1 <= len(load_cloud(tmp_path / "d1.xyz")) <= 8
    assert run("decode", out, "--out", tmp_path / "full.ply") == 0
    full = load_cloud(tmp_path / "full.ply")
    lo, hi = full.points.min(0), full.points.max(0)
    orig = load_cloud(cloud_file).points
    assert np.all(np.abs(lo - orig.min(0)) < 0.2) and np.all(np.abs(hi - orig.max(0)) < 0.2)


def test_reencode_fixpoint(tmp_path, cloud_file):
    run("encode", cloud_file, "--out", tmp_path / "s0.pcmp", "--depth", 6)
    run("decode", tmp_path / "s0.pcmp", "--out", tmp_path / "r1.ply")
    run("encode", tmp_path / "r1.ply", "--out", tmp_path / "s1.pcmp", "--depth", 6)
    run("decode", tmp_path / "s1.pcmp", "--out", tmp_path / "r2.ply")
    run("encode", tmp_path / "r2.ply", "--out", tmp_path / "s2.pcmp", "--depth", 6)
    assert (tmp_path / "s1.pcmp").read_bytes() == (tmp_path / "s2.pcmp").read_bytes()


def test_exit_codes(tmp_path, cloud_file, capsys):
    out = tmp_path / "a.pcmp"
    run("encode", cloud_file, "--out", out, "--depth", 5)
    trunc = tmp_path / "t.pcmp"
    trunc.write_bytes(out.read_bytes()[:-3])
    assert run("decode", trunc, "--out", tmp_path / "x.xyz") == 4
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 two 3\n")
    capsys.readouterr()
    assert run("encode", bad, "--out", tmp_path / "b.pcmp") == 3
    assert "parse" in capsys.readouterr().err
    assert run("encode", cloud_file, "--out", tmp_path / "c.pcmp", "--depth", 0) == 2
    assert run("encode", tmp_path / "missing.xyz", "--out", tmp_path / "c.pcmp") == 3
    assert not (tmp_path / "c.pcmp").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--out", d / "data", "--per-class", 4, "--points", 48, "--seed", 1) == 0
    assert run("train-task", d / "data", "--out", d / "task.tnet", "--epochs", 5) == 0
    assert run("build-table", d / "data", d / "task.tnet", "--out", d / "t.csv", "--depth", 6, "--levels", "2..6") == 0
    assert run("train-predictor", d / "data", d / "t.csv", "--out", d / "p.pmdl", "--lambda", 1, "--lambda-scale", "auto", "--epochs", 3) == 0
    return d


def test_pipeline_outputs(pipeline):
    d = pipeline
    for name in ("data/run.json", "task.tnet.json", "t.csv.json", "p.pmdl"):
        assert (d / name).exists()
    meta = json.loads((d / "task.tnet.json").read_text())
    assert meta["config"]["subcommand"] == "train-task"


def test_eval_csv_reproducible(pipeline, capsys):
    d = pipeline
    args = ("eval", d / "data", d / "t.csv", "--lambda", 1, "--lambda-scale", "auto",
            "--policy", "fixed:4", "--policy", f"learned:{d / 'p.pmdl'}", "--policy", "oracle")
    assert run(*args, "--out", d / "e1.csv") == 0
    assert run(*args, "--out", d / "e2.csv", "--task-model", d / "task.tnet") == 0
    text = (d / "e1.csv").read_text()
    assert text == (d / "e2.csv").read_text()
    policies = [line.split(",")[1] for line in text.splitlines()[1:]]
    assert policies == ["fixed:4", "learned", "oracle"]
    assert run("eval", d / "data", d / "t.csv", "--lambda", 1, "--policy", "fixed:9", "--out", d / "e3.csv") == 2


def test_rd_curve_and_plan(pipeline, tmp_path):
    d = pipeline
    assert run("rd-curve", d / "data", d / "t.csv", "--out", tmp_path / "rd.csv", "--lambdas", "0.5,2", "--no-learned") == 0
    assert len((tmp_path / "rd.csv").read_text().splitlines()) == 1 + 2 * (1 + 5)
    shutil.copy(d / "data" / sorted(p.name for p in (d / "data").iterdir() if p.suffix == ".xyz")[0], tmp_path / "c.xyz")
    assert run("plan", tmp_path / "c.xyz", "--out", tmp_path / "plan", "--depth", 6, "--predictor", f"cls={d / 'p.pmdl'}") == 0
    plan = json.loads((tmp_path / "plan" / "plan.json").read_text())
    chunks = sorted((tmp_path / "plan").glob("part*.bin"))
    assert len(chunks) == len(plan["cuts"]) and plan["cuts"][-1] == 6
    assert run("plan", tmp_path / "c.xyz", "--out", tmp_path / "p2", "--predictor", "nopath") == 2


def test_console_script_version():
    exe = shutil.which("pcmp")
    cmd = [exe] if exe else [sys.executable, "-m", "pcmp.cli"]
    res = subprocess.run([*cmd, "--version"], capture_output=True, text=True, check=True)
    assert res.stdout.strip() == "0.1.0"
