import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

import vmfprobe.harness as H
from vmfprobe import cli
from vmfprobe.losses import LossBreakdown

TINY = {"version": 1, "epochs": 2, "classes": 3, "n_per_class": 8, "batch_size": 8,
        "trunk_widths": [16], "embed_dim": 4, "head_width": 4}


def run(tmp_path, *argv):
    return cli.main(["--runs-dir", str(tmp_path / "runs"), *argv])


def only_run_dir(tmp_path):
    dirs = list((tmp_path / "runs").iterdir())
    assert len(dirs) == 1
    return dirs[0]


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return path


def test_train_writes_run_directory(tmp_path):
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "c.json", TINY))) == 0
    out = only_run_dir(tmp_path)
    for name in ("metrics.json", "metrics.csv", "losses.csv", "run.json", "config.json", "checkpoints/final.ckpt"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["epochs"] == 2 and metrics["run_id"] == out.name


def test_invalid_config_exits_2(tmp_path):
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "c.json", {**TINY, "batch_size": 1}))) == 2
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "d.json", {"epochs": 2}))) == 2
    assert run(tmp_path, "train", "--config", str(tmp_path / "missing.json")) == 2
    assert run(tmp_path, "gen-data", "--config", str(write(tmp_path, "g.json", {"version": 1, "colour": 1}))) == 2


def test_sample_vmf(tmp_path):
    assert run(tmp_path, "sample-vmf", "--dim", "3", "--kappa", "16", "--n", "2000", "--seed", "1") == 0
    out = only_run_dir(tmp_path)
    rows = list(csv.reader((out / "samples.csv").open()))
    assert rows[0] == ["x0", "x1", "x2"] and len(rows) == 2001
    xs = np.array(rows[1:], dtype=float)
    assert np.allclose(np.linalg.norm(xs, axis=1), 1.0, atol=1e-12)
    metrics = json.loads((out / "metrics.json").read_text())
    assert abs(metrics["kappa_mle"] - 16) / 16 < 0.1


def test_sample_vmf_validation(tmp_path):
    assert run(tmp_path, "sample-vmf", "--dim", "3", "--kappa", "-1", "--n", "10", "--seed", "0") == 2
    assert run(tmp_path, "sample-vmf", "--dim", "3", "--kappa", "1", "--n", "10", "--seed", "0", "--mu", "1,0") == 2


def test_check_grads_exit_codes(tmp_path, monkeypatch):
    assert run(tmp_path, "check-grads", "--trials", "3") == 0
    monkeypatch.setattr(cli, "GRAD_TOLERANCE", 0.0)
    assert run(tmp_path, "check-grads", "--trials", "3", "--seed", "1") == 3
    assert run(tmp_path, "check-grads", "--trials", "0") == 2


def test_numerical_abort_exits_3(tmp_path, monkeypatch):
    real = H.step_loss

    def broken(*args):
        loss, parts, leaves, tape = real(*args)
        return loss, LossBreakdown(math.nan, 0.0, 0.0, math.nan, parts.hyper), leaves, tape

    monkeypatch.setattr(H, "step_loss", broken)
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "c.json", TINY))) == 3


def test_eval_pipeline_and_bad_checkpoint(tmp_path):
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "c.json", TINY))) == 0
    ckpt = only_run_dir(tmp_path) / "checkpoints" / "final.ckpt"
    gen = tmp_path / "gen"
    assert cli.main(["--runs-dir", str(gen), "gen-data", "--config",
                     str(write(tmp_path, "g.json", {"version": 1, "classes": 3, "n_per_class": 10, "seed": 5}))]) == 0
    data = next(gen.iterdir())
    ev = ["--runs-dir", str(tmp_path / "ev")]
    assert cli.main([*ev, "eval-corruption", "--ckpt", str(ckpt), "--manifest", str(data / "manifest.json"),
                     "--data", str(data / "data")]) == 0
    assert cli.main([*ev, "eval-ood", "--ckpt", str(ckpt), "--in", str(data / "data"), "--out", str(data / "data")]) == 0
    # the clean 3-class split is probed without error, so the analysis is skipped
    assert cli.main([*ev, "eval-failure", "--ckpt", str(ckpt), "--data", str(data / "data")]) == 0
    skipped = json.loads(next(p for p in (tmp_path / "ev").glob("*/metrics.json") if "status" in p.read_text()).read_text())
    assert skipped["meta"]["status"] == "skipped: empty misclassified group"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main([*ev, "eval-ood", "--ckpt", str(bad), "--in", str(data / "data"), "--out", str(data / "data")]) == 2


def test_failure_group_too_small_exits_2(tmp_path):
    assert run(tmp_path, "train", "--config", str(write(tmp_path, "c.json", TINY))) == 0
    ckpt = only_run_dir(tmp_path) / "checkpoints" / "final.ckpt"
    gen = tmp_path / "gen"
    cfg = {"version": 1, "classes": 3, "n_per_class": 10, "seed": 5, "difficulty": 1.0}
    assert cli.main(["--runs-dir", str(gen), "gen-data", "--config", str(write(tmp_path, "g.json", cfg))]) == 0
    data = next(gen.iterdir()) / "data"
    assert cli.main(["--runs-dir", str(tmp_path / "ev"), "eval-failure", "--ckpt", str(ckpt), "--data", str(data)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "vmfprobe", "--runs-dir", str(tmp_path), "sample-vmf",
         "--dim", "4", "--kappa", "2", "--n", "5", "--seed", "0"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / proc.stdout.strip().split("/")[-1] / "samples.csv").exists()
