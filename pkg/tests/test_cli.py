import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gesm import data
from gesm.cli import load_params, main, time_inference
from gesm.trainer import GesmConfig

SMALL = ["--set", "hidden=8", "--set", "heads=2", "--set", "max_epochs=5", "--set", "patience=5",
         "--set", "steps=3"]


@pytest.fixture(scope="module")
def container(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.gesm"
    data.save(data.synth_citation(n=300, n_classes=3, n_features=120, seed=0), path)
    return path


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_outputs(container, tmp_path):
    assert run("train", "--data", container, "--out", tmp_path, "--seed", 3, *SMALL) == 0
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["type"] == "summary" and len(lines) == 6
    assert load_params(tmp_path / "params.npz").hidden == 8
    assert GesmConfig.from_file(tmp_path / "config.txt").seed == 3


def test_outputs_byte_identical(container, tmp_path):
    for sub in ("a", "b"):
        assert run("train", "--data", container, "--out", tmp_path / sub, "--seed", 1, *SMALL) == 0
        assert run("sweep-steps", "--data", container, "--out", tmp_path / sub, "--steps", "0,2",
                   *SMALL) == 0
        assert run("dump-embeddings", "--data", container, "--out", tmp_path / sub,
                   "--params", tmp_path / sub / "params.npz", *SMALL) == 0
    for name in ("report.jsonl", "params.npz", "config.txt", "sweep_steps.csv",
                 "embeddings_pre-softmax.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_multi_seed_train(container, tmp_path):
    assert run("train", "--data", container, "--out", tmp_path, "--seeds", 2, *SMALL) == 0
    rows = read_csv(tmp_path / "seeds.csv")
    assert rows[0] == ["seed", "test_metric"] and len(rows) == 3
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert summary["metrics"] == [float(r[1]) for r in rows[1:]]


def test_label_rate_train(container, tmp_path):
    assert run("train", "--data", container, "--out", tmp_path, "--label-rate", 0.05,
               "--val-count", 50, "--test-count", 100, *SMALL) == 0


def test_eval_matches_report(container, tmp_path):
    assert run("train", "--data", container, "--out", tmp_path, "--variant", "base", *SMALL) == 0
    summary = json.loads((tmp_path / "report.jsonl").read_text().splitlines()[-1])
    assert run("eval", "--data", container, "--out", tmp_path,
               "--params", tmp_path / "params.npz") == 0
    result = json.loads((tmp_path / "eval.json").read_text())
    assert result["metric"] == summary["test_metric"]


def test_sweep_steps_csv_round_trip(container, tmp_path):
    assert run("sweep-steps", "--data", container, "--out", tmp_path, "--steps", "0,1,4",
               *SMALL) == 0
    rows = read_csv(tmp_path / "sweep_steps.csv")
    assert rows[0] == ["steps", "train_acc", "val_acc", "test_acc"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 4]
    for r in rows[1:]:
        assert all(repr(float(x)) == x for x in r[1:])  # lossless float rendering


def test_sweep_steps_rejects_unsorted(container, tmp_path):
    assert run("sweep-steps", "--data", container, "--out", tmp_path, "--steps", "5,2") == 2


def test_sweep_label_rate(container, tmp_path):
    assert run("sweep-label-rate", "--data", container, "--out", tmp_path, "--rates", "0.03,0.1",
               "--steps", "2", "--val-count", 50, "--test-count", 100, *SMALL) == 0
    rows = read_csv(tmp_path / "sweep_label_rate.csv")
    assert rows[0] == ["rate", "steps", "train_acc", "val_acc", "test_acc"] and len(rows) == 3


def test_time_inference(container, tmp_path):
    assert run("time-inference", "--data", container, "--out", tmp_path, "--steps", "0,5,10",
               "--repeats", 3, *SMALL) == 0
    rows = read_csv(tmp_path / "time_inference.csv")
    assert rows[0] == ["steps", "median_ms", "min_ms", "max_ms"]
    for r in rows[1:]:
        assert float(r[2]) <= float(r[1]) <= float(r[3])
    assert run("time-inference", "--data", container, "--out", tmp_path, "--steps", "1",
               "--repeats", 2) == 2


def test_time_inference_growth(container):
    ds = data.load(container)
    rows = time_inference(ds, GesmConfig(hidden=16, heads=4), [0, 10, 20], repeats=5)
    med = {s: m for s, m, _, _ in rows}
    assert med[0] == min(med.values())
    assert med[20] > med[10]


def test_dump_embeddings_layers(container, tmp_path):
    assert run("dump-embeddings", "--data", container, "--out", tmp_path,
               "--layer", "pre-propagation", *SMALL) == 0
    Z = data.read_embeddings(tmp_path / "embeddings_pre-propagation.txt")
    assert Z.shape == (300, 8)
    assert run("dump-embeddings", "--data", container, "--out", tmp_path, *SMALL) == 0
    assert data.read_embeddings(tmp_path / "embeddings_pre-softmax.txt").shape == (300, 3)


def test_unknown_layer_is_usage_error(container, tmp_path):
    assert run("dump-embeddings", "--data", container, "--out", tmp_path, "--layer", "foo") == 2


def test_validate_data(container, tmp_path):
    assert run("validate-data", "--data", container, "--out", tmp_path) == 0
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert (stats["n"], stats["f"], stats["c"]) == (300, 120, 3)


def test_runtime_failure_exit_code(tmp_path):
    bad = tmp_path / "bad.gesm"
    bad.write_bytes(b"nope")
    assert run("validate-data", "--data", bad) == 1
    assert run("train", "--data", tmp_path / "missing.gesm", "--out", tmp_path) == 1


def test_usage_errors(container, tmp_path):
    assert run() == 2
    assert run("frobnicate") == 2
    assert run("train", "--data", container, "--out", tmp_path, "--set", "hidden") == 2
    assert run("train", "--data", container, "--out", tmp_path, "--set", "nokey=1") == 2
    assert run("train", "--data", container, "--out", tmp_path, "--set", "dropout=1.5") == 2


def test_config_file_and_preset(container, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("hidden=8\nheads=2\nmax_epochs=2\npatience=2\nsteps=1\n")
    assert run("train", "--data", container, "--out", tmp_path, "--preset", "cora-public",
               "--config", cfg) == 0
    written = GesmConfig.from_file(tmp_path / "config.txt")
    assert written.l2 == 0.003 and written.hidden == 8


def test_module_entry_point(container, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gesm", "validate-data", "--data", str(container)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n"] == 300
    proc = subprocess.run([sys.executable, "-m", "gesm", "dump-embeddings", "--data",
                           str(container), "--out", str(tmp_path), "--layer", "foo"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
