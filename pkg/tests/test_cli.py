import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from rampscreen.cli import main, parse_synthetic, UsageError
from rampscreen.dataio import make_synthetic, save_libsvm

GOLDEN = Path(__file__).parent / "golden"


def _headers():
    out = {}
    for line in (GOLDEN / "headers.txt").read_text().splitlines():
        name, magic, cols = line.split("|")
        out[name] = (magic, cols)
    return out


def _shape(obj):
    if isinstance(obj, dict):
        return {k: _shape(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return "list"
    if isinstance(obj, str):
        return "string"
    if obj is None:
        return "null"
    return "number"


def _matches(shape, golden):
    if isinstance(golden, dict):
        return isinstance(shape, dict) and shape.keys() == golden.keys() and all(
            _matches(shape[k], golden[k]) for k in golden)
    return shape in golden.split("|")


def _check_header(path, name):
    magic, cols = _headers()[name]
    lines = Path(path).read_text().splitlines()
    assert lines[0] == magic
    assert lines[1] == cols


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--synthetic", "120:0.1:3", "--C", "1", "--out-dir", str(out)]) == 0
    return out


def test_train_outputs(trained):
    for name in ("model.txt", "metrics.json", "trajectory.csv", "trace.csv"):
        assert (trained / name).exists()
    assert not list(trained.glob("*.tmp"))
    rec = json.loads((trained / "metrics.json").read_text())
    assert _matches(_shape(rec), json.loads((GOLDEN / "metrics_schema.json").read_text()))
    assert rec["schema"] == "rampscreen-metrics v1"
    assert rec["results"]["status"] == "converged"
    _check_header(trained / "trajectory.csv", "trajectory.csv")
    _check_header(trained / "trace.csv", "trace.csv")


def test_train_reproducible(tmp_path):
    recs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        main(["train", "--synthetic", "100:0.1:3", "--out-dir", str(out)])
        rec = json.loads((out / "metrics.json").read_text())
        rec.pop("timing")
        recs.append((rec, (out / "model.txt").read_text()))
    assert recs[0] == recs[1]


def test_predict_round_trip(trained, tmp_path, capsys):
    data = tmp_path / "d.libsvm"
    save_libsvm(make_synthetic(30, 0.0, 3.0, 9), data)
    pred = tmp_path / "p.csv"
    rc = main(["predict", "--model", str(trained / "model.txt"), "--data", str(data),
               "--out", str(pred)])
    assert rc == 0
    _check_header(pred, "predictions.csv")
    rows = list(csv.DictReader(pred.read_text().splitlines()[1:]))
    assert len(rows) == 30 and {r["label"] for r in rows} <= {"1", "-1"}
    assert "accuracy" in capsys.readouterr().err


def test_predict_kernel_mismatch(trained, tmp_path):
    data = tmp_path / "d.libsvm"
    save_libsvm(make_synthetic(5, 0.0, 3.0, 1), data)
    assert main(["predict", "--model", str(trained / "model.txt"), "--data", str(data),
                 "--kernel", "linear"]) == 2


def test_bench(tmp_path):
    out = tmp_path / "b"
    rc = main(["bench", "--synthetic", "80:0.1:3", "--C", "0.1", "1", "--gamma", "0.5",
               "--modes", "none", "safe", "--out-dir", str(out)])
    assert rc == 0
    _check_header(out / "bench.csv", "bench.csv")
    rows = list(csv.DictReader((out / "bench.csv").read_text().splitlines()[1:]))
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert len(list((out / "trajectories").glob("*.csv"))) == 4


def test_bench_needs_data(tmp_path):
    assert main(["bench", "--out-dir", str(tmp_path)]) == 2


@pytest.mark.parametrize("argv,code", [
    (["train", "--synthetic", "x"], 2),
    (["train", "--synthetic", "50", "--C", "-1"], 2),
    (["train", "--synthetic", "50", "--s", "0.3"], 2),
    (["train", "--data", "/nonexistent/file"], 1),
])
def test_errors(argv, code, tmp_path):
    assert main(argv + ["--out-dir", str(tmp_path)]) == code


def test_bad_libsvm_file(tmp_path):
    bad = tmp_path / "bad.libsvm"
    bad.write_text("+1 1:0.5\nfoo 2:1\n")
    assert main(["train", "--data", str(bad), "--out-dir", str(tmp_path)]) == 1


def test_parse_synthetic():
    assert parse_synthetic("100") == (100, 0.05, 6.0)
    assert parse_synthetic("100:0.1:3") == (100, 0.1, 3.0)
    with pytest.raises(UsageError):
        parse_synthetic("1:2:3:4")


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rampscreen.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
