import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from lazydp import cli, core

SMALL = ["--rows-e", "200", "--dim", "4", "--batch-b", "4", "--iters-n", "5", "--seed", "1"]


@pytest.fixture
def trace_path(tmp_path):
    path = tmp_path / "t.bin"
    assert cli.main(["gen", *SMALL, "--out", str(path)]) == 0
    return path


def test_gen_refuses_overwrite(trace_path):
    assert cli.main(["gen", *SMALL, "--out", str(trace_path)]) == 2
    assert cli.main(["gen", *SMALL, "--out", str(trace_path), "--force"]) == 0


def test_train_json_report(trace_path, tmp_path, capsys):
    report = tmp_path / "r.json"
    code = cli.main(["train", *SMALL, "--trace", str(trace_path), "--out", str(report),
                     "--algorithm", "dense"])
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["counters"]["rows_written"] == 200 * 5
    assert doc["config"]["algorithm"] == "dense"
    assert doc["notes"] == []


def test_train_csv_series(trace_path, capsys):
    assert cli.main(["train", *SMALL, "--trace", str(trace_path), "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["iteration"] for r in rows] == ["1", "2", "3", "4", "5"]


def test_unfinalized_run_is_flagged(trace_path, capsys):
    assert cli.main(["train", *SMALL, "--trace", str(trace_path), "--finalize", "off"]) == 0
    assert any("not private" in n for n in json.loads(capsys.readouterr().out)["notes"])


def test_sgd_run_is_flagged(trace_path, capsys):
    assert cli.main(["train", *SMALL, "--trace", str(trace_path), "--algorithm", "sgd"]) == 0
    assert any("non-private" in n for n in json.loads(capsys.readouterr().out)["notes"])


def test_dumps_compare_within_tolerance(trace_path, tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    for algo, dump in (("dense", a), ("lazydp-noans", b)):
        assert cli.main(["train", *SMALL, "--trace", str(trace_path), "--algorithm", algo,
                         "--dump", str(dump), "--out", str(tmp_path / "r.json")]) == 0
    capsys.readouterr()
    assert cli.main(["compare", str(a), str(b)]) == 0
    assert json.loads(capsys.readouterr().out)["within_tolerance"]


def test_compare_detects_difference(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    core.save_tables(a, [core.EmbeddingTable(np.ones((2, 2)))])
    core.save_tables(b, [core.EmbeddingTable(np.ones((2, 2)) * 1.001)])
    assert cli.main(["compare", str(a), str(b)]) == 1
    core.save_tables(b, [core.EmbeddingTable(np.ones((3, 2)))])
    assert cli.main(["compare", str(a), str(b)]) == 2


def test_config_file_and_flag_precedence(tmp_path, trace_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nrows_e = 200\ndim = 4\nbatch_b = 4\niters_n = 5\n"
                   "seed = 1\nalgorithm = eana\n")
    assert cli.main(["train", "--config", str(cfg), "--trace", str(trace_path),
                     "--algorithm", "dense"]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["algorithm"] == "dense"


def test_unknown_config_key(tmp_path, trace_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert cli.main(["train", "--config", str(cfg), "--trace", str(trace_path)]) == 2


@pytest.mark.parametrize("extra", [["--optimizer", "adam"], ["--algorithm", "foo"],
                                   ["--clip-c", "0"], ["--format", "xml"], ["--rows-e", "x"]])
def test_usage_errors(trace_path, extra):
    assert cli.main(["train", *SMALL, "--trace", str(trace_path), *extra]) == 2


def test_oversized_model_refused(tmp_path, capsys):
    trace = tmp_path / "big.bin"
    assert cli.main(["gen", "--rows-e", "100000", "--iters-n", "1", "--out", str(trace)]) == 0
    code = cli.main(["train", "--rows-e", "100000", "--iters-n", "1", "--trace", str(trace),
                     "--memory-cap", "1000000"])
    assert code == 2
    assert "12,800,000" in capsys.readouterr().err


def test_missing_trace(tmp_path):
    assert cli.main(["train", "--trace", str(tmp_path / "none.bin")]) == 2


def test_csv_trace_input(tmp_path, capsys):
    path = tmp_path / "t.csv"
    path.write_text("iteration,example,table,indices,target\n1,0,0,3,0.5\n2,0,0,1,0.0\n")
    code = cli.main(["train", "--rows-e", "4", "--batch-b", "1", "--iters-n", "2", "--dim", "2",
                     "--trace", str(path)])
    assert code == 0


def test_stats(capsys):
    assert cli.main(["stats", "--samples", "20000", "--delays", "1,3"]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]


def test_bench_sweep(capsys):
    code = cli.main(["bench", *SMALL, "--sweep", "rows_e", "100,300", "--algorithms",
                     "dense,lazydp", "--format", "csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [(r["rows_e"], r["algorithm"]) for r in rows] == [
        ("100", "dense"), ("100", "lazydp"), ("300", "dense"), ("300", "lazydp")]
    assert int(rows[2]["rows_written"]) == 300 * 5


def test_bench_mismatched_sweeps():
    assert cli.main(["bench", *SMALL, "--sweep", "rows_e", "100,300",
                     "--sweep", "pooling", "1"]) == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "lazydp", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    assert "bench" in out.stdout
