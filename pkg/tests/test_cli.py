import csv
import subprocess
import sys

import numpy as np
import pytest

from ftkmeans.cli import main
from ftkmeans.matrix import HEADER_SIZE, mat_load


def run_cli(*args):
    return main(list(args))


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["phase", "metric", "value"]
    assert rows[1] == ["meta", "schema_version", "1"]
    return {(r[0], r[1]): r[2] for r in rows[1:]}


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "data.ftkm"
    rc = run_cli(
        "generate", "--rows", "1024", "--cols", "8", "--dist", "gm:4:0.1",
        "--seed", "5", "--out", str(path),
    )
    assert rc == 0
    return path


class TestGenerate:
    def test_file_size_and_determinism(self, tmp_path):
        a = tmp_path / "a.ftkm"
        b = tmp_path / "b.ftkm"
        for p in (a, b):
            rc = run_cli("generate", "--rows", "256", "--cols", "16",
                         "--precision", "single", "--seed", "9", "--out", str(p))
            assert rc == 0
        assert a.stat().st_size == 256 * 16 * 4 + HEADER_SIZE
        assert a.read_bytes() == b.read_bytes()

    def test_zero_rows_usage_error(self, tmp_path, capsys):
        rc = run_cli("generate", "--rows", "0", "--cols", "5",
                     "--out", str(tmp_path / "x.ftkm"))
        assert rc == 2
        assert "error" in capsys.readouterr().err

    def test_loadable(self, dataset):
        x = mat_load(dataset)
        assert x.shape == (1024, 8)


class TestCluster:
    def test_report_schema(self, dataset, tmp_path):
        rep = tmp_path / "report.csv"
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--report", str(rep))
        assert rc == 0
        rows = read_report(rep)
        assert rows[("config", "k")] == "4"
        assert rows[("result", "converged")] == "True"
        assert ("result", "assignments_sha256") in rows
        assert rows[("summary", "exit_code")] == "0"

    def test_ft_injection_matches_baseline(self, dataset, tmp_path):
        lab_a = tmp_path / "a.txt"
        lab_b = tmp_path / "b.txt"
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--labels-out", str(lab_a))
        assert rc == 0
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--ft", "abft+dmr", "--inject", "fixed:3",
                     "--labels-out", str(lab_b), "--report", str(tmp_path / "r.csv"),
                     "--compare")
        assert rc == 0
        assert lab_a.read_text() == lab_b.read_text()
        rows = read_report(tmp_path / "r.csv")
        assert int(rows[("ft", "corrections")]) > 0
        assert rows[("summary", "assignments_match_baseline")] == "True"
        assert ("summary", "overhead_pct") in rows

    def test_inject_without_protection_warns(self, dataset, capsys):
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--ft", "off", "--inject", "fixed:2@exp")
        assert rc == 0
        assert "without protection" in capsys.readouterr().err

    def test_tile_auto_without_table_warns(self, dataset, capsys):
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4")
        assert rc == 0
        assert "default config" in capsys.readouterr().err

    def test_explicit_tile(self, dataset):
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--tile", "128,64,16,32,64,16")
        assert rc == 0

    def test_events_csv(self, dataset, tmp_path):
        ev = tmp_path / "events.csv"
        rc = run_cli("cluster", "--input", str(dataset), "--k", "4",
                     "--ft", "abft", "--inject", "fixed:2", "--events-out", str(ev))
        assert rc == 0
        with open(ev, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "tile_i", "tile_j", "kind",
                           "loc_i", "loc_j", "delta"]
        assert len(rows) > 1

    def test_missing_input_usage_error(self, tmp_path, capsys):
        rc = run_cli("cluster", "--input", str(tmp_path / "nope.ftkm"), "--k", "2")
        assert rc == 2


class TestTuneBench:
    def test_tune_and_bench_small(self, tmp_path):
        shapes = tmp_path / "shapes.csv"
        shapes.write_text("1024,8,16\n1024,16,32\n")
        table = tmp_path / "table.csv"
        rc = run_cli("tune", "--shapes", str(shapes), "--out", str(table),
                     "--reps", "2", "--probe-m", "1024")
        assert rc == 0
        assert table.exists()
        report = tmp_path / "bench.csv"
        rc = run_cli("bench", "--grid", str(shapes), "--reps", "2",
                     "--tune-table", str(table), "--report", str(report))
        assert rc == 0
        with open(report, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:4] == ["M", "N", "K", "precision"]
        assert len(rows) == 3

    def test_bad_shapes_file(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        rc = run_cli("tune", "--shapes", str(empty), "--out", str(tmp_path / "t.csv"))
        assert rc == 2


class TestVerify:
    def test_quick_verify_passes(self, capsys):
        rc = run_cli("verify")
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS assignment-oracle" in out
        assert "PASS checksum-soundness" in out
        assert "PASS single-flip-correction" in out


def test_usage_exit_code():
    assert run_cli("unknown-command") == 2
    assert run_cli() == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "ftkmeans.cli", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "generate" in r.stdout


def test_uncorrectable_exit_code(tmp_path, monkeypatch):
    # two same-tile flips exceed the single-upset model; the cluster command
    # must exit 3 when any uncorrectable event is flagged
    import ftkmeans.cli as cli
    from ftkmeans.abft import DetectionEvent, DetectionReport
    from ftkmeans.kmeans import lloyd as real_lloyd

    data = tmp_path / "d.ftkm"
    assert run_cli("generate", "--rows", "128", "--cols", "4",
                   "--seed", "1", "--out", str(data)) == 0

    def wrapped(x, config, fault_spec=None):
        res = real_lloyd(x, config, fault_spec=fault_spec)
        res.report.events.append(
            DetectionEvent(iteration=0, tile=(0, 0), kind="detected-uncorrectable",
                           loc=(1, 1), delta=1.0)
        )
        return res

    monkeypatch.setattr(cli, "lloyd", wrapped)
    rc = run_cli("cluster", "--input", str(data), "--k", "2", "--ft", "abft")
    assert rc == 3
