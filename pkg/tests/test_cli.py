import csv
import hashlib
import json

import numpy as np
import pytest

from helpers import tiny_manifest
from tabbench import cli, protocol


def _write_manifest(directory, raw):
    path = directory / "manifest.json"
    path.write_text(json.dumps(raw))
    return path


def _fake_cell(out, dataset, method, fold, auc, err=0.1, mode="tuned", trials=(0.5, 0.7)):
    cell = {
        "dataset": dataset, "method": method, "mode": mode, "fold_index": fold, "status": "ok",
        "test_auc": auc, "test_error": err, "wall_time_s": 36.0,
        "trials": [{"trial_index": i, "objective": v, "status": "complete", "config": {}, "duration_s": 1.0}
                   for i, v in enumerate(trials)],
    }
    protocol.write_cell(out, cell)


def _fake_results(out, table):
    for (dataset, method), aucs in table.items():
        for fold, auc in enumerate(aucs):
            _fake_cell(out, dataset, method, fold, auc)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    raw = tiny_manifest(d, datasets=("alpha", "beta", "gamma"), methods=("resnext", "resnet"),
                        folds={"outer": 2, "inner": 3}, trials=2)
    code = cli.main(["run", "--manifest", str(_write_manifest(d, raw)), "--parallelism", "1"])
    return d, code


def test_run_success(run_dir, capsys):
    d, code = run_dir
    assert code == cli.EXIT_OK
    matrix = (d / "results" / "matrix_tuned.csv").read_text().splitlines()
    assert matrix[0] == "dataset,resnext,resnet" and len(matrix) == 4


def test_run_progress_goes_to_stderr(tmp_path, capsys):
    raw = tiny_manifest(tmp_path, datasets=("alpha",), methods=("resnet",), folds={"outer": 2, "inner": 2},
                        mode="default")
    assert cli.main(["run", "--manifest", str(_write_manifest(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 0
    out, err = capsys.readouterr()
    assert out.strip().endswith("matrix_default.csv")
    lines = [x.split("\t") for x in err.strip().splitlines()]
    assert len(lines) == 2 and all(x[:2] == ["alpha", "resnet"] for x in lines)


def test_run_missing_csv(tmp_path, capsys):
    raw = tiny_manifest(tmp_path, datasets=("alpha",))
    raw["datasets"][0]["csv"] = "nope.csv"
    assert cli.main(["run", "--manifest", str(_write_manifest(tmp_path, raw))]) == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err
    assert not (tmp_path / "results").exists()


def test_run_bad_overrides(tmp_path):
    raw = tiny_manifest(tmp_path, datasets=("alpha",))
    path = _write_manifest(tmp_path, raw)
    assert cli.main(["run", "--manifest", str(path), "--max-trials", "0"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "--manifest", str(path), "--parallelism", "-1"]) == cli.EXIT_CONFIG


def test_run_partial_failure(tmp_path):
    raw = tiny_manifest(tmp_path, datasets=("alpha",), methods=("resnet",), folds={"outer": 2, "inner": 2})
    # a dataset whose rows all carry one of the two declared classes cannot be scored
    rows = list(csv.reader(open(tmp_path / "alpha.csv")))
    with open(tmp_path / "mono.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(rows[0])
        w.writerows(r[:-1] + ["0"] for r in rows[1:])
    raw["datasets"].append({"name": "mono", "csv": "mono.csv", "schema": "alpha.csv.schema.json"})
    assert cli.main(["run", "--manifest", str(_write_manifest(tmp_path, raw))]) == cli.EXIT_PARTIAL
    ok = json.loads((tmp_path / "results" / "alpha" / "resnet" / "tuned" / "fold0.json").read_text())
    bad = json.loads((tmp_path / "results" / "mono" / "resnet" / "tuned" / "fold0.json").read_text())
    assert ok["status"] == "ok" and bad["status"] == "failed"


def test_rank_outputs(run_dir, capsys):
    d, _ = run_dir
    res = d / "results"
    before = {p: p.read_bytes() for p in res.rglob("fold*.json")}
    assert cli.main(["rank", "--results", str(res)]) == 0
    report = json.loads((res / "rank_report.json").read_text())
    assert report["k"] == 2 and report["cd"] == pytest.approx(1.960 * np.sqrt(6 / 18))
    assert sorted(report["ranks"]) == ["resnet", "resnext"]
    header = (res / "cd_diagram.csv").read_text().splitlines()[0]
    assert header == "method,rank,group_id"
    assert (res / "summary.csv").read_text().startswith("method,mean_rank,mean_auc,median_auc,mad")
    assert "CD=" in capsys.readouterr().out
    first = {n: (res / n).read_bytes() for n in ("rank_report.json", "cd_diagram.csv", "summary.csv", "summary.txt")}
    assert cli.main(["rank", "--results", str(res)]) == 0
    assert first == {n: (res / n).read_bytes() for n in first}
    assert before == {p: p.read_bytes() for p in res.rglob("fold*.json")}


def test_rank_identical_methods_single_group(tmp_path):
    _fake_results(tmp_path, {(d, m): [0.8, 0.9] for d in ("a", "b", "c") for m in ("x", "y", "z")})
    assert cli.main(["rank", "--results", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "rank_report.json").read_text())
    assert set(report["ranks"].values()) == {2.0} and report["groups"] == [["x", "y", "z"]]


def test_rank_needs_two_methods(tmp_path, capsys):
    _fake_results(tmp_path, {("a", "x"): [0.8], ("b", "x"): [0.7]})
    assert cli.main(["rank", "--results", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["rank", "--results", str(tmp_path / "missing")]) == cli.EXIT_CONFIG


def test_adtm(tmp_path, capsys):
    _fake_cell(tmp_path, "a", "x", 0, 0.9, trials=(0.5, 0.4, 0.9))
    _fake_cell(tmp_path, "a", "y", 0, 0.9, trials=(0.6,))
    assert cli.main(["adtm", "--results", str(tmp_path), "--trials", "4"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "adtm.csv")))
    x = [float(r["mean_normalized_distance"]) for r in rows if r["method"] == "x"]
    y = [float(r["mean_normalized_distance"]) for r in rows if r["method"] == "y"]
    np.testing.assert_allclose(x, [0.8, 0.8, 0.0, 0.0])
    assert y == [0.0] * 4
    assert [r["trial"] for r in rows[:4]] == ["1", "2", "3", "4"]


def test_adtm_without_trials(tmp_path):
    _fake_cell(tmp_path, "a", "x", 0, 0.9, mode="default", trials=())
    assert cli.main(["adtm", "--results", str(tmp_path)]) == cli.EXIT_CONFIG


def test_compare(tmp_path, capsys):
    _fake_results(tmp_path, {("a", "x"): [0.8, 0.9], ("a", "y"): [0.7, 0.7], ("b", "x"): [0.6]})
    assert cli.main(["compare", "--results", str(tmp_path), "--a", "x", "--b", "x"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "compare_x_vs_x.csv")))
    assert all(r["error_rate_A"] == r["error_rate_B"] and r["auc_A"] == r["auc_B"] for r in rows)
    assert cli.main(["compare", "--results", str(tmp_path), "--a", "x", "--b", "y"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "compare_x_vs_y.csv")))
    assert [r["dataset"] for r in rows] == ["a"] and float(rows[0]["auc_A"]) == pytest.approx(0.85)
    assert cli.main(["compare", "--results", str(tmp_path), "--a", "x", "--b", "nope"]) == cli.EXIT_CONFIG


def test_fetch(tmp_path, capsys, monkeypatch):
    src = tmp_path / "remote.csv"
    src.write_text("a,b\n1,2\n")
    url = src.as_uri()
    monkeypatch.setenv("BENCH_CACHE_DIR", str(tmp_path / "cache"))
    assert cli.main(["fetch", "--url", url]) == 0
    first = capsys.readouterr().out.strip()
    assert first.endswith(f"{hashlib.sha256(url.encode()).hexdigest()}/data.csv")
    src.unlink()  # the second call must be served from the cache
    assert cli.main(["fetch", "--url", url]) == 0
    assert capsys.readouterr().out.strip() == first
    assert cli.main(["fetch", "--url", (tmp_path / "gone.csv").as_uri(), "--cache", str(tmp_path / "c2")]) == 1


def test_usage_errors(capsys):
    assert cli.main([]) == cli.EXIT_CONFIG
    assert cli.main(["rank"]) == cli.EXIT_CONFIG
    assert cli.main(["--help"]) == cli.EXIT_OK
