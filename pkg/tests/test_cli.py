import csv
import json
import subprocess
import sys

import pytest

from feddgsim.cli import CSV_COLUMNS, REPORT_COLUMNS, aggregate_report, main, write_metrics_csv
from feddgsim.partition import partition_heterogeneous

CONFIG = {
    "data": {"synthetic": {"kind": "mean-shift", "magnitudes": 1.0, "domains": 4, "classes": 3, "n_per_domain": 40, "features": 3}},
    "split": {"train_domains": [0, 1], "heldout_validation_domains": [2], "test_domains": [3]},
    "partition": {"lambda": 0.5, "clients": 3},
    "model": {"arch": "logistic"},
    "optimizer": {"kind": "sgd", "lr": 0.1},
    "rounds": 2,
    "batch_size": 16,
}


@pytest.fixture
def config_file(tmp_path):
    def write(**over):
        f = tmp_path / "config.json"
        f.write_text(json.dumps({**CONFIG, **over}))
        return str(f)

    return write


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_run(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", config_file(), "--out", str(out)]) == 0
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    rows = _read(out / "metrics.csv")
    assert {r["split"] for r in rows} >= {"train", "heldout_val", "dg_test", "selection"}
    sel = json.loads((out / "selection.json").read_text())
    assert sel["validation_split"] == "heldout_val"
    assert json.loads(capsys.readouterr().out) == sel
    for name in ("splits.json", "plan.json", "digests.json"):
        assert (out / "run_0" / name).exists()


def test_rerun_is_byte_identical(tmp_path, config_file):
    cfg = config_file(runs=2, method="scaffold")
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "3"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_flag_changes_results(tmp_path, config_file):
    cfg = config_file()
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    assert {r["seed"] for r in _read(tmp_path / "b" / "metrics.csv")} == {"7"}
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_bad_lambda_exits_two_and_names_field(tmp_path, config_file, capsys):
    code = main(["run", "--config", config_file(partition={"lambda": 1.5, "clients": 3}), "--out", str(tmp_path)])
    assert code == 2
    assert "lambda" in capsys.readouterr().err


def test_missing_config_file_exits_two(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_runtime_failure_exits_three(tmp_path, config_file, capsys):
    cfg = config_file(optimizer={"kind": "sgd", "lr": 1e308})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "round 1, client" in capsys.readouterr().err


def test_checkpoints_and_difficulty(tmp_path, config_file):
    out = tmp_path / "o"
    assert main(["run", "--config", config_file(checkpoints=True, difficulty=True), "--out", str(out)]) == 0
    assert len(list((out / "run_0" / "checkpoints").iterdir())) == 2
    doc = json.loads((out / "difficulty.json").read_text())
    assert doc["r_dg"] > 0 and set(doc["r_fl"]) == {"0.0", "0.1", "1.0"}


def test_difficulty_subcommand(tmp_path, config_file, capsys):
    assert main(["difficulty", "--config", config_file(), "--out", str(tmp_path), "--lambdas", "1,0"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["r_fl"]) == {"0.0", "1.0"}


# --- report ------------------------------------------------------------------


def _metrics(path, value, seed):
    row = dict(round=3, method="fedavg", **{"lambda": 0.1}, C=10, E=1, split="dg_test", metric="accuracy")
    write_metrics_csv(path, [{**row, "value": value, "seed": seed, "config_hash": "abc"}])
    return str(path)


def test_report_two_seeds(tmp_path):
    rows = aggregate_report([_metrics(tmp_path / "a.csv", 0.4, 0), _metrics(tmp_path / "b.csv", 0.6, 1)])
    assert len(rows) == 1
    assert rows[0]["mean"] == pytest.approx(0.5) and rows[0]["std"] == pytest.approx(0.1414, abs=1e-4)
    assert rows[0]["n"] == 2 and rows[0]["single_sample"] is False


def test_report_single_row(tmp_path):
    (row,) = aggregate_report([_metrics(tmp_path / "a.csv", 0.7, 0)])
    assert row["mean"] == 0.7 and row["std"] == 0.0 and row["single_sample"] is True


def test_report_cli(tmp_path, capsys):
    a, b = _metrics(tmp_path / "a.csv", 0.4, 0), _metrics(tmp_path / "b.csv", 0.6, 1)
    assert main(["report", a, b, "--out", str(tmp_path / "r.csv")]) == 0
    rows = _read(tmp_path / "r.csv")
    assert list(rows[0]) == list(REPORT_COLUMNS) and float(rows[0]["mean"]) == pytest.approx(0.5)


def test_report_errors(tmp_path, capsys):
    assert main(["report"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("round,value\n1,0.5\n")
    assert main(["report", str(bad)]) == 2


# --- verify-plan and sweeps --------------------------------------------------


def test_verify_plan(tmp_path, capsys):
    f = tmp_path / "plan.json"
    f.write_text(partition_heterogeneous([30, 20, 10], 4, 0.0, seed=0).to_json())
    assert main(["verify-plan", "--plan", str(f), "--sizes", "30,20,10"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["c1_holds"] and doc["c2_holds"]
    assert main(["verify-plan", "--plan", str(f), "--sizes", "30,20,11"]) == 0
    assert json.loads(capsys.readouterr().out)["c2_holds"] is False


def test_lambda_sweep_checks_constraints(tmp_path, config_file):
    out = tmp_path / "s"
    assert main(["sweep", "--config", config_file(), "--out", str(out), "--axis", "lambda", "--values", "1,0.1,0"]) == 0
    rows = _read(out / "summary.csv")
    assert [float(r["value"]) for r in rows] == [1.0, 0.1, 0.0]
    assert all(r["c2_holds"] == "true" for r in rows)
    assert rows[2]["c1_holds"] == "true"
    assert len({r["data_digest"] for r in rows}) == 1


def test_communication_sweep_file(tmp_path, config_file):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"axis": "communication", "values": [1, 2, 4]}))
    out = tmp_path / "s"
    assert main(["sweep", "--config", config_file(rounds=4), "--out", str(out), "--sweep", str(sweep), "--jobs", "2"]) == 0
    rows = _read(out / "summary.csv")
    assert [(r["rounds"], r["local_epochs"]) for r in rows] == [("1", "4"), ("2", "2"), ("4", "1")]


def test_sweep_needs_axis(tmp_path, config_file):
    assert main(["sweep", "--config", config_file(), "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path, config_file):
    res = subprocess.run(
        [sys.executable, "-m", "feddgsim", "run", "--config", config_file(rounds=1), "--out", str(tmp_path / "m")],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0, res.stderr
