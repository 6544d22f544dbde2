import json

import pytest

from voltmesh.cli import METRIC_FIELDS, main, parse_fault, parse_grid, UsageError
from voltmesh.scenario import generate_synthetic, read_csv_table, save_scenario

FAST = ["--episodes", "3", "--batch-size", "16", "--warmup", "32"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--scenario", "synthetic:2x48", "--seed", "1", "--out", str(out), *FAST])
    assert code == 0
    return out


def test_train_artifacts(trained):
    assert (trained / "checkpoint.npz").is_file()
    curve = read_csv_table(trained / "learning_curve.csv")
    assert [r["episode"] for r in curve] == [0.0, 1.0, 2.0]
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["algo"] == "maddpg" and summary["n_chargers"] == 2


def test_train_is_deterministic(trained, tmp_path):
    assert main(["train", "--scenario", "synthetic:2x48", "--seed", "1", "--out", str(tmp_path), *FAST]) == 0
    assert (tmp_path / "learning_curve.csv").read_text() == (trained / "learning_curve.csv").read_text()


def test_evaluate_with_fault(trained, tmp_path):
    code = main(["evaluate", "--scenario", "synthetic:2x48", "--policy", str(trained / "checkpoint.npz"),
                 "--fault", "step=10,chargers=1", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "fault_report.json").read_text())
    assert rep["decentralized"] and rep["changed_actions"] == 0 and rep["steps_compared"] == 38
    rows = read_csv_table(tmp_path / "metrics.csv")
    assert list(rows[0]) == METRIC_FIELDS
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) >= 48


def test_evaluate_baselines_on_a_scenario_dir(tmp_path):
    sc_dir = save_scenario(generate_synthetic(2, 1, seed=2), tmp_path / "sc")
    for pol in ("uncontrolled", "rho"):
        out = tmp_path / pol
        assert main(["evaluate", "--scenario", str(sc_dir), "--policy", pol, "--out", str(out)]) == 0
        assert read_csv_table(out / "metrics.csv")[0]["policy"] == pol
    assert main(["evaluate", "--scenario", str(sc_dir), "--policy", "rho", "--window", "8",
                 "--trigger", "on_arrival", "--forecast", "persistence", "--out", str(tmp_path / "w")]) == 0


def test_arity_mismatch_is_a_runtime_error(trained, tmp_path, capsys):
    code = main(["evaluate", "--scenario", "synthetic:3x48", "--policy", str(trained / "checkpoint.npz"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "2 agents" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["train"],
    ["train", "--scenario", "synthetic:2x48", "--xi", "1.5"],
    ["train", "--scenario", "synthetic:2x48", "--episodes", "0"],
    ["train", "--scenario", "nowhere/at/all"],
    ["evaluate", "--scenario", "synthetic:2x48", "--policy", "missing.npz"],
    ["evaluate", "--scenario", "synthetic:2x48", "--policy", "rho", "--fault", "step=x"],
    ["evaluate", "--scenario", "synthetic:2x48", "--policy", "rho", "--window", "0"],
    ["sweep", "--param", "xi=1:0"],
    ["sweep", "--param", "gamma=0.5"],
    ["bogus"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)] if argv[0] != "bogus" else argv) == 2


def test_sweep_outputs(tmp_path):
    code = main(["sweep", "--param", "xi=0:1:2", "--scenario", "synthetic:2x48", "--repeat", "1",
                 "--eval-scenarios", "1", "--out", str(tmp_path), *FAST])
    assert code == 0
    rows = read_csv_table(tmp_path / "sweep.csv")
    assert [r["value"] for r in rows] == [0.0, 1.0]
    assert len(read_csv_table(tmp_path / "runs.csv")) == 2


def test_parsers():
    f = parse_fault("step=5,chargers=0,2")
    assert f.fault_step == 5 and list(f.faulty_chargers) == [0, 2]
    assert parse_grid("xi=0:1:3") == ("xi", [0.0, 0.5, 1.0])
    assert parse_grid("size=4,8") == ("size", [4, 8])
    with pytest.raises(UsageError):
        parse_grid("size=")
