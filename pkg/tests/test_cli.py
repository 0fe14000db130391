import json
from pathlib import Path

import pytest

from relayrank.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
QUICK = ["--set", "workload.horizon_s=1", "--set", "workload.n_users=300", "--set", "workload.offered_qps=50"]


def test_plan_worked_example(capsys):
    assert main(["plan", "-c", str(CONFIGS / "capacity_example.ini"), "--format", "json"]) == EXIT_OK
    row = json.loads(capsys.readouterr().out)
    assert (row["l_max"], row["q_admit_max"], row["q_max"]) == (160, 150.0, 1500.0)
    assert row["binding_constraint"] == "compute"


def test_plan_hbm_bound(capsys):
    assert main(["plan", "-c", str(CONFIGS / "capacity_example.ini"), "--set", "trigger.t_life=1.5",
                 "--format", "json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["binding_constraint"] == "hbm"


def test_verify_and_negative_control(capsys):
    assert main(["verify", "--trials", "5"]) == EXIT_OK
    assert main(["verify", "--trials", "5", "--corrupt"]) == EXIT_FAIL
    assert "fail" in capsys.readouterr().out


def test_config_errors_exit_2(capsys):
    assert main(["plan", "--set", "trigger.r1=7"]) == EXIT_CONFIG
    assert main(["simulate", "-c", "/nonexistent.ini"]) == EXIT_CONFIG
    assert main(["route-check", "--pool", "/nonexistent.json"]) == EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["plan", "--bogus"])
    assert exc.value.code == 2


def test_route_check_churn(tmp_path, capsys):
    rc = main(["route-check", "--pool", str(CONFIGS / "pool.json"), "--n-keys", "5000",
               "--remove", "special-3", "--out", str(tmp_path), "--format", "json"])
    assert rc == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["disruption_violations"] == 0 and summary["affinity_violations"] == 0
    assert 0.05 < summary["moved_fraction"] < 0.2
    assert (tmp_path / "routes.csv").exists() and (tmp_path / "manifest.json").exists()


def test_route_check_rejects_crowded_pool(tmp_path):
    pool = {"instances": [{"id": f"s{i}", "kind": "special", "server": "one"} for i in range(3)]}
    path = tmp_path / "pool.json"
    path.write_text(json.dumps(pool))
    assert main(["route-check", "--pool", str(path), "--n-keys", "10"]) == EXIT_CONFIG


def test_simulate_writes_artifacts(tmp_path):
    assert main(["simulate", *QUICK, "--out", str(tmp_path)]) == EXIT_OK
    for name in ("summary.csv", "histograms.csv", "outcomes.csv", "trace.csv", "report.json", "manifest.json"):
        assert (tmp_path / name).stat().st_size > 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["csv_schema_version"] == 1 and len(manifest["config_sha256"]) == 64


def test_sweep_csv(tmp_path, capsys):
    rc = main(["sweep", *QUICK, "--param", "items", "--values", "64,128", "--modes", "baseline,relay",
               "--out", str(tmp_path), "--format", "csv"])
    assert rc == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("param,value,mode")
    assert main(["sweep", "--param", "items", "--values", ""]) == EXIT_CONFIG
