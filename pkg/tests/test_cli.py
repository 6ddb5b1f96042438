import json
import math
from pathlib import Path

import numpy as np
import polars as pl
import pytest
from nonmarkov_sync.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILED, EXIT_OK, main
from nonmarkov_sync.reference import reference_config
from numpy.testing import assert_allclose

REPRODUCE_FILES = [
    "config.json",
    "err_scenario1.csv",
    "err_scenario2.csv",
    "err_scenario3.csv",
    "fig1_data.csv",
    "report.json",
    "summary.json",
    "synthesis.json",
    "traj_scenario1.csv",
    "traj_scenario2.csv",
    "traj_scenario3.csv",
]


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def _write_config(directory: Path, doc: dict) -> Path:
    path = directory / "config.json"
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def test_reproduce_example(tmp_path: Path):
    out = tmp_path / "out"
    assert main(["reproduce-example", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == REPRODUCE_FILES

    report = _read_json(out / "report.json")
    assert report["status"] == "ok"
    assert report["conditions"]["sufficient"] is True
    assert report["certificate"]["threshold"] == pytest.approx(0.1125, abs=1e-10)
    assert report["certificate"]["mean_delay"] == pytest.approx(1.0 / 9.0, abs=1e-10)
    assert report["delay_bound"]["threshold"] == pytest.approx(0.1125, abs=1e-10)
    assert report["delay_bound"]["satisfied"] is True

    synthesis = _read_json(out / "synthesis.json")
    assert synthesis["status"] == "ok"
    assert synthesis["gain_searched"] is False
    assert synthesis["synthesis"]["v12"][0][0] == pytest.approx(
        [0.2 - math.sqrt(0.4), 0.0], abs=1e-11
    )

    summary = _read_json(out / "summary.json")
    assert summary["status"] == "ok"
    expected_initial = {"scenario1": math.sqrt(2.0), "scenario2": math.sqrt(2.0), "scenario3": 2.0}
    for name, initial in expected_initial.items():
        entry = summary["scenarios"][name]
        assert entry["status"] == "ok"
        assert entry["initial_error_norm"] == pytest.approx(initial, rel=1e-11)
        assert entry["final_error_norm"] <= 1e-3 * initial
        assert entry["decayed"] is True
        assert 0.0 < entry["decay_time"] <= 20.0

    fig = pl.read_csv(out / "fig1_data.csv")
    assert fig.columns == ["t", "|e|_scenario1", "|e|_scenario2", "|e|_scenario3"]
    assert fig["t"][-1] == pytest.approx(20.0)
    assert fig["|e|_scenario3"][0] == pytest.approx(2.0)


def test_reproduce_example_is_deterministic(tmp_path: Path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "reproduce-example", "--out", str(first), "--horizon", "2"]) == EXIT_OK
    assert main(["-q", "reproduce-example", "--out", str(second), "--horizon", "2"]) == EXIT_OK
    for path in sorted(first.iterdir()):
        assert path.read_bytes() == (second / path.name).read_bytes(), path.name


def test_synthesize_then_check_round_trip(tmp_path: Path):
    config = _write_config(tmp_path, reference_config())
    out = tmp_path / "out"
    assert main(["synthesize", "--config", str(config), "--out", str(out)]) == EXIT_OK
    synthesis = _read_json(out / "synthesis.json")
    # The config carries gain 0.4, so no search runs.
    assert synthesis["gain_searched"] is False
    assert synthesis["synthesis"]["gain_a"] == pytest.approx(0.4)

    args = ["check", "--config", str(config), "--out", str(out)]
    assert main([*args, "--engineered", str(out / "synthesis.json")]) == EXIT_OK
    report = _read_json(out / "report.json")
    assert report["certificate"]["passes"] is True
    assert report["certificate"]["threshold"] == pytest.approx(0.1125, abs=1e-9)
    assert_allclose(report["error_dynamics"]["f_total"], -0.8 * np.eye(2), atol=1e-10)

    sim = ["simulate", "--config", str(config), "--out", str(out), "--horizon", "5"]
    code = main([*sim, "--engineered", str(out / "synthesis.json"), "--jobs", "2"])
    assert code == EXIT_OK
    assert (out / "err_scenario3.csv").exists()


def test_synthesize_searches_the_gain(tmp_path: Path):
    doc = reference_config()
    del doc["gain"]
    config = _write_config(tmp_path, doc)
    assert main(["synthesize", "--config", str(config), "--out", str(tmp_path)]) == EXIT_OK
    synthesis = _read_json(tmp_path / "synthesis.json")
    assert synthesis["status"] == "ok"
    assert synthesis["gain_searched"] is True
    assert 0.37 < synthesis["synthesis"]["gain_a"] < 0.5
    assert synthesis["delay_bound"]["satisfied"] is True


def test_synthesize_rejects_heterogeneous_subsystems(tmp_path: Path):
    doc = reference_config()
    doc["subsystems"][1]["omega"] = [[0.0, 0.2], [0.2, 0.0]]
    config = _write_config(tmp_path, doc)
    assert main(["synthesize", "--config", str(config), "--out", str(tmp_path)]) == EXIT_FAILED
    synthesis = _read_json(tmp_path / "synthesis.json")
    assert synthesis["status"] == "rejected"
    assert synthesis["omega_mismatch"] == pytest.approx(0.1)


def test_synthesize_rejects_gain_below_hamiltonian_norm(tmp_path: Path):
    config = _write_config(tmp_path, reference_config())
    code = main(["synthesize", "--config", str(config), "--out", str(tmp_path), "--gain", "0.05"])
    assert code == EXIT_CONFIG


def test_synthesize_pads_missing_fields(tmp_path: Path):
    exp9 = {"channels": [{"form": "exp", "terms": [{"c": 1.0, "beta": 9.0}]}]}
    sub = {
        "omega": [[0.05 if i == j else 0.0 for j in range(4)] for i in range(4)],
        "v": [[[0.2, 0.0], [0.0, -0.1], [0.1, 0.0], [0.0, 0.0]]],
        "kernel": exp9,
    }
    config = _write_config(tmp_path, {"subsystems": [sub, sub], "gain": 0.4})
    assert main(["synthesize", "--config", str(config), "--out", str(tmp_path)]) == EXIT_OK
    synthesis = _read_json(tmp_path / "synthesis.json")
    assert synthesis["padded_fields"] == 1
    assert len(synthesis["synthesis"]["v12"]) == 2

    args = ["check", "--config", str(config), "--out", str(tmp_path)]
    code = main([*args, "--engineered", str(tmp_path / "synthesis.json")])
    assert code in (EXIT_OK, EXIT_FAILED)
    report = _read_json(tmp_path / "report.json")
    assert report["conditions"]["sufficient"] is True


def test_check_flags_asymmetric_cross_hamiltonian(tmp_path: Path):
    doc = reference_config()
    doc["engineered"] = {
        "omega12": [[0.0, 1.0], [0.0, 0.0]],
        "v12": [[[0.0, 0.0], [0.0, 0.0]]],
        "v21": [[[0.0, 0.0], [0.0, 0.0]]],
    }
    config = _write_config(tmp_path, doc)
    assert main(["check", "--config", str(config), "--out", str(tmp_path)]) == EXIT_FAILED
    report = _read_json(tmp_path / "report.json")
    assert report["status"] == "failed"
    assert report["conditions"]["hamiltonians_match"] is False
    assert report["conditions"]["necessary_violated"] is True
    assert report["certificate"] is None


def test_check_needs_engineered_blocks(tmp_path: Path):
    config = _write_config(tmp_path, reference_config())
    assert main(["check", "--config", str(config), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert not (tmp_path / "report.json").exists()


def test_malformed_config_exits_with_config_error(tmp_path: Path):
    path = tmp_path / "config.json"
    path.write_text('{\n  "subsystems": [\n', encoding="utf-8")
    assert main(["check", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_lift_on_tabulated_kernel_is_a_config_error(tmp_path: Path):
    doc = reference_config()
    tabulated = {"channels": [{"form": "tabulated", "dt": 0.5, "values": [9.0, 0.1, 0.0]}]}
    for sub in doc["subsystems"]:
        sub["kernel"] = tabulated
    del doc["integrator"]
    config = _write_config(tmp_path, doc)
    args = ["simulate", "--config", str(config), "--out", str(tmp_path), "--method", "lift"]
    assert main(args) == EXIT_CONFIG


def test_divergent_scenario_does_not_stop_the_others(tmp_path: Path):
    doc = reference_config()
    for sub in doc["subsystems"]:
        sub["omega"] = [[5.0, 0.0], [0.0, -5.0]]
    doc["scenarios"].append({"name": "at-rest", "alphas1": [0.0], "alphas2": [0.0]})
    config = _write_config(tmp_path, doc)
    args = ["simulate", "--config", str(config), "--out", str(tmp_path), "--horizon", "5"]
    assert main(args) == EXIT_DIVERGED

    summary = _read_json(tmp_path / "summary.json")
    assert summary["status"] == "diverged"
    assert summary["scenarios"]["scenario1"]["status"] == "diverged"
    assert summary["scenarios"]["scenario1"]["t"] < 5.0
    at_rest = summary["scenarios"]["at-rest"]
    assert at_rest["status"] == "ok"
    assert at_rest["initial_error_norm"] == 0.0
    assert (tmp_path / "err_at-rest.csv").exists()
    assert not (tmp_path / "err_scenario1.csv").exists()


def test_short_tabulated_kernel_runs_past_its_table(tmp_path: Path):
    dt = 0.01
    values = (9.0 * np.exp(-9.0 * dt * np.arange(501))).tolist()
    doc = reference_config()
    for sub in doc["subsystems"]:
        sub["kernel"] = {"channels": [{"form": "tabulated", "dt": dt, "values": values}]}
    del doc["integrator"]
    config = _write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert main(["synthesize", "--config", str(config), "--out", str(out)]) == EXIT_OK
    engineered = ["--engineered", str(out / "synthesis.json")]

    assert main(["check", "--config", str(config), "--out", str(out), *engineered]) == EXIT_OK
    assert _read_json(out / "report.json")["conditions"]["sufficient"] is True

    sim = ["simulate", "--config", str(config), "--out", str(out), *engineered]
    assert main([*sim, "--method", "cq", "--dt", "0.01", "--horizon", "20"]) == EXIT_OK
    summary = _read_json(out / "summary.json")
    assert summary["status"] == "ok"
    assert all(entry["decayed"] for entry in summary["scenarios"].values())


def test_reproduce_methods_agree(tmp_path: Path):
    runs = {}
    for method in ("lift", "cq"):
        out = tmp_path / method
        args = ["-q", "reproduce-example", "--out", str(out), "--method", method]
        assert main([*args, "--horizon", "5"]) == EXIT_OK
        runs[method] = (_read_json(out / "summary.json"), pl.read_csv(out / "fig1_data.csv"))

    (lift_summary, lift_fig), (cq_summary, cq_fig) = runs["lift"], runs["cq"]
    assert lift_fig.columns == cq_fig.columns
    for column in lift_fig.columns:
        assert_allclose(cq_fig[column].to_numpy(), lift_fig[column].to_numpy(), atol=1e-4)
    for name, lift_entry in lift_summary["scenarios"].items():
        cq_entry = cq_summary["scenarios"][name]
        assert cq_entry["initial_error_norm"] == lift_entry["initial_error_norm"]
        assert cq_entry["final_error_norm"] == pytest.approx(
            lift_entry["final_error_norm"], abs=1e-4
        )


def test_undecayed_tabulated_kernel_is_a_config_error(tmp_path: Path):
    doc = reference_config()
    flat = {"channels": [{"form": "tabulated", "dt": 0.5, "values": [1.0, 1.0, 1.0]}]}
    for sub in doc["subsystems"]:
        sub["kernel"] = flat
    doc["engineered"] = {
        "omega12": [[0.0, 0.0], [0.0, 0.0]],
        "v12": [[[0.0, 0.0], [0.0, 0.0]]],
        "v21": [[[0.0, 0.0], [0.0, 0.0]]],
    }
    del doc["integrator"]
    config = _write_config(tmp_path, doc)
    assert main(["check", "--config", str(config), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert not (tmp_path / "report.json").exists()
