import json
from pathlib import Path

import pytest

from wardrop.cli import ExperimentConfig, main
from wardrop.poisoning import identity_attack

DATA = Path(__file__).resolve().parents[1] / "src" / "wardrop" / "data"

PIGOU_ARGS = [
    "--net", "pigou_net.tntp",
    "--trips", "pigou_trips.tntp",
    "--config", str(DATA / "pigou_config.json"),
]


def _read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def test_solve_pigou_poa(tmp_path):
    out = tmp_path / "pigou"
    rc = main(["solve", "--kind", "we,so", *PIGOU_ARGS, "--out", str(out),
               "--rel-gap", "1e-9"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["poa"] == pytest.approx(4.0 / 3.0, abs=1e-6)
    assert summary["kinds"]["we"]["converged"]
    header, rows = _read_csv(out / "flows.csv")
    assert header == ["kind", "edge", "tail", "head", "flow", "time", "utilization"]
    assert len(rows) == 4  # two kinds x two edges


def test_solve_sioux_falls_we(tmp_path):
    out = tmp_path / "sf"
    rc = main(["solve", "--kind", "we", "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["kinds"]["we"]["rel_gap"] <= 1e-6
    assert summary["n_edges"] == 76
    assert summary["total_demand"] == pytest.approx(34200.0)


def test_solve_sioux_falls_poa_at_least_one(tmp_path):
    out = tmp_path / "sf_both"
    rc = main(["solve", "--kind", "we,so", "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["kinds"]["we"]["converged"]
    assert summary["kinds"]["so"]["converged"]
    assert summary["poa"] >= 1.0 - 1e-6


def test_solve_pwe_identity_matches_we(tmp_path):
    checkpoint = tmp_path / "identity.json"
    checkpoint.write_text(identity_attack(76, 40).to_json())
    out_we = tmp_path / "we"
    out_pwe = tmp_path / "pwe"
    assert main(["solve", "--kind", "we", "--out", str(out_we)]) == 0
    assert main(
        ["solve", "--kind", "pwe", "--attack", str(checkpoint), "--out", str(out_pwe)]
    ) == 0
    _, rows_we = _read_csv(out_we / "flows.csv")
    _, rows_pwe = _read_csv(out_pwe / "flows.csv")
    for a, b in zip(rows_we, rows_pwe):
        assert abs(float(a[4]) - float(b[4])) <= 1e-6  # flow column
        assert abs(float(a[5]) - float(b[5])) <= 1e-6  # time column


def test_solve_pwe_without_checkpoint_is_usage_error(tmp_path):
    rc = main(["solve", "--kind", "pwe", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_solve_unknown_kind_is_usage_error(tmp_path):
    rc = main(["solve", "--kind", "nash", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_missing_network_file_is_usage_error(tmp_path):
    rc = main(["solve", "--kind", "we", "--net", "no_such_net.tntp",
               "--out", str(tmp_path / "x")])
    assert rc == 1


def _tiny_attack_args(out, seed=0, iters=3):
    return [
        "attack",
        "--mode", "zeroth",
        *PIGOU_ARGS,
        "--out", str(out),
        "--iters", str(iters),
        "--m", "3",
        "--r", "0.05",
        "--eta0", "0.05",
        "--gamma", "1.0",
        "--seed", str(seed),
        "--sampling", "sphere",
        "--rel-gap", "1e-8",
    ]


def test_attack_writes_artifacts(tmp_path):
    out = tmp_path / "attack"
    rc = main(_tiny_attack_args(out))
    assert rc == 0
    for name in ["trace.csv", "attack_final.json", "edge_report.csv", "run_meta.json"]:
        assert (out / name).is_file()
    header, rows = _read_csv(out / "trace.csv")
    assert header[0] == "iteration"
    assert len(rows) == 3
    header, rows = _read_csv(out / "edge_report.csv")
    assert header == [
        "edge", "tail", "head", "so_flow", "pwe_flow",
        "so_time", "pwe_time", "so_utilization", "pwe_utilization",
    ]
    assert len(rows) == 2


def test_attack_checkpoint_toggle(tmp_path):
    out = tmp_path / "ckpt"
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "network": "pigou_net.tntp",
        "trips": "pigou_trips.tntp",
        "latency_overrides": [
            {"edge": 0, "kind": "affine", "a": 0.0, "b": 1.0},
            {"edge": 1, "kind": "affine", "a": 1.0, "b": 0.0},
        ],
        "outer_iters": 3,
        "m": 2,
        "r": 0.05,
        "eta0": 0.05,
        "gamma": 1.0,
        "rel_gap_tol": 1e-8,
        "save_checkpoints": True,
    }))
    rc = main(["attack", "--mode", "zeroth", "--config", str(config_path),
               "--out", str(out)])
    assert rc == 0
    from wardrop.poisoning import AttackParams

    snapshots = sorted((out / "checkpoints").glob("attack_iter_*.json"))
    assert len(snapshots) == 3
    first = AttackParams.from_json(snapshots[0].read_text())
    assert first.distance_from_identity() == 0.0  # identity initialization


def test_solve_nonconvergence_exits_zero_with_flag(tmp_path):
    out = tmp_path / "starved"
    rc = main(["solve", "--kind", "we", "--out", str(out), "--max-iters", "2",
               "--rel-gap", "1e-12"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert not summary["kinds"]["we"]["converged"]


def test_attack_trace_bytes_deterministic(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(_tiny_attack_args(out1, seed=7)) == 0
    assert main(_tiny_attack_args(out2, seed=7)) == 0
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
    assert (out1 / "attack_final.json").read_bytes() == (
        out2 / "attack_final.json"
    ).read_bytes()


def test_attack_gamma_zero_stays_near_identity(tmp_path):
    out = tmp_path / "null_attack"
    rc = main([
        "attack", "--mode", "zeroth", *PIGOU_ARGS, "--out", str(out),
        "--iters", "20", "--m", "8", "--r", "0.3", "--eta0", "0.05",
        "--gamma", "0.0", "--seed", "1", "--rel-gap", "1e-8",
    ])
    assert rc == 0
    from wardrop.poisoning import AttackParams

    final = AttackParams.from_json((out / "attack_final.json").read_text())
    assert final.distance_from_identity() <= 0.1


def test_attack_first_order_mode(tmp_path):
    out = tmp_path / "first"
    rc = main([
        "attack", "--mode", "first", *PIGOU_ARGS, "--out", str(out),
        "--iters", "3", "--eta0", "0.1", "--gamma", "0.05", "--rel-gap", "1e-9",
    ])
    # Pigou has a constant latency edge: implicit differentiation refuses it
    # and finite-difference fallback is not enabled by default
    assert rc == 2


def test_attack_evacuation_config_thirty_rows(tmp_path):
    # bundled month-long evacuation scenario end to end: one trace row per day
    out = tmp_path / "evac"
    rc = main([
        "attack", "--mode", "zeroth",
        "--config", str(DATA / "evacuation_config.json"),
        "--out", str(out),
    ])
    assert rc == 0
    header, rows = _read_csv(out / "trace.csv")
    assert len(rows) == 30
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["final_ppoa"] > meta["unpoisoned_poa"]
    assert main(["report", "--artifacts", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    # heavily poisoned flow overloads at least one edge beyond capacity
    assert report["n_overloaded"] >= 1
    assert len(report["overloaded_edges"]) == report["n_overloaded"]


def test_report_from_attack_artifacts(tmp_path):
    out = tmp_path / "attack"
    assert main(_tiny_attack_args(out)) == 0
    assert main(["report", "--artifacts", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "final_ppoa" in report
    assert len(report["top_time_ratio"]) <= 5
    assert report["iterations"] == 3
    assert "n_overloaded" in report


def test_report_from_solve_only_artifacts(tmp_path):
    out = tmp_path / "solve"
    assert main(["solve", "--kind", "so", *PIGOU_ARGS, "--out", str(out),
                 "--rel-gap", "1e-9"]) == 0
    assert main(["report", "--artifacts", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "final_ppoa" not in report
    assert "top_utilization" in report


def test_report_identity_attack_time_ratios_are_one(tmp_path):
    out = tmp_path / "ident"
    rc = main([
        "attack", "--mode", "zeroth", *PIGOU_ARGS, "--out", str(out),
        "--iters", "1", "--m", "2", "--r", "0.01", "--eta0", "0.0000001",
        "--gamma", "0.0", "--seed", "3", "--rel-gap", "1e-8",
    ])
    assert rc == 0
    assert main(["report", "--artifacts", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    # the final attack is still essentially the identity: PWE == WE;
    # time ratios compare against SO, which differs on Pigou by design
    header, rows = _read_csv(out / "edge_report.csv")
    col = {name: i for i, name in enumerate(header)}
    we_like = [float(r[col["pwe_time"]]) for r in rows]
    assert we_like == pytest.approx([1.0, 1.0], abs=1e-6)


def test_report_missing_artifacts_is_runtime_error(tmp_path):
    rc = main(["report", "--artifacts", str(tmp_path / "empty")])
    assert rc == 2


def test_config_file_roundtrip(tmp_path):
    config = ExperimentConfig.from_file(str(DATA / "evacuation_config.json"))
    assert config.outer_iters == 30
    assert config.sampling_mode == "gaussian"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_field": 1}))
    with pytest.raises(ValueError, match="unknown config fields"):
        ExperimentConfig.from_file(str(bad))


def test_data_dir_env_var(tmp_path, monkeypatch):
    alt = tmp_path / "data"
    alt.mkdir()
    (alt / "mini_net.tntp").write_text(
        (DATA / "pigou_net.tntp").read_text()
    )
    (alt / "mini_trips.tntp").write_text(
        (DATA / "pigou_trips.tntp").read_text()
    )
    monkeypatch.setenv("WARDROP_DATA_DIR", str(alt))
    out = tmp_path / "out"
    rc = main(["solve", "--kind", "we", "--net", "mini_net.tntp",
               "--trips", "mini_trips.tntp", "--out", str(out)])
    assert rc == 0


def test_csv_schema_round_trips_through_report(tmp_path):
    out = tmp_path / "attack"
    assert main(_tiny_attack_args(out)) == 0
    assert main(["report", "--artifacts", str(out)]) == 0
    # re-running report on its own output directory is stable
    assert main(["report", "--artifacts", str(out)]) == 0
    first = json.loads((out / "report.json").read_text())
    assert main(["report", "--artifacts", str(out), "--out",
                 str(out / "report2.json")]) == 0
    second = json.loads((out / "report2.json").read_text())
    assert first == second