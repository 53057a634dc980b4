"""End-to-end command-line runs on small configurations: artifact files,
manifests, rerun byte-identity, and the exit-code contract."""

import hashlib
import json
from pathlib import Path

import pytest

from noiseplan.cli import main

DATA = Path(__file__).parent / "data"
ORACLE = DATA / "oracle_accept.json"


def _read(path: Path) -> bytes:
    return path.read_bytes()


def _manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


def _scenario_doc(**overrides) -> dict:
    doc = {
        "zones": [
            {"id": "west", "x": 900.0, "y": 1100.0,
             "L_inst": 60.0, "L_eq": 58.0, "dt": 4},
        ],
        "airspace": {"x": [0.0, 2200.0], "y": [0.0, 2200.0],
                     "z": [0.0, 450.0]},
        "start": {"v": 20.0, "rho": 500.0, "x": 150.0, "y": 150.0,
                  "z": 120.0, "theta": 0.785},
        "goal": {"v": 20.0, "rho": 500.0, "x": 2050.0, "y": 2050.0,
                 "z": 140.0, "theta": 0.0},
        "weights": {"w_kino": 0.05},
        "bounds": {"h_min": 100.0},
        "config": {"n_iter": 400, "eps_g": 150.0, "seed": 5},
    }
    doc.update(overrides)
    return doc


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One cheap run of every stage, shared by the read-only checks."""
    root = tmp_path_factory.mktemp("cli")
    part = root / "part"
    lat = root / "lat"
    act = root / "act"
    model = root / "model"
    assert main(["partition", "--oracle", str(ORACLE), "--mu-phi", "0.5",
                 "--out", str(part)]) == 0
    assert main(["sample", "--oracle", str(ORACLE),
                 "--partition", str(part / "partition.json"),
                 "--mode", "lattice", "--v-grid", "20,60",
                 "--rho-grid", "500,700", "--h-grid", "100,450",
                 "--r-grid", "0,400,1600", "--out", str(lat)]) == 0
    assert main(["sample", "--oracle", str(ORACLE),
                 "--partition", str(part / "partition.json"),
                 "--mode", "active", "--mu-act", "2.0",
                 "--r-grid", "0,150,1600", "--out", str(act)]) == 0
    assert main(["train-certify", "--dataset", str(act / "dataset.csv"),
                 "--lattice", str(lat / "cubes.json"),
                 "--partition", str(part / "partition.json"),
                 "--hidden", "8,8", "--epochs", "400", "--seed", "17",
                 "--out", str(model)]) == 0
    return {"part": part, "lat": lat, "act": act, "model": model}


class TestPartition:
    def test_artifacts_and_manifest(self, pipeline):
        out = pipeline["part"]
        part = json.loads((out / "partition.json").read_text())
        assert len(part["sectors"]) == 10
        report = (out / "partition_report.txt").read_text()
        assert "angular range (deg)" in report
        assert report.count("\n") == 2 + len(part["sectors"])
        man = _manifest(out)
        assert man["command"] == "partition"
        assert man["parameters"]["mu_phi"] == 0.5
        assert [o["file"] for o in man["outputs"]] == [
            "partition.json", "partition_report.txt",
        ]

    def test_digests_match_files(self, pipeline):
        out = pipeline["part"]
        for entry in _manifest(out)["outputs"]:
            digest = hashlib.sha256(_read(out / entry["file"])).hexdigest()
            assert digest == entry["sha256"]

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        out = tmp_path / "again"
        assert main(["partition", "--oracle", str(ORACLE), "--mu-phi", "0.5",
                     "--out", str(out)]) == 0
        for name in ("partition.json", "partition_report.txt",
                     "manifest.json"):
            assert _read(out / name) == _read(pipeline["part"] / name)

    def test_bad_budget_is_config_error(self, tmp_path, capsys):
        code = main(["partition", "--oracle", str(ORACLE), "--mu-phi", "0",
                     "--out", str(tmp_path / "x")])
        assert code == 4
        assert "mu_phi" in capsys.readouterr().err

    def test_missing_oracle_is_config_error(self, tmp_path):
        code = main(["partition", "--oracle", str(tmp_path / "nope.json"),
                     "--mu-phi", "0.5", "--out", str(tmp_path / "x")])
        assert code == 4

    def test_missing_flag_is_config_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["partition", "--mu-phi", "0.5", "--out", "x"])
        assert exc.value.code == 4
        assert "--oracle" in capsys.readouterr().err


class TestSample:
    def test_active_counts_agree_with_cube_log(self, pipeline):
        out = pipeline["act"]
        log = json.loads((out / "cubes.json").read_text())
        rows = (out / "dataset.csv").read_text().strip().splitlines()
        assert log["n_samples"] == len(rows) - 1
        assert log["oracle_evals"] > 0
        assert all("m" not in cube for cube in log["cubes"])

    def test_lattice_log_has_sector_cells(self, pipeline):
        log = json.loads((pipeline["lat"] / "cubes.json").read_text())
        sectors = {cube["m"] for cube in log["cubes"]}
        assert sectors == set(range(1, 11))
        # one (v, rho, h) cell over two r slices per sector
        assert len(log["cubes"]) == 20

    def test_refine_reaches_target(self, tmp_path):
        out = tmp_path / "ref"
        part = tmp_path / "part"
        assert main(["partition", "--oracle", str(ORACLE), "--mu-phi", "2.0",
                     "--out", str(part)]) == 0
        assert main(["sample", "--oracle", str(ORACLE),
                     "--partition", str(part / "partition.json"),
                     "--mode", "lattice", "--refine", "--mu-act", "4.0",
                     "--v-grid", "20,60", "--rho-grid", "500,700",
                     "--h-grid", "100,450", "--r-grid", "0,400,1600",
                     "--out", str(out)]) == 0
        log = json.loads((out / "cubes.json").read_text())
        assert all(c["gap"] <= 4.0 for c in log["cubes"])
        grids = json.loads((out / "grids.json").read_text())
        assert set(grids) == {"v", "rho", "h", "r"}

    def test_lattice_mode_needs_all_grids(self, pipeline, tmp_path, capsys):
        code = main(["sample", "--oracle", str(ORACLE),
                     "--partition",
                     str(pipeline["part"] / "partition.json"),
                     "--mode", "lattice", "--v-grid", "20,60",
                     "--rho-grid", "500,700", "--r-grid", "0,400",
                     "--out", str(tmp_path / "x")])
        assert code == 4
        assert "--h-grid" in capsys.readouterr().err

    def test_unreachable_budget_warns_with_coordinates(self, tmp_path,
                                                       capsys):
        spec = {
            "type": "synthetic",
            "params": {"L0": 40.0, "a_v": 60.0, "a_rho": 3.0, "k": 16.0,
                       "v_ref": 60.0, "rho_ref": 700.0, "d_ref": 50.0,
                       "phi_amps": [0.0]},
            "domain": {"v": [20.0, 22.0], "rho": [500.0, 508.0],
                       "h": [100.0, 104.0], "r": [0.0, 100.0]},
        }
        oracle_path = tmp_path / "steep.json"
        oracle_path.write_text(json.dumps(spec))
        part = tmp_path / "part"
        assert main(["partition", "--oracle", str(oracle_path),
                     "--mu-phi", "5.0", "--out", str(part)]) == 0
        out = tmp_path / "flagged"
        code = main(["sample", "--oracle", str(oracle_path),
                     "--partition", str(part / "partition.json"),
                     "--mode", "active", "--mu-act", "1.0",
                     "--r-grid", "50", "--out", str(out)])
        assert code == 0
        err = capsys.readouterr().err
        assert "warning:" in err and "edge floor" in err
        assert "v=[20.0, 21.0]" in err
        log = json.loads((out / "cubes.json").read_text())
        assert any(c["flagged"] for c in log["cubes"])


class TestTrainCertify:
    def test_artifacts(self, pipeline):
        out = pipeline["model"]
        cert = json.loads((out / "certification.json").read_text())
        assert cert["mu_phi"] == 0.5
        assert len(cert["sectors"]) == 10
        for row in cert["sectors"]:
            assert {"m", "T1", "T2", "T3", "delta_m", "n_cells"} <= set(row)
            assert row["delta_m"] >= cert["mu_phi"]
        report = (out / "certification_report.txt").read_text()
        assert "delta_m" in report and "overall delta" in report
        assert _manifest(out)["seed"] == 17

    def test_model_loads_and_predicts(self, pipeline):
        from noiseplan.model import load_model

        model = load_model(pipeline["model"] / "model.json")
        level = model.predict_batch([40.0], [600.0], [200.0], [300.0], [0.0])
        assert level.shape == (1,)

    def test_active_cube_log_is_rejected(self, pipeline, tmp_path, capsys):
        code = main(["train-certify",
                     "--dataset", str(pipeline["act"] / "dataset.csv"),
                     "--lattice", str(pipeline["act"] / "cubes.json"),
                     "--partition",
                     str(pipeline["part"] / "partition.json"),
                     "--epochs", "10", "--out", str(tmp_path / "x")])
        assert code == 4
        assert "active-mode" in capsys.readouterr().err

    def test_foreign_sectors_are_rejected(self, pipeline, tmp_path, capsys):
        one = tmp_path / "one_sector"
        flat = {
            "type": "synthetic",
            "params": {"L0": 40.0, "a_v": 4.0, "a_rho": 2.0, "k": 7.0,
                       "v_ref": 60.0, "rho_ref": 700.0, "d_ref": 50.0,
                       "phi_amps": [0.0]},
            "domain": {"v": [20.0, 60.0], "rho": [500.0, 700.0],
                       "h": [100.0, 450.0], "r": [0.0, 1600.0]},
        }
        oracle_path = tmp_path / "flat.json"
        oracle_path.write_text(json.dumps(flat))
        assert main(["partition", "--oracle", str(oracle_path),
                     "--mu-phi", "0.5", "--out", str(one)]) == 0
        code = main(["train-certify",
                     "--dataset", str(pipeline["act"] / "dataset.csv"),
                     "--lattice", str(pipeline["lat"] / "cubes.json"),
                     "--partition", str(one / "partition.json"),
                     "--epochs", "10", "--out", str(tmp_path / "x")])
        assert code == 4
        assert "missing from the partition" in capsys.readouterr().err


class TestPlan:
    def test_plan_writes_artifacts(self, pipeline, tmp_path):
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(_scenario_doc()))
        out = tmp_path / "run"
        assert main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(out)]) == 0
        plan = json.loads((out / "plan.json").read_text())
        assert plan["times"][0] == 0
        assert plan["stats"]["first_goal_iter"] is not None
        header = (out / "traces.csv").read_text().splitlines()[0]
        assert header == "t,x,y,z,v,rho,theta,inst_west,leq_west"
        man = _manifest(out)
        assert man["seed"] == 5
        assert man["parameters"]["strategy"] == "uniform"

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(_scenario_doc()))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["plan", "--scenario", str(scen),
                         "--model", str(pipeline["model"] / "model.json"),
                         "--out", str(out)]) == 0
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names == ["manifest.json", "plan.json", "traces.csv"]
        for name in names:
            assert _read(outs[0] / name) == _read(outs[1] / name)

    def test_seed_override_lands_in_manifest(self, pipeline, tmp_path):
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(_scenario_doc()))
        out = tmp_path / "run"
        assert main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--seed", "9", "--out", str(out)]) == 0
        assert _manifest(out)["seed"] == 9

    def test_iteration_starvation_is_infeasible(self, pipeline, tmp_path,
                                                capsys):
        scen = tmp_path / "scen.json"
        doc = _scenario_doc()
        doc["config"]["n_iter"] = 5
        scen.write_text(json.dumps(doc))
        code = main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 2
        assert "no path" in capsys.readouterr().err

    def test_threshold_below_floor_is_infeasible(self, pipeline, tmp_path,
                                                 capsys):
        doc = _scenario_doc()
        doc["zones"][0]["L_inst"] = 5.0
        doc["zones"][0]["L_eq"] = 4.0
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(doc))
        code = main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--tighten", "energy",
                     "--out", str(tmp_path / "run")])
        assert code == 2
        assert "infeasible" in capsys.readouterr().err

    def test_compare_mode_runs_both_strategies(self, pipeline, tmp_path):
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(_scenario_doc()))
        out = tmp_path / "cmp"
        assert main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--compare", "--out", str(out)]) == 0
        cmp_doc = json.loads((out / "comparison.json").read_text())
        assert set(cmp_doc) == {"uniform", "pruned"}
        for row in cmp_doc.values():
            assert row["found"]
            assert row["first_goal_iter"] is not None
        assert (out / "plan_uniform.json").is_file()
        assert (out / "traces_pruned.csv").is_file()

    def test_multi_scenario_is_rejected(self, pipeline, tmp_path, capsys):
        code = main(["plan", "--scenario", str(DATA / "scenario_multi.json"),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 4
        assert "plan-multi" in capsys.readouterr().err

    def test_malformed_scenario_is_config_error(self, pipeline, tmp_path):
        scen = tmp_path / "scen.json"
        scen.write_text("{not json")
        code = main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 4

    def test_unknown_scenario_key_is_config_error(self, pipeline, tmp_path,
                                                  capsys):
        doc = _scenario_doc()
        doc["weights"]["w_bogus"] = 1.0
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(doc))
        code = main(["plan", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 4
        assert "w_bogus" in capsys.readouterr().err


class TestPlanMulti:
    def test_two_requests_complete(self, pipeline, tmp_path):
        doc = _scenario_doc()
        del doc["start"], doc["goal"]
        doc["config"]["n_iter"] = 900
        doc["requests"] = [
            {"id": "a", "t0": 0,
             "start": {"v": 20.0, "rho": 500.0, "x": 150.0, "y": 150.0,
                       "z": 120.0, "theta": 0.785},
             "goal": {"v": 20.0, "rho": 500.0, "x": 2050.0, "y": 2050.0,
                      "z": 120.0, "theta": 0.0}},
            {"id": "b", "t0": 14,
             "start": {"v": 20.0, "rho": 500.0, "x": 150.0, "y": 2050.0,
                       "z": 120.0, "theta": -0.785},
             "goal": {"v": 20.0, "rho": 500.0, "x": 2050.0, "y": 150.0,
                      "z": 120.0, "theta": 0.0}},
        ]
        scen = tmp_path / "multi.json"
        scen.write_text(json.dumps(doc))
        out = tmp_path / "run"
        assert main(["plan-multi", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert [r["id"] for r in summary["requests"]] == ["a", "b"]
        assert all(r["found"] for r in summary["requests"])
        assert summary["min_separation"] > 100.0
        for rid in ("a", "b"):
            assert (out / f"plan_{rid}.json").is_file()
            assert (out / f"traces_{rid}.csv").is_file()

    def test_partial_completion_is_infeasible(self, pipeline, tmp_path):
        doc = _scenario_doc()
        del doc["start"], doc["goal"]
        doc["config"]["n_iter"] = 5
        doc["requests"] = [
            {"id": "a", "t0": 0,
             "start": {"v": 20.0, "rho": 500.0, "x": 150.0, "y": 150.0,
                       "z": 120.0, "theta": 0.785},
             "goal": {"v": 20.0, "rho": 500.0, "x": 2050.0, "y": 2050.0,
                      "z": 120.0, "theta": 0.0}},
        ]
        scen = tmp_path / "multi.json"
        scen.write_text(json.dumps(doc))
        out = tmp_path / "run"
        assert main(["plan-multi", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(out)]) == 2
        summary = json.loads((out / "summary.json").read_text())
        assert summary["requests"][0]["found"] is False
        assert summary["min_separation"] is None
        assert (out / "manifest.json").is_file()

    def test_single_scenario_is_rejected(self, pipeline, tmp_path, capsys):
        scen = tmp_path / "scen.json"
        scen.write_text(json.dumps(_scenario_doc()))
        code = main(["plan-multi", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 4
        assert "no requests" in capsys.readouterr().err

    def test_duplicate_request_ids_are_rejected(self, pipeline, tmp_path):
        doc = _scenario_doc()
        del doc["start"], doc["goal"]
        req = {"id": "a", "t0": 0,
               "start": {"v": 20.0, "rho": 500.0, "x": 150.0, "y": 150.0,
                         "z": 120.0, "theta": 0.785},
               "goal": {"v": 20.0, "rho": 500.0, "x": 2050.0, "y": 2050.0,
                        "z": 120.0, "theta": 0.0}}
        doc["requests"] = [req, dict(req)]
        scen = tmp_path / "multi.json"
        scen.write_text(json.dumps(doc))
        code = main(["plan-multi", "--scenario", str(scen),
                     "--model", str(pipeline["model"] / "model.json"),
                     "--out", str(tmp_path / "run")])
        assert code == 4


class TestValidate:
    def test_passing_run(self, pipeline, tmp_path):
        out = tmp_path / "val"
        assert main(["validate",
                     "--model", str(pipeline["model"] / "model.json"),
                     "--oracle", str(ORACLE), "-n", "2000", "--seed", "3",
                     "--out", str(out)]) == 0
        report = json.loads((out / "validation.json").read_text())
        assert report["max_err"] <= report["delta"]
        assert report["n_points"] == 2000

    def test_corrupted_oracle_violates_bound(self, pipeline, tmp_path,
                                             capsys):
        spec = json.loads(ORACLE.read_text())
        spec["params"]["L0"] += 25.0
        bad = tmp_path / "bad_oracle.json"
        bad.write_text(json.dumps(spec))
        code = main(["validate",
                     "--model", str(pipeline["model"] / "model.json"),
                     "--oracle", str(bad), "-n", "500", "--seed", "3",
                     "--out", str(tmp_path / "val")])
        assert code == 3
        assert "bound violated" in capsys.readouterr().err

    def test_zero_points_is_usage_error(self, pipeline, tmp_path, capsys):
        code = main(["validate",
                     "--model", str(pipeline["model"] / "model.json"),
                     "--oracle", str(ORACLE), "-n", "0",
                     "--out", str(tmp_path / "val")])
        assert code == 4
        assert "n_points" in capsys.readouterr().err


class TestHarness:
    def test_threads_flag_caps_pools(self, tmp_path, monkeypatch):
        import os

        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        assert main(["--threads", "2", "partition", "--oracle", str(ORACLE),
                     "--mu-phi", "0.5", "--out", str(tmp_path / "p")]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_bad_threads_is_config_error(self, capsys):
        assert main(["--threads", "0", "partition", "--oracle", str(ORACLE),
                     "--mu-phi", "0.5", "--out", "x"]) == 4
        assert "--threads" in capsys.readouterr().err

    def test_unknown_command_exits_config(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 4

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "noiseplan" in capsys.readouterr().out
