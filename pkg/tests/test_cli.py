import json

import pytest

from driftscape.cli import EXIT_DATA, EXIT_USAGE, RunConfig, UsageError, main
from driftscape.data import read_trajectories


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    p = d / "data.csv"
    assert main(["simulate", "--dt", "1", "--g", "3", "--n", "80", "--seed", "1", "--out", str(p)]) == 0
    return p


def run_twice(tmp_path, args, out_flag="--out", suffix=".json"):
    a, b = tmp_path / f"a{suffix}", tmp_path / f"b{suffix}"
    assert main(args + [out_flag, str(a)]) == 0
    assert main(args + [out_flag, str(b)]) == 0
    return a.read_bytes(), b.read_bytes()


def test_simulate_deterministic(tmp_path):
    a, b = run_twice(tmp_path, ["simulate", "--dt", "0.5", "--g", "2", "--n", "20", "--seed", "3"], suffix=".csv")
    assert a == b


def test_simulate_anonymize(tmp_path):
    p = tmp_path / "anon.csv"
    assert main(["simulate", "--g", "2", "--n", "30", "--anonymize", "--out", str(p)]) == 0
    pts = read_trajectories(p).all_positions()
    assert abs(pts.mean()) < 1e-9


def test_fit_deterministic_and_fields(tmp_path, sim_csv):
    a, b = run_twice(tmp_path, ["fit", "--method", "euler", "--data", str(sim_csv), "--seed", "1", "--restarts", "1", "--max-evals", "200"])
    assert a == b
    doc = json.loads(a)
    assert doc["schema_version"] == 1 and doc["config"]["optimizer"]["restarts"] == 1


def test_fit_kessler_has_skipped_fraction(tmp_path, sim_csv):
    out = tmp_path / "k.json"
    assert main(["fit", "--method", "kessler", "--data", str(sim_csv), "--restarts", "1", "--max-evals", "200", "--out", str(out)]) == 0
    assert "skipped_fraction" in json.loads(out.read_text())


def test_fit_exit_codes(tmp_path, sim_csv):
    out = str(tmp_path / "x.json")
    assert main(["fit", "--method", "euler", "--out", out]) == EXIT_USAGE
    assert main(["fit", "--method", "newton", "--data", str(sim_csv), "--out", out]) == EXIT_USAGE
    assert main(["fit", "--method", "euler", "--data", str(tmp_path / "missing.csv"), "--out", out]) == EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("track_id,t,x,y\na,1,0,0\na,0,1,1\n")
    assert main(["fit", "--method", "euler", "--data", str(bad), "--out", out]) == EXIT_DATA
    assert main([]) == EXIT_USAGE


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(UsageError):
        RunConfig.from_dict({"optimizer": {"restarts": 2, "speed": 9}})
    with pytest.raises(UsageError):
        RunConfig.from_dict({"extra": 1})
    cfg = RunConfig.from_dict({"optimizer": {"restarts": 2}, "methods": ["ea-mcem"], "scenario": {"dt": 10.0}})
    assert cfg.optimizer.restarts == 2 and cfg.methods == ("ea_mcem",) and cfg.scenario.dt == 10.0
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_loglik_map_compare_deterministic(tmp_path, sim_csv):
    fit_out = tmp_path / "e.json"
    assert main(["fit", "--method", "euler", "--data", str(sim_csv), "--restarts", "1", "--max-evals", "200", "--out", str(fit_out)]) == 0
    a, b = run_twice(tmp_path, ["loglik", "--params", str(fit_out), "--data", str(sim_csv), "--mc", "8", "--seed", "2"])
    assert a == b and json.loads(a)["schema_version"] == 1
    a, b = run_twice(tmp_path, ["map", "--params", str(fit_out), "--grid=-2,8,-2,6,20"], suffix=".csv")
    assert a == b and a.decode().startswith("x,y,value\n")
    a, b = run_twice(tmp_path, ["compare", "--fits", str(fit_out), "--data", str(sim_csv), "--mc", "8"])
    assert a == b
    doc = json.loads(a)
    row = doc["rows"][0]["values"]
    fit_doc = json.loads(fit_out.read_text())
    n_seg = read_trajectories(sim_csv).n_segments
    # a fit compared with itself reproduces its stored objective
    assert row["euler"] == pytest.approx(fit_doc["objective"] / n_seg, rel=1e-12)
    assert set(doc["criteria"]) == {"euler", "ozaki", "kessler", "ea"}


def test_simulate_then_fit_equals_study(tmp_path):
    data = tmp_path / "d.csv"
    assert main(["simulate", "--dt", "1", "--g", "2", "--n", "40", "--seed", "6", "--out", str(data)]) == 0
    fit_out = tmp_path / "f.json"
    assert main(["fit", "--method", "euler", "--data", str(data), "--seed", "6", "--restarts", "1", "--max-evals", "200", "--out", str(fit_out)]) == 0
    sdir = tmp_path / "study"
    args = ["study", "--dt", "1", "--g", "2", "--n", "40", "--replications", "1", "--seed", "6", "--methods", "euler", "--restarts", "1", "--max-evals", "200", "--out", str(sdir)]
    assert main(args) == 0
    rep = json.loads((sdir / "study_dt1.json").read_text())
    fit_doc = json.loads(fit_out.read_text())
    assert rep["replications"][0]["fits"]["euler"]["objective"] == fit_doc["objective"]
    first = (sdir / "study_dt1.json").read_bytes()
    assert main(args) == 0
    assert (sdir / "study_dt1.json").read_bytes() == first
