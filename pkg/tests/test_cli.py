import json
import subprocess
import sys

import jsonschema
import pytest

from critbranch.cli import main
from critbranch.model import load_schema, load_model


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_ref1(capsys):
    code, out, _ = run(capsys, "analyze", "--model", "ref1", "--json")
    assert code == 0
    data = json.loads(out)
    jsonschema.validate(data, load_schema("analyze"))
    assert data["perron"]["rho"] == pytest.approx(1.0)
    assert data["limit"] == {"b": pytest.approx(1.0), "c": pytest.approx(1.0),
                             "delta": pytest.approx(4.0)}


def test_analyze_ref2(capsys):
    code, out, _ = run(capsys, "analyze", "--model", "ref2", "--json")
    data = json.loads(out)
    assert data["perron"]["u"] == pytest.approx([1 / 3, 2 / 3], abs=1e-10)
    assert data["perron"]["v"] == pytest.approx([1, 1], abs=1e-10)


def test_analyze_human_readable(capsys):
    code, out, _ = run(capsys, "analyze", "--model", "ref2")
    assert code == 0 and "critical" in out and "delta = 4" in out


def test_analyze_supercritical(capsys):
    code, out, _ = run(capsys, "analyze", "--model", "ref1-supercritical", "--json")
    assert code == 0 and json.loads(out)["classification"] == "supercritical"
    code, _, err = run(capsys, "analyze", "--model", "ref1-supercritical", "--require-critical")
    assert code == 2 and "supercritical" in err


def test_analyze_schema_error_has_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"p": 1, "offspring": [{"kind": "finite", "atoms": [[0]],
                                                        "probs": "x"}],
                               "immigration": {"kind": "poisson", "rates": [1]}}))
    code, _, err = run(capsys, "analyze", "--model", str(bad))
    assert code == 1 and "offspring/0/probs" in err
    bad.write_text('{"p": 1,\n "offspring": }')
    code, _, err = run(capsys, "analyze", "--model", str(bad))
    assert code == 1 and "line 2" in err


def test_model_file_roundtrip(tmp_path, capsys):
    path = tmp_path / "ref2.json"
    path.write_text(json.dumps(load_model("ref2").to_config()))
    code, out, _ = run(capsys, "analyze", "--model", str(path), "--json")
    assert json.loads(out)["model"]["model_id"] == load_model("ref2").model_id


def test_moments_ref1(capsys):
    code, out, _ = run(capsys, "moments", "--model", "ref1", "--k", "3", "--json")
    assert code == 0
    data = json.loads(out)
    jsonschema.validate(data, load_schema("moments"))
    assert data["rows"][-1]["mean"] == [3.0] and data["rows"][-1]["cov"] == [[6.0]]
    code, out, _ = run(capsys, "moments", "--model", "ref1", "--k", "3")
    assert "mean = [3.]" in out


def test_sde_deterministic(capsys, tmp_path):
    out_csv = tmp_path / "path.csv"
    code, out, _ = run(capsys, "sde", "--b", "1", "--c", "0", "--x0", "2", "--t-max", "1",
                       "--json", "--out", str(out_csv))
    data = json.loads(out)
    jsonschema.validate(data, load_schema("sde"))
    assert code == 0 and data["terminal"] == pytest.approx(3.0, abs=1e-12)
    lines = out_csv.read_bytes().split(b"\r\n")
    assert lines[0] == b"t,value" and len(lines) == 1001 + 2


def test_sde_ensemble_from_model(capsys):
    code, out, _ = run(capsys, "sde", "--model", "ref2", "--reps", "500", "--json",
                       "--seed", "3")
    data = json.loads(out)
    jsonschema.validate(data, load_schema("sde"))
    assert data["b"] == pytest.approx(1.0) and data["min"] >= 0
    assert abs(data["terminal_mean"] - 1.0) <= 5 * data["terminal_se"]


def test_simulate_csv_and_determinism(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        code, out, _ = run(capsys, "simulate", "--model", "ref2", "--k", "30", "--reps", "5",
                           "--seed", "11", "--out", str(path), "--json")
        assert code == 0
        jsonschema.validate(json.loads(out), load_schema("simulate"))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes().startswith(b"replicate,k,X_1,X_2\r\n")


def test_seed_env_fallback(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("BB_SEED", "11")
    p1 = tmp_path / "env.csv"
    run(capsys, "simulate", "--model", "ref2", "--k", "30", "--reps", "5", "--out", str(p1))
    monkeypatch.delenv("BB_SEED")
    p2 = tmp_path / "flag.csv"
    run(capsys, "simulate", "--model", "ref2", "--k", "30", "--reps", "5", "--seed", "11",
        "--out", str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_simulate_x0_validation(capsys):
    code, _, err = run(capsys, "simulate", "--model", "ref2", "--x0", "1")
    assert code == 1 and "--x0" in err


def test_unwritable_output(capsys):
    code, _, err = run(capsys, "moments", "--model", "ref1", "--out", "/no/such/dir/x.csv")
    assert code == 1 and "not writable" in err


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["analyze", "--model", "ref1", "--bogus"])
    assert info.value.code == 2


def test_converge_small_plan(capsys, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"n_list": [20, 80], "t_list": [1.0], "N": 200, "dt": 0.01}))
    rep, cells = tmp_path / "r.json", tmp_path / "c.csv"
    code, out, _ = run(capsys, "converge", "--model", "ref2", "--plan", str(plan),
                       "--seed", "5", "--out", str(rep), "--csv", str(cells))
    assert code in (0, 2)
    data = json.loads(rep.read_text())
    jsonschema.validate(data, load_schema("report"))
    assert data["plan"]["n_list"] == [20, 80] and data["plan"]["seed"] == 5
    assert ("overall: PASS" in out) == (code == 0)
    assert cells.read_text().startswith("section,n,t,metric,value")


def test_converge_bad_plan(capsys, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"n_list": [], "N": 200}))
    code, _, err = run(capsys, "converge", "--model", "ref2", "--plan", str(plan))
    assert code == 1 and "n_list" in err


def test_converge_flag_overrides(capsys):
    code, out, _ = run(capsys, "converge", "--model", "ref1", "--n", "20,80", "--t", "1",
                       "--reps", "150", "--dt", "0.01", "--json", "--initial-ray", "1")
    data = json.loads(out)
    assert data["plan"]["N"] == 150
    assert data["plan"]["initial"] == {"kind": "ray", "law": {"kind": "point", "value": 1.0}}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "critbranch", "moments", "--model", "ref1",
                          "--k", "2"], capture_output=True, text=True)
    assert res.returncode == 0 and "mean = [2.]" in res.stdout
