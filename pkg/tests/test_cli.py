from __future__ import annotations

import csv
import json
import subprocess
import sys

import jsonschema
import pytest

from jumpldp.cli import load_schema, main
from jumpldp.model import Path, write_path_csv


def run(tmp_path, command, config, name="out", extra=()):
    cfg_file = tmp_path / f"{name}.json"
    cfg_file.write_text(json.dumps(config))
    out = tmp_path / name
    code = main([command, "--config", str(cfg_file), "--out", str(out), *extra])
    return code, out


def results(out):
    return json.loads((out / "results.json").read_text())


@pytest.mark.parametrize("model,target,expected", [
    ("ou", {"kind": "fluid"}, 0.0),
    ("brownian", {"kind": "line", "slope": 1.0}, 0.5),
    ("poisson", {"kind": "poisson_floor"}, 1.0),
])
def test_rate_command(tmp_path, model, target, expected):
    code, out = run(tmp_path, "rate", {"model": {"name": model}, "target": target, "dt": 1e-3})
    assert code == 0
    r = results(out)["rate"]
    assert abs(r["value"] - expected) <= 1e-9 and r["finite"]
    with open(out / "per_step_H.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 1001


def test_rate_from_file_and_manifest_schema(tmp_path):
    write_path_csv(Path.line(2.0, 1.0, 0.01), tmp_path / "phi.csv")
    code, out = run(tmp_path, "rate", {"model": {"name": "brownian"}, "target": {"kind": "file", "path": "phi.csv"}})
    assert code == 0 and abs(results(out)["rate"]["value"] - 2.0) < 1e-12
    manifest = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(manifest, load_schema("manifest"))
    assert manifest["seed"] == 0 and "manifest.json" in manifest["outputs"]


def test_infinite_rate_is_json_safe(tmp_path):
    code, out = run(tmp_path, "rate", {"model": {"name": "poisson"}, "target": {"kind": "line", "slope": -2.0}})
    assert code == 0 and results(out)["rate"]["value"] == "inf"


def test_fluid_command(tmp_path):
    code, out = run(tmp_path, "fluid", {"model": {"name": "ou"}})
    assert code == 0
    r = results(out)["fluid"]
    assert abs(r["Y_T"] - 0.36787944117144233) < 1e-8 and r["rate"] < 1e-9


def test_simulate_command(tmp_path):
    cfg = {"model": {"name": "brownian"}, "target": {"kind": "line", "slope": 1.0},
           "simulate": {"n": 64, "M": 500, "tilted": True, "save_paths": 3}}
    code, out = run(tmp_path, "simulate", cfg)
    assert code == 0
    r = results(out)["simulate"]
    assert r["M"] == 500 and abs(r["mean_X_T"] - 1.0) < 0.05
    with open(out / "paths.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "path_0", "path_1", "path_2"] and len(rows) == 102


def test_estimate_both_methods(tmp_path):
    cfg = {"model": {"name": "brownian"}, "target": {"kind": "line", "slope": 1.0},
           "estimate": {"n": 4, "M": 4000, "delta": 0.25, "method": "both"}}
    code, out = run(tmp_path, "estimate", cfg)
    assert code == 0
    crude, tilted = results(out)["estimates"]
    assert crude["method"] == "crude" and tilted["method"] == "tilted"
    assert abs(crude["p_hat"] - tilted["p_hat"]) <= 3 * (crude["std_err"] ** 2 + tilted["std_err"] ** 2) ** 0.5


def test_ldp_check_huge_tube(tmp_path):
    cfg = {"model": {"name": "ou"}, "target": {"kind": "fluid"},
           "ldp_check": {"n_list": [4, 8], "M": 200, "delta": 1000.0, "crude_max_n": 8}}
    code, out = run(tmp_path, "ldp-check", cfg)
    assert code == 0
    r = results(out)
    # crude hits every time; the tilted weights average to one only in expectation
    assert all(row["gap"] < 1e-9 for row in r["table"] if row["method"] == "crude")
    assert all(row["gap"] < 0.05 for row in r["table"] if row["method"] == "tilted")
    assert all(row["agree"] for row in r["table"] if row["method"] == "agreement")


@pytest.mark.parametrize("model,kind,poisson_type", [("ou", "linear", False), ("delay", "log", False),
                                                     ("poisson", "unsupported", True)])
def test_diagnose_command(tmp_path, model, kind, poisson_type):
    cfg = {"model": {"name": model}, "diagnose": {"n_list": [2, 4], "M": 100}}
    code, out = run(tmp_path, "diagnose", cfg)
    assert code == 0
    d = results(out)["degeneracy"]
    assert d["bound_kind"] == kind and d["poisson_type"] is poisson_type
    assert (out / "tightness.csv").is_file()


@pytest.mark.parametrize("config", [
    {"model": {"name": "brownian"}, "target": {"kind": "line", "slope": 1.0}, "bogus": 1},
    {"model": {"name": "nosuch"}, "target": {"kind": "fluid"}},
    {"model": {"name": "brownian", "params": {"nu": 1.0}}, "target": {"kind": "fluid"}},
    {"model": {"name": "brownian"}, "target": {"kind": "line"}},
    {"model": {"name": "brownian"}, "target": {"kind": "file", "path": "missing.csv"}},
    {"model": {"name": "brownian"}},
    {"model": {"name": "brownian"}, "target": {"kind": "fluid"}, "dt": 0.3},
    {"model": {"name": "brownian"}, "target": {"kind": "fluid"}, "command": "fluid"},
])
def test_invalid_config_exits_2_before_running(tmp_path, capsys, config):
    code, out = run(tmp_path, "rate", config)
    assert code == 2 and not out.exists()
    assert "error:" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    assert main(["rate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["rate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_runtime_error_exits_1(tmp_path, capsys):
    code, _ = run(tmp_path, "rate", {"model": {"name": "brownian"}, "target": {"kind": "poisson_floor"}})
    assert code == 1 and "not Poisson-type" in capsys.readouterr().err


def test_seed_flag_overrides_config(tmp_path):
    cfg = {"model": {"name": "brownian"}, "target": {"kind": "line", "slope": 1.0}, "seed": 1,
           "estimate": {"n": 4, "M": 100, "delta": 0.25}}
    _, a = run(tmp_path, "estimate", cfg, "a", ("--seed", "9"))
    assert json.loads((a / "manifest.json").read_text())["seed"] == 9
    assert results(a)["estimates"][0]["seed"] == 9


def test_reruns_are_byte_identical(tmp_path):
    cfg = {"model": {"name": "delay"}, "target": {"kind": "fluid"}, "seed": 4, "batch_size": 64,
           "estimate": {"n": 8, "M": 300, "delta": 0.3, "method": "both"}}
    _, a = run(tmp_path, "estimate", cfg, "a", ("--threads", "1"))
    _, b = run(tmp_path, "estimate", cfg, "b", ("--threads", "3"))
    for f in ("results.json", "manifest.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "jumpldp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ldp-check" in proc.stdout
