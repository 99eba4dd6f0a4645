import json
import os
import subprocess
import sys
from fractions import Fraction
from pathlib import Path

import pytest

from twomicro.cli import main
from twomicro.harness import (
    NON_RESONANT,
    SpecValidationError,
    load_spec,
    parse_spec,
    resolve_threads,
    run,
    snap_frequency,
)

SPECS = Path(__file__).resolve().parents[1] / "specs"
ALL_SPECS = sorted(p.name for p in SPECS.glob("*.json"))


def test_snap_examples():
    s = snap_frequency([0.5, 0.25], 8)
    assert s.vector.entries == (Fraction(1, 2), Fraction(1, 4)) and s.token is None
    assert max(s.residuals) == 0
    s = snap_frequency([0.333333333, 1.0], 8)
    assert s.vector.entries == (Fraction(1, 3), Fraction(1)) and s.token is None
    s = snap_frequency([2 ** 0.5, 0.0], 8)
    assert s.token == NON_RESONANT and s.module.rank == 0
    assert s.report()["max_residual"] > 1e-9
    with pytest.raises(ValueError):
        snap_frequency([0.5], 0)


def test_classify_run(tmp_path):
    rec = run(load_spec(SPECS / "classify.json"), tmp_path)
    rows = (tmp_path / "classify.csv").read_text().splitlines()
    assert rows[0] == "xi,rank,order,basis"
    assert rows[1] == '1/3 1/2,1,1,"[[3,-2]]"'
    assert rec.summary["count"] == 4


def test_full_torus_observability(tmp_path):
    spec = parse_spec({"kind": "observability", "d": 2, "N": 3,
                       "observation": {"T": "1.5", "boxes": [[["0", "1"], ["0", "1"]]]}})
    rec = run(spec, tmp_path)
    assert abs(rec.summary["lambda_min"] - 1.5) < 1e-12


@pytest.mark.parametrize("name", ALL_SPECS)
def test_round_trip(name):
    spec = load_spec(SPECS / name)
    text = spec.serialize()
    again = parse_spec(text)
    assert again.serialize() == text and again.spec_hash() == spec.spec_hash()


@pytest.mark.parametrize("name", ["evolve.json", "twomicro.json", "observability.json"])
def test_runs_are_deterministic(name, tmp_path):
    spec = load_spec(SPECS / name)
    a = run(spec, tmp_path / "a", threads=1)
    b = run(spec, tmp_path / "b", threads=2)
    assert a.spec_hash == b.spec_hash
    for out in a.outputs:
        if out.endswith(".csv") or out in ("summary.json", "spec.json"):
            assert (tmp_path / "a" / out).read_bytes() == (tmp_path / "b" / out).read_bytes()


@pytest.mark.parametrize("doc, field", [
    ({"kind": "classify", "d": 2, "frequencies": [[0.5, "1"]]}, "frequencies[0]"),
    ({"kind": "classify", "d": 2, "frequencies": [["1"]]}, "frequencies[0]"),
    ({"kind": "nope", "d": 1}, "kind"),
    ({"kind": "classify", "frequencies": []}, "d"),
    ({"kind": "classify", "d": 1, "frequencies": [["1"]], "extra": 1}, "extra"),
    ({"kind": "twomicro", "d": 2, "modules": [[[2, 0]]]}, "modules[0]"),
    ({"kind": "evolve", "d": 1, "t_samples": [0], "family": {"name": "random", "params": {"N": 2}}}, "family.seed"),
    ({"kind": "evolve", "d": 1, "t_samples": [1, 0], "family": {"name": "plane_wave", "params": {"k": [0]}}},
     "t_samples"),
    ({"kind": "wigner", "d": 1, "h_grid": [0.1, 0.2], "symbol": {"xmode": [[0]]},
      "family": {"name": "plane_wave", "params": {"k": [0]}}}, "h_grid"),
    ({"kind": "observability", "d": 1}, "observation"),
])
def test_validation_names_field(doc, field):
    with pytest.raises(SpecValidationError) as info:
        parse_spec(doc)
    assert info.value.field == field


def test_unsaturated_module_suggests_saturation():
    with pytest.raises(SpecValidationError, match=r"\[\[1, 0\]\]"):
        parse_spec({"kind": "twomicro", "d": 2, "modules": [[[2, 0]]]})


def test_threads_env(monkeypatch):
    monkeypatch.delenv("TWOMICRO_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("TWOMICRO_THREADS", "3")
    assert resolve_threads() == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("TWOMICRO_THREADS", "x")
    with pytest.raises(SpecValidationError):
        resolve_threads()


def _write(tmp_path, doc):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["classify", "--spec", str(SPECS / "classify.json"), "--out", str(tmp_path / "ok")]) == 0
    bad = _write(tmp_path, {"kind": "classify", "d": 2, "frequencies": [[0.5, "1"]]})
    assert main(["classify", "--spec", bad]) == 2
    assert main(["evolve", "--spec", str(SPECS / "classify.json")]) == 2
    assert main(["classify", "--spec", str(tmp_path / "missing.json")]) == 2
    escape = _write(tmp_path, {"kind": "evolve", "d": 2, "N": 1, "t_samples": [0],
                               "family": {"name": "plane_wave", "params": {"k": [3, 0]}}})
    assert main(["evolve", "--spec", escape, "--out", str(tmp_path / "esc")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["classify"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["classify", "--spec", bad, "--threads", "two"])
    assert info.value.code == 2


def test_cli_plot_data(tmp_path):
    out = tmp_path / "obs"
    assert main(["observability", "--spec", str(SPECS / "observability.json"), "--out", str(out), "--plot-data"]) == 0
    header = (out / "plot_observability.csv").read_text().splitlines()[0]
    assert header == "N,lambda_min"


def test_console_script_threads_env(tmp_path):
    env = dict(os.environ, TWOMICRO_THREADS="2")
    proc = subprocess.run([sys.executable, "-m", "twomicro.cli", "observability", "--spec",
                           str(SPECS / "observability.json"), "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["summary"]["N_max"] == 32
    env["TWOMICRO_THREADS"] = "0"
    proc = subprocess.run([sys.executable, "-m", "twomicro.cli", "observability", "--spec",
                           str(SPECS / "observability.json"), "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2
