import json

import pytest

from normalsym.cli import (BUILTIN_SCENARIOS, builtin_scenario, list_builtin_scenarios, main,
                           parse_scenario, run_scenario)
from normalsym.errors import ParseError, ScenarioInvalid

CIRCLE_Q = """
# quantization on the circle
[task]
type = "Quantize"
manifold = "Circle"
a = "zeta1^2"
a_order = 2
kmax = 8
"""


def test_catalog():
    names = list_builtin_scenarios()
    assert set(names) == set(BUILTIN_SCENARIOS)
    for key in ("geometry-sphere", "sphere-sharp-curvature", "parametrix-torus",
                "ellipticity-zeta1"):
        assert key in names and names[key]


@pytest.mark.parametrize("text,line", [
    ("[task]\ntype = \"Quantize\"\noops\n", 3),
    ("[task]\n[task]\n", 2),
    ("[other]\n", 1),
    ("[task]\ntype = \"Quantize\"\ntype = \"Quantize\"\n", 3),
    ("[task]\n\na = [1, 2\n", 3),
    ("[task]\ntype = \"Quantize\"\nmanifold = \"Circle\"\na = \"zeta3\"\na_order = 1\n", 4),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_scenario(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize("text,field", [
    ("[task]\ntype = \"Nope\"\n", "type"),
    ("[task]\ntype = \"Quantize\"\nmanifold = \"Circle\"\n", "a"),
    ("[task]\ntype = \"Quantize\"\nmanifold = \"Klein\"\na = \"zeta1\"\na_order = 1\n",
     "manifold"),
])
def test_scenario_invalid(text, field):
    with pytest.raises(ScenarioInvalid) as err:
        parse_scenario(text)
    assert field in str(err.value)


def test_missing_section():
    with pytest.raises(ScenarioInvalid):
        parse_scenario("type = \"Quantize\"\n")


def test_run_writes_outputs(tmp_path):
    sc = parse_scenario(CIRCLE_Q, "circle-q.scn")
    rep = run_scenario(sc, seed=1, out=tmp_path)
    assert rep["passed"]
    js = json.loads((tmp_path / "circle-q.json").read_text())
    assert js["schema_version"] == 1 and js["task"] == "Quantize" and js["seed"] == 1
    assert set(js) >= {"scenario", "manifold", "checks", "summary", "passed"}
    rows = (tmp_path / "circle-q.csv").read_text().splitlines()
    assert rows[0] == "k,eigen_re,eigen_im,rel_err"
    assert len(rows) == 1 + 17


def test_determinism(tmp_path):
    out = []
    for i in range(2):
        d = tmp_path / str(i)
        run_scenario(builtin_scenario("adjoint-pairing-circle"), seed=7, out=d)
        out.append((d / "adjoint-pairing-circle.csv").read_bytes())
    assert out[0] == out[1]


@pytest.mark.parametrize("name", ["geometry-sphere", "sphere-sharp-curvature", "parametrix-torus",
                                  "ellipticity-zeta1"])
def test_builtins_pass(name, tmp_path):
    assert main(["run", f"builtin:{name}", "--seed", "0", "--out", str(tmp_path)]) == 0
    js = json.loads((tmp_path / f"{name}.json").read_text())
    assert js["passed"] and all(c["passed"] for c in js["checks"].values())


def test_sphere_sharp_reports_curvature_term(tmp_path):
    rep = run_scenario(builtin_scenario("sphere-sharp-curvature"), seed=0, out=tmp_path)
    assert rep["summary"]["exact_to_roundoff"] is True
    header = (tmp_path / "sphere-sharp-curvature.csv").read_text().splitlines()[0]
    assert header == "norm_xi,err,err_without_r_term"


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("[task]\ntype = \"Quantize\"\nnonsense\n")
    assert main(["run", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err
    failing = tmp_path / "failing.scn"
    failing.write_text("[task]\ntype = \"EllipticityTest\"\nmanifold = \"FlatTorus\"\n"
                       "a = \"zeta1\"\na_order = 1\nm = 1\nexpect = \"EllipticOfOrder\"\n")
    assert main(["run", str(failing), "--out", str(tmp_path)]) == 1
    assert main(["list"]) == 0
    assert main(["run", str(tmp_path / "missing.scn")]) == 2
