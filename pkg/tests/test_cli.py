import csv
import json
import os
import re

import numpy as np
import pytest

from ellreach import cli
from ellreach.ellipsoid import Ellipsoid
from ellreach.errors import ParseError, ShapeDegenerate, ValidationError
from ellreach.ltv import time_reverse

PROBLEMS = os.path.join(os.path.dirname(__file__), os.pardir, "problems")

SAMPLED = {
    "schema_version": 1,
    "system": {"samples": {"times": [0.0, 1.0, 2.0],
                           "A": [[[0.0, 1.0], [-1.0, 0.0]], [[0.0, 1.0], [-2.0, 0.0]], [[0.0, 1.0], [-3.0, 0.0]]],
                           "B": [[[0.0], [1.0]], [[0.0], [1.0]], [[0.0], [2.0]]]}},
    "input": {"center": [0.0], "shape": [[1.0]]},
    "terminal": {"center": [0.1, 0.0], "shape": [[0.04, 0.01], [0.01, 0.02]]},
    "horizon": {"t0": 0.0, "T": 2.0},
    "run": {"mode": "over", "n_q": 4, "dt": 0.02, "t_eval": [0.0, 1.0]},
}


def _text(doc):
    return json.dumps(doc, indent=2)


def _equal_problems(a, b):
    assert a.A == b.A and a.B == b.B
    assert (a.t0, a.T, a.direction) == (b.t0, b.T, b.direction)
    for x, y in ((a.input, b.input), (a.terminal, b.terminal)):
        np.testing.assert_array_equal(x.q, y.q)
        np.testing.assert_array_equal(x.Q, y.Q)


def test_parse_builtin_oscillator_defaults():
    doc = {"schema_version": 1, "system": {"builtin": "parametric_oscillator"},
           "run": {"mode": "under", "n_q": 21}}
    prob, cfg = cli.parse_problem_text(_text(doc))
    assert (prob.t0, prob.T, prob.n, prob.m) == (0.0, 1.5, 2, 1)
    np.testing.assert_allclose(prob.terminal.Q, 0.01 * np.eye(2))
    np.testing.assert_allclose(prob.input.Q, [[1.0]])
    assert cfg.run.n_q == 21 and cfg.run.dt == 0.01
    assert cfg.run.q_min == 1e-4 and cfg.run.kappa_min == 1e-4
    assert cfg.cfl == 0.5 and cfg.n_dirs == 512 and cfg.resolution == 251
    assert cfg.box == ((-2.0, 2.0), (-2.0, 2.0))


def test_parse_shipped_problem_files():
    for name in sorted(os.listdir(PROBLEMS)):
        prob, cfg = cli.parse_problem(os.path.join(PROBLEMS, name))
        assert cfg.mode in cli.MODES
        assert prob.direction == "backward"


def test_missing_terminal_is_a_validation_error():
    doc = dict(SAMPLED)
    del doc["terminal"]
    with pytest.raises(ValidationError, match="terminal"):
        cli.parse_problem_text(_text(doc))


def test_non_spd_shape_is_a_validation_error():
    doc = dict(SAMPLED, terminal={"center": [0.0, 0.0], "shape": [[1.0, 2.0], [2.0, 1.0]]})
    with pytest.raises(ValidationError):
        cli.parse_problem_text(_text(doc))


def test_other_validation_errors():
    with pytest.raises(ValidationError):
        cli.parse_problem_text(_text(dict(SAMPLED, horizon={"t0": 1.0, "T": 1.0})))
    with pytest.raises(ValidationError):
        cli.parse_problem_text(_text(dict(SAMPLED, input={"center": [0.0, 0.0], "shape": [[1, 0], [0, 1]]})))
    with pytest.raises(ValidationError):
        cli.parse_problem_text(_text(dict(SAMPLED, run={"mode": "sideways"})))
    with pytest.raises(ValidationError):
        cli.parse_problem_text(_text(dict(SAMPLED, run={"t_eval": [3.0]})))


def test_malformed_json_reports_line():
    text = '{\n  "schema_version": 1,\n  "system": {"builtin": "single_integrator"}\n  "run": {}\n}'
    with pytest.raises(ParseError, match=r"bad\.json:4:"):
        cli.parse_problem_text(text, source="bad.json")


def test_wrong_type_reports_field_and_line():
    doc = dict(SAMPLED, run={"mode": "under", "n_q": "many"})
    text = _text(doc)
    with pytest.raises(ParseError) as info:
        cli.parse_problem_text(text, source="p.json")
    line = next(k for k, s in enumerate(text.splitlines(), 1) if '"n_q"' in s)
    assert f"p.json:{line}" in str(info.value) and "run.n_q" in str(info.value)


def test_unsupported_schema_version():
    with pytest.raises(ParseError, match="schema_version"):
        cli.parse_problem_text(_text(dict(SAMPLED, schema_version=7)))


@pytest.mark.parametrize("doc", [
    {"schema_version": 1, "system": {"builtin": "parametric_oscillator"},
     "run": {"mode": "compare", "n_q": 21, "n_q_over": 5, "t_eval": [0.0, 0.5]}},
    SAMPLED,
    dict(SAMPLED, direction="forward"),
    {"schema_version": 1, "system": {"constant": {"A": [[0.0]], "B": [[1.0]]}},
     "input": {"center": [0.0], "shape": [[1.0]]}, "terminal": {"center": [0.0], "shape": [[0.01]]},
     "horizon": {"t0": 0.0, "T": 1.0}, "direction": "forward", "run": {"workers": 2}},
])
def test_round_trip_is_identity(doc):
    prob, cfg = cli.parse_problem_text(_text(doc))
    again, cfg2 = cli.parse_problem_text(_text(cli.serialize_problem(prob, cfg)))
    _equal_problems(prob, again)
    assert cfg == cfg2


def test_forward_problem_is_reversed_on_parse():
    prob, cfg = cli.parse_problem_text(_text(dict(SAMPLED, direction="forward")))
    base, _ = cli.parse_problem_text(_text(SAMPLED))
    assert cfg.direction == "forward"
    rev = time_reverse(base)
    assert prob.direction == "backward"
    assert prob.A == rev.A and prob.B == rev.B
    np.testing.assert_allclose(prob.A(0.5), -base.A(1.5))


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_integrator_under_run_reports_q0(tmp_path):
    prob, cfg = cli.parse_problem(os.path.join(PROBLEMS, "integrator_under.json"), out_dir=str(tmp_path))
    report = cli.run_command(prob, cfg)
    rows = _read_rows(tmp_path / "family.csv")
    assert rows[0] == ["t", "i", "q1", "Q11", "xstar1"]
    assert float(rows[1][3]) == pytest.approx(1.21, abs=1e-6)
    assert report.areas["under"][0.0] == pytest.approx(2.2, abs=1e-6)
    assert os.path.exists(tmp_path / "report.json")


def test_family_csv_two_times(tmp_path):
    doc = {"schema_version": 1, "system": {"builtin": "parametric_oscillator"},
           "run": {"mode": "under", "n_q": 1, "t_eval": [0.0, 1.0]}}
    prob, cfg = cli.parse_problem_text(_text(doc), out_dir=str(tmp_path))
    cli.run_command(prob, cfg)
    rows = _read_rows(tmp_path / "family.csv")
    assert rows[0] == ["t", "i", "q1", "q2", "Q11", "Q12", "Q21", "Q22", "xstar1", "xstar2"]
    assert len(rows) == 3
    assert [float(r[0]) for r in rows[1:]] == [0.0, 1.0]
    assert os.path.exists(tmp_path / "plot.svg")


def test_unit_circle_polyline_accuracy():
    pts = cli.ellipse_polyline(Ellipsoid([0.0, 0.0], np.eye(2)), 128)
    mids = 0.5 * (pts[1:] + pts[:-1])
    radial = np.concatenate([np.linalg.norm(pts, axis=1), np.linalg.norm(mids, axis=1)])
    assert np.max(np.abs(radial - 1.0)) < 1e-3


def test_svg_contains_expected_layers(tmp_path, under_family, pmp_polygons):
    x_stars = [s.x_star for s in under_family.states_at(0.0)]
    path = cli.write_svg(str(tmp_path / "p.svg"), [[-2, 2], [-2, 2]], under_family.snapshot(0.0),
                         x_stars, pmp_polygons[0.0])
    text = open(path, encoding="utf-8").read()
    assert text.startswith("<svg") or text.startswith("<?xml")
    assert len(re.findall("<polyline", text)) >= 21 + 1
    assert "stroke-dasharray" in text and "<circle" in text


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    good = os.path.join(PROBLEMS, "integrator_under.json")
    assert cli.main(["run", good, "--out", str(tmp_path / "ok"), "--quiet"]) == 0
    assert capsys.readouterr().out == ""

    bad = tmp_path / "bad.json"
    bad.write_text(_text(dict(SAMPLED, terminal={"center": [0.0, 0.0], "shape": [[1, 2], [2, 1]]})))
    assert cli.main(["run", str(bad), "--out", str(tmp_path / "bad")]) == 2

    assert cli.main(["run", str(tmp_path / "missing.json")]) == 4

    def degenerate(prob, cfg):
        raise ShapeDegenerate(0.9, 0)

    monkeypatch.setattr(cli, "run_command", degenerate)
    assert cli.main(["run", good, "--out", str(tmp_path / "deg")]) == 3
    assert "member 0" in capsys.readouterr().err


def test_main_mode_override(tmp_path, capsys):
    good = os.path.join(PROBLEMS, "integrator_under.json")
    assert cli.main(["run", good, "--mode", "over", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "mode over" in out
    rows = _read_rows(tmp_path / "family.csv")
    assert float(rows[1][3]) == pytest.approx(1.21, abs=1e-6)
