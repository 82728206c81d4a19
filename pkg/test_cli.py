import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from bellman import problem_from_model, solve_tree_dp
from cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main, parse_sweep, parse_tolerances
from errors import ConfigError
from model import load_model_file

FIXTURES = Path(__file__).parent / "fixtures"


def fixture(name):
    return str(FIXTURES / name)


def dp_value(path):
    problem = problem_from_model(load_model_file(path))
    return solve_tree_dp(problem.lattice, problem.spec, problem.constraint).value0


def test_parse_helpers():
    assert parse_tolerances(["tol_mart=1e-8", " ode_steps = 10"]) == {"tol_mart": "1e-8", "ode_steps": "10"}
    assert parse_sweep("p=0.1,0.5") == ("p", [0.1, 0.5])
    assert parse_sweep("steps=") == ("steps", [])
    with pytest.raises(ConfigError):
        parse_tolerances(["tol_mart"])
    with pytest.raises(ConfigError):
        parse_sweep("colour=1")


def test_solve_writes_outputs(tmp_path):
    assert main(["solve", "--model", fixture("merton_theta.json"), "--out", str(tmp_path)]) == EXIT_OK
    for name in ("opportunity.csv", "drift_residual.csv", "summary.json", "candidate.json"):
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["L0"] == pytest.approx(np.exp(0.02), rel=1e-2)
    assert summary["steps"] == 50
    assert summary["strategy_at_root"]["pi"][0] == pytest.approx(0.4, rel=5e-2)
    frame = pd.read_csv(tmp_path / "opportunity.csv")
    assert len(frame) == 51


def test_no_trade_value(tmp_path):
    assert main(["solve", "--model", fixture("no_trade.json"), "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "summary.json").read_text())["L0"] == pytest.approx(1.0)


def test_bad_model_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert main(["solve", "--model", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["solve", "--model", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["solve"]) == EXIT_USAGE
    assert main(["launch", "--model", fixture("merton.json")]) == EXIT_USAGE


def test_verify_exit_codes(tmp_path):
    model = fixture("tree_two_period.json")
    assert main(["verify", "--model", model, "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "verify.json").read_text())["passed"] is True

    assert main(["solve", "--model", model, "--out", str(tmp_path)]) == EXIT_OK
    candidate = json.loads((tmp_path / "candidate.json").read_text())
    candidate["levels"][0][0]["ell"] *= 1.1
    perturbed = tmp_path / "perturbed.json"
    perturbed.write_text(json.dumps(candidate), encoding="utf-8")
    assert main(["verify", "--model", model, "--candidate", str(perturbed), "--out", str(tmp_path)]) == EXIT_FAIL
    assert json.loads((tmp_path / "verify.json").read_text())["flags"]["z_martingale"] is False

    missing = tmp_path / "nope.json"
    assert main(["verify", "--model", model, "--candidate", str(missing), "--out", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.parametrize("name, diagonal", [("scalar_transform.json", [0.5]), ("tree_two_asset.json", [0.5, 0.5])])
def test_transform_preserves_value(tmp_path, name, diagonal):
    model = fixture(name)
    assert main(["transform", "--model", model, "--out", str(tmp_path)]) == EXIT_OK
    Phi = np.array(json.loads((tmp_path / "phi.json").read_text())["Phi"])
    assert np.diag(Phi).tolist() == pytest.approx(diagonal)
    transformed = tmp_path / "transformed_model.json"
    assert dp_value(transformed) == pytest.approx(dp_value(model), abs=1e-9)
    problem = problem_from_model(load_model_file(transformed))
    for e in np.eye(problem.lattice.d):
        assert problem.constraint.contains(e)


def test_transform_rejects_unrepresentable_constraint(tmp_path):
    assert main(["transform", "--model", fixture("two_asset.json"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_sweep_over_exponent(tmp_path):
    assert main(["sweep", "--model", fixture("merton_theta.json"), "--sweep", "p=0.1,0.5,0.9", "--out", str(tmp_path)]) == EXIT_OK
    frame = pd.read_csv(tmp_path / "sweep_p.csv")
    assert list(frame.columns) == ["p", "L0", "value0", "pi_0", "kappa", "error"]
    for p, L0 in zip(frame["p"], frame["L0"]):
        assert L0 == pytest.approx(np.exp(p / (2.0 * (1.0 - p)) * 0.04), rel=1e-2)


def test_sweep_over_steps_converges(tmp_path):
    assert main(["sweep", "--model", fixture("merton_theta.json"), "--sweep", "steps=25,50,100", "--out", str(tmp_path)]) == EXIT_OK
    frame = pd.read_csv(tmp_path / "sweep_steps.csv")
    errors = np.abs(frame["L0"] - np.exp(0.02)).tolist()
    assert errors[0] > errors[1] > errors[2]


def test_empty_sweep_writes_header_only(tmp_path):
    assert main(["sweep", "--model", fixture("merton.json"), "--sweep", "steps=", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "sweep_steps.csv").read_text().splitlines()
    assert lines == ["steps,L0,value0,pi_0,kappa,error"]


def test_sweep_records_cell_errors(tmp_path):
    assert main(["sweep", "--model", fixture("merton.json"), "--sweep", "radius=1", "--out", str(tmp_path)]) == EXIT_OK
    frame = pd.read_csv(tmp_path / "sweep_radius.csv")
    assert "radius" in frame["error"].iloc[0]
    assert np.isnan(frame["L0"].iloc[0])


def test_box_radius_sweep(tmp_path):
    args = ["sweep", "--model", fixture("tree_two_period.json"), "--sweep", "radius=0.5,1", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    frame = pd.read_csv(tmp_path / "sweep_radius.csv")
    assert frame["error"].isna().all()
    assert frame["L0"].iloc[0] <= frame["L0"].iloc[1]


@pytest.mark.parametrize("extra", [["--tol", "tol_mart"], ["--tol", "tol_nonsense=1"], ["--sweep", "colour=1"]])
def test_usage_errors(tmp_path, extra):
    args = ["sweep", "--model", fixture("merton.json"), "--out", str(tmp_path)] + extra
    assert main(args) == EXIT_USAGE


def test_g_eval(capsys):
    assert main(["g-eval", "--model", fixture("merton.json"), "--y", "1"]) == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result["g"] == pytest.approx(0.09)
    assert result["maximizer"][0] == pytest.approx(5.0)
    assert result["g_max"] == pytest.approx(0.25)
    assert result["starts"] == 5
    assert main(["g-eval", "--model", fixture("merton.json")]) == EXIT_USAGE


def test_oracle_on_vanishing_wealth(tmp_path):
    assert main(["oracle", "--model", fixture("terminal_wealth_vanishes.json"), "--out", str(tmp_path)]) == EXIT_OK
    result = json.loads((tmp_path / "oracle.json").read_text())
    assert result["oracle_value"] == pytest.approx(3.0)
    assert result["gap"] == pytest.approx(0.0, abs=1e-12)
    assert result["combinations"] == 2


def test_outputs_are_deterministic(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert main(["solve", "--model", fixture("tree_two_period.json"), "--out", str(out), "--seed", "3"]) == EXIT_OK
    for path in first.iterdir():
        assert path.read_bytes() == (second / path.name).read_bytes()


def test_parallel_sweep_matches_sequential(tmp_path):
    base = ["sweep", "--model", fixture("tree_two_period.json"), "--sweep", "p=0.2,0.5,-1"]
    assert main(base + ["--out", str(tmp_path / "seq")]) == EXIT_OK
    assert main(base + ["--out", str(tmp_path / "par"), "--parallel"]) == EXIT_OK
    assert (tmp_path / "seq" / "sweep_p.csv").read_bytes() == (tmp_path / "par" / "sweep_p.csv").read_bytes()


def test_g_eval_random_starts_follow_the_seed(capsys):
    args = ["g-eval", "--model", fixture("tree_two_period.json"), "--y", "0.5", "--seed"]
    assert main(args + ["4"]) == EXIT_OK
    first = json.loads(capsys.readouterr().out)
    assert first["start_spread"] <= 1e-8
    assert main(args + ["4"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == first


def test_verify_seed_is_reproducible(tmp_path):
    model = fixture("tree_two_period.json")
    reports = []
    for seed, name in ((5, "a"), (5, "b"), (6, "c")):
        assert main(["verify", "--model", model, "--out", str(tmp_path / name), "--seed", str(seed)]) == EXIT_OK
        reports.append((tmp_path / name / "verify.json").read_bytes())
    assert reports[0] == reports[1]
    assert json.loads(reports[2])["passed"] is True
