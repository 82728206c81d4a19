import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from bellman import (
    CandidateFile,
    OneStep,
    StrategyGrid,
    brute_force_oracle,
    candidate_from_opportunity,
    compare_solution_to_oracle,
    decompose_martingale_part,
    drift_identity_residual,
    expected_utility,
    load_candidate,
    no_trade_value,
    opportunity_frame,
    problem_from_model,
    save_candidate,
    solve_deterministic_ito,
    solve_levy_ode,
    solve_tree_dp,
)
from config import Settings
from constraints import ConstraintSet
from errors import CandidateError, OracleBudgetError
from model import JointCharacteristics, PowerUtilitySpec, load_model_file

FIXTURES = Path(__file__).parent / "fixtures"
MERTON = JointCharacteristics(bR=[0.1], cR=[[0.04]])


def load_problem(name, **updates):
    model = load_model_file(FIXTURES / name)
    if updates:
        model = model.model_copy(update=updates)
    return problem_from_model(model)


def solve(problem, settings=None):
    return solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)


def test_wealth_may_vanish_for_positive_exponent():
    problem = load_problem("terminal_wealth_vanishes.json")
    opp = solve(problem)
    assert opp.L0 == pytest.approx(1.5)
    assert opp.value0 == pytest.approx(3.0)
    assert opp.strategy.at(0, 0)[0].tolist() == [1.0]


def test_wealth_must_stay_positive_for_negative_exponent():
    opp = solve(load_problem("terminal_wealth_vanishes_negative.json"))
    assert opp.strategy.at(0, 0)[0].tolist() == [0.0]
    assert opp.L0 == pytest.approx(1.0)


def test_one_step_objective():
    problem = load_problem("terminal_wealth_vanishes.json")
    step = OneStep.at(problem.lattice, problem.spec, 0, 0, np.ones(2))
    assert step.factors(np.array([1.0]), 0.0).tolist() == [0.0, 9.0]
    assert step.value(np.array([1.0]), 0.0) == pytest.approx(3.0)
    assert step.value(np.array([1.5]), 0.0) == float("-inf")
    assert step.best_kappa(np.array([1.0])) == 0.0


@pytest.mark.parametrize("name, combinations", [
    ("tree_three_period.json", 3 ** 7),
    ("tree_two_asset.json", 9 ** 4),
    ("tree_two_period.json", 4 ** 3),
    ("terminal_wealth_vanishes.json", 2),
    ("terminal_wealth_vanishes_negative.json", 1),
])
def test_oracle_matches_grid_restricted_dp(name, combinations):
    problem = load_problem(name)
    grid = StrategyGrid.for_constraint(problem.constraint, points=3)
    oracle = brute_force_oracle(problem.lattice, problem.spec, grid)
    opp = solve_tree_dp(problem.lattice, problem.spec, grid.as_constraint())
    assert oracle.value == pytest.approx(opp.value0, abs=1e-9)
    assert oracle.combinations == combinations


def test_oracle_budget():
    problem = load_problem("tree_two_period.json")
    grid = StrategyGrid.for_constraint(problem.constraint, points=5)
    with pytest.raises(OracleBudgetError):
        brute_force_oracle(problem.lattice, problem.spec, grid, Settings(max_oracle_combos=10))


def test_merton_lattice_converges():
    opp = solve(load_problem("merton.json", steps=200))
    assert opp.L0 == pytest.approx(np.exp(0.125), rel=1e-2)
    assert opp.strategy.at(0, 0)[0][0] == pytest.approx(5.0, rel=5e-2)


def test_consumption_without_trading():
    problem = load_problem("consumption.json")
    opp = solve(problem)
    assert opp.L0 == pytest.approx(np.sqrt(2.0), rel=1e-2)
    cand = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint)
    assert cand.kappa_formula_residual(problem.lattice, problem.spec) <= 1e-3


def test_levy_ode():
    spec = PowerUtilitySpec(p=0.5)
    assert solve_levy_ode(spec, MERTON, ConstraintSet.full(1)).L0 == pytest.approx(np.exp(0.125), abs=1e-8)
    consuming = PowerUtilitySpec(p=0.5, consumption_mode="intermediate")
    solution = solve_levy_ode(consuming, MERTON, ConstraintSet.finite([[0.0]]))
    assert solution.g0 == 0.0
    assert solution.L0 == pytest.approx(np.sqrt(2.0), abs=1e-8)
    assert solution.at(1.0) == pytest.approx(1.0)


def test_deterministic_ito_reduction():
    spec = PowerUtilitySpec(p=0.5)
    sigma = np.eye(1)
    assert solve_deterministic_ito(spec, [0.2], sigma, ConstraintSet.full(1)).L0 == pytest.approx(np.exp(0.02), abs=1e-10)
    positive = ConstraintSet.box([0.0], [np.inf])
    assert solve_deterministic_ito(spec, [-0.2], sigma, positive).L0 == pytest.approx(1.0, abs=1e-12)


def test_deterministic_ito_matches_merton_closed_form():
    rng = np.random.default_rng(21)
    for _ in range(20):
        p = float(rng.choice([rng.uniform(-3.0, -0.1), rng.uniform(0.1, 0.9)]))
        theta = rng.normal(size=2) * 0.3
        T = float(rng.uniform(0.5, 3.0))
        spec = PowerUtilitySpec(p=p, T=T)
        solution = solve_deterministic_ito(spec, theta, np.eye(2), ConstraintSet.full(2))
        expected = np.exp(p / (2.0 * (1.0 - p)) * float(theta @ theta) * T)
        assert solution.L0 == pytest.approx(expected, abs=1e-8)


def test_drift_identity_residual_is_first_order():
    worst = []
    for steps in (50, 100, 200, 400):
        problem = load_problem("merton.json", steps=steps)
        opp = solve(problem)
        residuals = drift_identity_residual(opp, problem.lattice, problem.spec, problem.constraint)
        worst.append(max(float(np.max(np.abs(level))) for level in residuals))
    for coarse, fine in zip(worst, worst[1:]):
        assert 1.5 <= coarse / fine <= 3.0


def test_drift_identity_is_exact_for_one_period():
    problem = load_problem("tree_one_period.json")
    opp = solve(problem)
    residuals = drift_identity_residual(opp, problem.lattice, problem.spec, problem.constraint, flavour="discrete")
    assert len(residuals) == 1
    assert abs(residuals[0][0]) <= 1e-10
    tree = load_problem("tree_two_period.json")
    deeper = drift_identity_residual(solve(tree), tree.lattice, tree.spec, tree.constraint, flavour="discrete")
    assert max(float(np.max(np.abs(level))) for level in deeper) <= 1e-9


@pytest.mark.parametrize("flavour", ["tagged", "discrete"])
def test_drift_identity_vanishes_without_trading(flavour):
    problem = load_problem("no_trade.json")
    opp = solve(problem)
    residuals = drift_identity_residual(opp, problem.lattice, problem.spec, problem.constraint, flavour=flavour)
    assert len(residuals) == problem.lattice.n_steps
    assert max(float(np.max(np.abs(level))) for level in residuals) <= 1e-14


def test_dp_strategy_attains_value_on_tree():
    problem = load_problem("tree_two_period.json")
    opp = solve(problem)
    assert expected_utility(problem.lattice, problem.spec, opp.strategy) == pytest.approx(opp.value0, abs=1e-12)
    assert no_trade_value(problem.lattice, problem.spec) == pytest.approx(2.0)
    assert no_trade_value(problem.lattice, problem.spec) <= opp.value0


def test_martingale_decomposition():
    problem = load_problem("tree_two_period.json")
    opp = solve(problem)
    nodes = decompose_martingale_part(opp, problem.lattice)
    root, two_branch, three_branch = nodes[0][0], nodes[1][0], nodes[1][1]
    assert np.abs(root.residual).max() == pytest.approx(0.0, abs=1e-12)
    assert np.abs(two_branch.residual).max() == pytest.approx(0.0, abs=1e-12)
    assert three_branch.residual.size == 3
    probs = problem.lattice.branch_arrays(0, 0)[1]
    dL = opp.L[1] - opp.L0
    assert root.aL == pytest.approx(float(probs @ dL) / 0.5)
    assert not root.rank_deficient


def test_minimality_against_dp():
    problem = load_problem("tree_two_period.json")
    opp = solve(problem)
    exact = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint)
    report = compare_solution_to_oracle(exact, opp)
    assert report.minimal and report.identical
    inflated = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint, scale=1.1)
    report = compare_solution_to_oracle(inflated, opp)
    assert report.minimal and not report.identical
    assert report.ell_ratio_sup == pytest.approx(1.1)


def test_candidate_file_round_trip(tmp_path):
    problem = load_problem("tree_two_period.json")
    opp = solve(problem)
    cand = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint)
    path = save_candidate(cand, tmp_path / "candidate.json")
    assert json.loads(path.read_text())["schema"] == "bp-candidate/1"
    loaded = load_candidate(path)
    loaded.validate(problem.lattice, problem.spec, problem.constraint)
    assert np.concatenate(loaded.ell).tolist() == pytest.approx(np.concatenate(cand.ell).tolist())


def test_candidate_errors(tmp_path):
    with pytest.raises(CandidateError):
        load_candidate(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[", encoding="utf-8")
    with pytest.raises(CandidateError):
        load_candidate(bad)
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"schema": "bp-candidate/1", "levels": [[{"pi": [0.0]}]]}), encoding="utf-8")
    with pytest.raises(CandidateError):
        load_candidate(wrong)


def test_candidate_validation():
    problem = load_problem("tree_two_period.json")
    opp = solve(problem)
    cand = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint)
    short = CandidateFile.from_triple(cand)
    short.levels.pop()
    with pytest.raises(CandidateError):
        short.to_triple().validate(problem.lattice, problem.spec, problem.constraint)
    outside = replace(cand, pi=(np.array([[5.0]]),) + cand.pi[1:])
    with pytest.raises(CandidateError, match="outside the constraints"):
        outside.validate(problem.lattice, problem.spec, problem.constraint)
    with pytest.raises(CandidateError, match="outside the constraints"):
        cand.validate(problem.lattice, problem.spec, ConstraintSet.finite([[0.0]]))


def test_opportunity_frame_columns():
    problem = load_problem("tree_two_period.json")
    frame = opportunity_frame(solve(problem), problem.lattice)
    assert list(frame.columns) == ["node", "level", "index", "time", "label", "L", "pi_0", "kappa"]
    assert len(frame) == problem.lattice.n_nodes
    assert frame["L"].iloc[-1] == pytest.approx(1.0)
