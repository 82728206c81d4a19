"""
Command-line front-end: solve, oracle, verify, transform, g-eval and sweep.

Exit codes: 0 success, 1 verification failure, 2 usage or model error.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bellman import (
    OneStep,
    OpportunityLattice,
    Problem,
    StrategyGrid,
    brute_force_oracle,
    candidate_from_opportunity,
    drift_identity_residual,
    load_candidate,
    opportunity_frame,
    problem_from_model,
    residual_frame,
    save_candidate,
    solve_tree_dp,
    write_csv,
)
from config import Settings, configure_logging, load_settings
from constraints import transform_model
from errors import BellmanError, ConfigError, ModelError
from gfun import GContext, directional_G, eval_g, maximize_g, multistart_maximize
from model import JointCharacteristics, ModelFile, TreeNodeSpec, load_model_file, parse_model
from verify import VerificationReport, verify_all

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_AXES = ("p", "steps", "theta", "radius", "x0")


class UsageError(ConfigError):
    """Bad command-line input."""


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def parse_tolerances(items: Optional[Sequence[str]]) -> Dict[str, str]:
    """Turn ["tol_mart=1e-8", ...] into a mapping for Settings.with_overrides."""
    out: Dict[str, str] = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--tol expects NAME=VALUE, got {item!r}")
        out[name.strip()] = value.strip()
    return out


def parse_sweep(text: str) -> Tuple[str, List[float]]:
    """'p=0.1,0.5' -> ('p', [0.1, 0.5]); an empty value list is allowed."""
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or name not in SWEEP_AXES:
        raise UsageError(f"--sweep expects NAME=v1,v2,... with NAME in {', '.join(SWEEP_AXES)}")
    try:
        return name, [float(v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"sweep values must be numbers: {values!r}") from e


def parse_vector(text: Optional[str]) -> Optional[np.ndarray]:
    if text is None:
        return None
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as e:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _write_json(data: Dict[str, Any], path: Path) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"💾 Wrote {path}")
    return path


def run_solve(model: ModelFile, out: Path, settings: Settings, seed: int = 0) -> OpportunityLattice:
    """Write opportunity.csv, summary.json, drift_residual.csv and candidate.json."""
    problem = problem_from_model(model)
    opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(opportunity_frame(opp, problem.lattice), out / "opportunity.csv")
    residuals = drift_identity_residual(opp, problem.lattice, problem.spec, problem.constraint, settings)
    write_csv(residual_frame(residuals, problem.lattice), out / "drift_residual.csv")
    summary = opp.summary()
    summary.update({"seed": seed, "steps": problem.lattice.n_steps, "max_drift_residual": max(
        (float(np.max(np.abs(level))) for level in residuals), default=0.0)})
    _write_json(summary, out / "summary.json")
    save_candidate(candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint), out / "candidate.json")
    return opp


def run_oracle(model: ModelFile, out: Path, settings: Settings, points: int, kappas: Sequence[float]) -> Dict[str, Any]:
    """Brute-force the grid-restricted problem and compare with the DP on the same grid."""
    problem = problem_from_model(model)
    grid = StrategyGrid.for_constraint(problem.constraint, points=points, kappas=kappas)
    oracle = brute_force_oracle(problem.lattice, problem.spec, grid, settings)
    kappa_grid = list(kappas) if problem.spec.intermediate else None
    dp = solve_tree_dp(problem.lattice, problem.spec, grid.as_constraint(), settings, kappa_grid)
    result = {
        "oracle_value": oracle.value,
        "dp_value": dp.value0,
        "gap": abs(oracle.value - dp.value0),
        "combinations": oracle.combinations,
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(result, out / "oracle.json")
    return result


def run_verify(
    model: ModelFile, out: Path, settings: Settings, candidate: Optional[Path] = None, seed: int = 0
) -> VerificationReport:
    """Verify a candidate file (default: the DP solution itself) and write verify.json; seed drives the random competitors."""
    problem = problem_from_model(model)
    opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
    if candidate is None:
        cand = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint, settings=settings)
    else:
        cand = load_candidate(candidate)
    rng = np.random.default_rng(seed)
    report = verify_all(cand, problem.lattice, problem.spec, problem.constraint, settings, oracle=opp, rng=rng)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "verify.json")
    return report


def _tree_characteristics(problem: Problem) -> JointCharacteristics:
    """Every distinct nonzero branch return of a tree as a unit-weight atom."""
    rows: List[np.ndarray] = []
    for k in range(problem.lattice.n_steps):
        for i in range(len(problem.lattice.levels[k])):
            for r in problem.lattice.branch_arrays(k, i)[0]:
                if np.any(r != 0) and not any(np.array_equal(r, u) for u in rows):
                    rows.append(r)
    d = problem.lattice.d
    return JointCharacteristics(bR=np.zeros(d), cR=np.zeros((d, d)), atoms_x=np.array(rows).reshape(-1, d))


def _map_tree(node: TreeNodeSpec, Phi: np.ndarray) -> Dict[str, Any]:
    return {"branches": [
        {"dR": (Phi.T @ np.array(b.dR)).tolist(), "prob": b.prob, "jump": b.jump,
         "next": None if b.next is None else _map_tree(b.next, Phi)}
        for b in node.branches
    ]}


def transform_model_file(model: ModelFile) -> Tuple[ModelFile, np.ndarray]:
    """Model file of the representative-portfolio transform together with Phi."""
    problem = problem_from_model(model)
    chars = problem.chars if problem.chars is not None else _tree_characteristics(problem)
    transformed = transform_model(chars, problem.constraint)
    Phi = transformed.Phi
    raw = model.model_dump(by_alias=True, exclude_none=True)
    raw["constraint"] = transformed.constraint.to_dict()
    if model.tree is not None:
        raw["tree"] = {"times": model.tree.times, "root": _map_tree(model.tree.root, Phi)}
    else:
        new = transformed.chars
        raw.pop("theta", None)
        raw.pop("sigma", None)
        raw["b"] = new.bR.tolist()
        raw["c"] = new.cR.tolist()
        raw["atoms"] = [{"x": x.tolist(), "xp": float(xp), "w": float(w)}
                        for x, xp, w in zip(new.atoms_x, new.atoms_xp, new.atoms_w)]
    return parse_model(raw), Phi


def run_transform(model: ModelFile, out: Path) -> Tuple[ModelFile, np.ndarray]:
    new_model, Phi = transform_model_file(model)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "transformed_model.json"
    path.write_text(new_model.model_dump_json(by_alias=True, exclude_none=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"💾 Wrote {path}")
    _write_json({"Phi": Phi.tolist()}, out / "phi.json")
    return new_model, Phi


def evaluate_g(
    model: ModelFile,
    y: np.ndarray,
    y_check: Optional[np.ndarray] = None,
    ell: Optional[float] = None,
    settings: Optional[Settings] = None,
    seed: int = 0,
) -> Dict[str, Any]:
    """
    g, G and the maximizer at the root node. Characteristic models use their own characteristics
    (ell defaults to 1); lattice models use the root branches with the DP continuation.
    The maximizer is recomputed from seeded random starts and their spread modulo N reported.
    """
    settings = settings or Settings()
    problem = problem_from_model(model)
    if problem.chars is not None:
        ctx = GContext(ell=1.0 if ell is None else ell, chars=problem.chars, p=problem.spec.p, constraint=problem.constraint)
    else:
        opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
        step = OneStep.at(problem.lattice, problem.spec, 0, 0, opp.L[1])
        ell = float(step.probs @ step.L_next) if ell is None else ell
        ctx = GContext(ell=ell, chars=step.characteristics(ell, "discrete"), p=problem.spec.p, constraint=problem.constraint)
    maximizer, g_max = maximize_g(ctx, settings)
    starts = multistart_maximize(ctx, np.random.default_rng(seed), settings)
    base = maximizer if y_check is None else y_check
    return {
        "g": eval_g(ctx, y),
        "G": directional_G(ctx, y, base),
        "maximizer": [float(v) for v in maximizer],
        "g_max": g_max,
        "starts": len(starts.maximizers),
        "start_spread": starts.spread,
    }


def _sweep_model(model: ModelFile, axis: str, value: float) -> ModelFile:
    raw = model.model_dump(by_alias=True, exclude_none=True)
    if axis == "steps":
        raw["steps"] = int(round(value))
    elif axis in ("p", "x0"):
        raw[axis] = value
    elif axis == "theta":
        raw.pop("b", None)
        raw.pop("c", None)
        raw["theta"] = [value] * model.d
    elif axis == "radius":
        kind = model.constraint.get("type")
        if kind == "ball":
            raw["constraint"] = {"type": "ball", "radius": value}
        elif kind == "box":
            raw["constraint"] = {"type": "box", "lo": [-value] * model.d, "hi": [value] * model.d}
        else:
            raise ModelError(f"the radius axis needs a ball or box constraint, not {kind}")
    return parse_model(raw)


def _sweep_cell(args: Tuple[ModelFile, str, float, Settings]) -> Dict[str, Any]:
    model, axis, value, settings = args
    row: Dict[str, Any] = {axis: value, "L0": np.nan, "value0": np.nan}
    row.update({f"pi_{j}": np.nan for j in range(model.d)})
    row.update({"kappa": np.nan, "error": ""})
    try:
        cell = _sweep_model(model, axis, value)
        problem = problem_from_model(cell)
        opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
        pi, kappa = opp.strategy.at(0, 0)
        row.update({"L0": opp.L0, "value0": opp.value0, "kappa": kappa})
        row.update({f"pi_{j}": float(v) for j, v in enumerate(pi)})
    except BellmanError as e:
        row["error"] = str(e)
    return row


def run_sweep(
    model: ModelFile,
    axis: str,
    values: Sequence[float],
    out: Path,
    settings: Settings,
    parallel: bool = False,
) -> pd.DataFrame:
    """One row per axis value; failing cells keep their error message and the sweep continues."""
    columns = [axis, "L0", "value0"] + [f"pi_{j}" for j in range(model.d)] + ["kappa", "error"]
    jobs = [(model, axis, float(v), settings) for v in values]
    logger.info(f"🧮 Sweeping {axis} over {len(jobs)} values{' in parallel' if parallel and jobs else ''}")
    if parallel and jobs:
        with ProcessPoolExecutor() as ex:
            rows = list(ex.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]
    for row in rows:
        if row["error"]:
            logger.warning(f"⚠️ {axis}={row[axis]}: {row['error']}")
    frame = pd.DataFrame(rows, columns=columns)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(frame, out / f"sweep_{axis}.csv")
    return frame


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bellman-power", description="Constrained power-utility Bellman solver and verifier")
    parser.add_argument("command", choices=["solve", "oracle", "verify", "transform", "g-eval", "sweep"])
    parser.add_argument("--model", required=True, type=Path, help="bp-model/1 JSON file")
    parser.add_argument("--candidate", type=Path, help="bp-candidate/1 JSON file (verify)")
    parser.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sweep", help="NAME=v1,v2,... with NAME in " + ", ".join(SWEEP_AXES))
    parser.add_argument("--tol", action="append", metavar="NAME=VALUE", help="Override a setting (repeatable)")
    parser.add_argument("--parallel", action="store_true", help="Run sweep cells in separate processes")
    parser.add_argument("--grid-points", type=int, default=5, help="Grid points per coordinate (oracle)")
    parser.add_argument("--kappas", default="0.25,0.5,1.0", help="Consumption grid (oracle)")
    parser.add_argument("--y", help="Portfolio for g-eval, comma-separated")
    parser.add_argument("--y-check", help="Base point of G for g-eval (default: the maximizer)")
    parser.add_argument("--ell", type=float, help="Left limit of the opportunity process for g-eval")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        settings = load_settings().with_overrides(parse_tolerances(args.tol))
        configure_logging("DEBUG" if args.verbose else settings.log_level)
        model = load_model_file(args.model)

        if args.command == "solve":
            opp = run_solve(model, args.out, settings, args.seed)
            print(json.dumps(opp.summary(), indent=2))
        elif args.command == "oracle":
            kappas = parse_vector(args.kappas)
            print(json.dumps(run_oracle(model, args.out, settings, args.grid_points, kappas.tolist()), indent=2))
        elif args.command == "verify":
            report = run_verify(model, args.out, settings, args.candidate, args.seed)
            print(report.model_dump_json(by_alias=True, indent=2))
            return EXIT_OK if report.passed else EXIT_FAIL
        elif args.command == "transform":
            _, Phi = run_transform(model, args.out)
            print(json.dumps({"Phi": Phi.tolist()}))
        elif args.command == "g-eval":
            y = parse_vector(args.y)
            if y is None:
                raise UsageError("g-eval needs --y")
            result = evaluate_g(model, y, parse_vector(args.y_check), args.ell, settings, args.seed)
            print(json.dumps(result, indent=2))
        elif args.command == "sweep":
            if not args.sweep:
                raise UsageError("sweep needs --sweep NAME=v1,v2,...")
            axis, values = parse_sweep(args.sweep)
            run_sweep(model, axis, values, args.out, settings, args.parallel)
    except BellmanError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
