from fastapi import FastAPI, HTTPException
from pydantic import BaseModel
import logging
from typing import Any, Dict, List, Optional

import numpy as np

from bellman import (
    CandidateFile,
    candidate_from_opportunity,
    problem_from_model,
    solve_tree_dp,
)
from cli import evaluate_g
from config import Settings, load_settings
from errors import BellmanError, ConfigError, ModelError
from model import parse_model
from verify import VerificationReport, verify_all

logger = logging.getLogger(__name__)

app = FastAPI(title="Power Utility Bellman API")


def _settings(tolerances: Optional[Dict[str, Any]]) -> Settings:
    return load_settings().with_overrides(tolerances or {})


def _http_error(e: BellmanError) -> HTTPException:
    """Schema and configuration problems are 422, everything else the solver raises is 400."""
    status = 422 if isinstance(e, (ModelError, ConfigError)) else 400
    logger.error(f"❌ {type(e).__name__}: {e}")
    return HTTPException(status_code=status, detail=f"{type(e).__name__}: {e}")


class SolveRequest(BaseModel):
    model: Dict[str, Any]
    tolerances: Optional[Dict[str, Any]] = None


class StrategyAtRoot(BaseModel):
    pi: List[float]
    kappa: float


class SolveResponse(BaseModel):
    value0: float
    L0: float
    strategy_at_root: StrategyAtRoot
    levels: List[List[float]]


class VerifyRequest(BaseModel):
    model: Dict[str, Any]
    candidate: Optional[Dict[str, Any]] = None
    tolerances: Optional[Dict[str, Any]] = None
    seed: int = 0


class GEvalRequest(BaseModel):
    model: Dict[str, Any]
    y: List[float]
    y_check: Optional[List[float]] = None
    ell_minus: Optional[float] = None
    seed: int = 0


class GEvalResponse(BaseModel):
    g: float
    G: float
    maximizer: List[float]
    g_max: float
    starts: int
    start_spread: float


@app.get("/health")
async def health():
    return {"status": "ok"}


@app.post("/solve", response_model=SolveResponse)
def solve(request: SolveRequest):
    try:
        settings = _settings(request.tolerances)
        problem = problem_from_model(parse_model(request.model))
        logger.info(f"🧮 Solving request on {problem.lattice.n_steps} steps")
        opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
    except BellmanError as e:
        raise _http_error(e)
    pi, kappa = opp.strategy.at(0, 0)
    return SolveResponse(
        value0=opp.value0,
        L0=opp.L0,
        strategy_at_root=StrategyAtRoot(pi=[float(v) for v in pi], kappa=kappa),
        levels=[[float(v) for v in level] for level in opp.L],
    )


@app.post("/verify", response_model=VerificationReport, response_model_by_alias=True)
def verify(request: VerifyRequest):
    try:
        settings = _settings(request.tolerances)
        problem = problem_from_model(parse_model(request.model))
        opp = solve_tree_dp(problem.lattice, problem.spec, problem.constraint, settings)
        if request.candidate is None:
            cand = candidate_from_opportunity(opp, problem.lattice, problem.spec, problem.constraint, settings=settings)
        else:
            cand = CandidateFile.model_validate(request.candidate).to_triple()
        rng = np.random.default_rng(request.seed)
        return verify_all(cand, problem.lattice, problem.spec, problem.constraint, settings, oracle=opp, rng=rng)
    except BellmanError as e:
        raise _http_error(e)
    except ValueError as e:
        # pydantic validation of the candidate body
        raise HTTPException(status_code=422, detail=str(e))


@app.post("/g-eval", response_model=GEvalResponse)
def g_eval(request: GEvalRequest):
    try:
        model = parse_model(request.model)
        y_check = None if request.y_check is None else np.array(request.y_check)
        return evaluate_g(model, np.array(request.y), y_check, request.ell_minus, load_settings(), request.seed)
    except BellmanError as e:
        raise _http_error(e)


if __name__ == "__main__":
    import uvicorn
    from config import configure_logging

    settings = load_settings()
    configure_logging(settings.log_level)
    uvicorn.run(app, host=settings.api_host, port=settings.api_port)
