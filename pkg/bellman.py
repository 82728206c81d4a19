import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.optimize import brentq

from config import Settings
from constraints import ConstraintSet, constraint_from_dict, feasible_box, natural_constraints
from errors import (
    CandidateError,
    InfiniteValueError,
    ModelError,
    NumericalFailureError,
    OracleBudgetError,
    UnboundedObjectiveError,
)
from gfun import GContext, hu_driver, maximize_g
from model import (
    JointCharacteristics,
    MarketLattice,
    ModelFile,
    PowerUtilitySpec,
    StrategyTable,
    consumption_increment,
    cutoff,
    eval_conjugate,
    expand_lattice,
    utility_extended,
    wealth_path,
)

logger = logging.getLogger(__name__)

CANDIDATE_SCHEMA = "bp-candidate/1"
NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# Problem bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    """A parsed model file: utility, lattice, constraints and (for generated lattices) the characteristics."""

    model: ModelFile
    spec: PowerUtilitySpec
    lattice: MarketLattice
    constraint: ConstraintSet
    chars: Optional[JointCharacteristics] = None


def problem_from_model(model: ModelFile) -> Problem:
    lattice = model.to_lattice()
    try:
        spec = model.to_spec()
    except ValidationError as e:
        raise ModelError(f"invalid utility parameters: {e}") from e
    if abs(lattice.T - spec.T) > 1e-12:
        spec = spec.model_copy(update={"T": lattice.T})
    chars = None if model.tree is not None else model.to_chars()
    constraint = constraint_from_dict(model.constraint, model.d)
    return Problem(model=model, spec=spec, lattice=lattice, constraint=constraint, chars=chars)


# ---------------------------------------------------------------------------
# Node characteristics
# ---------------------------------------------------------------------------

def node_characteristics(
    lattice: MarketLattice,
    k: int,
    i: int,
    ell_next: Sequence[float],
    ell: float,
    flavour: Literal["tagged", "discrete"] = "tagged",
) -> JointCharacteristics:
    """
    Joint characteristics of (dR, d ell) at node (k, i) per unit of the clock.

    tagged: jump branches become atoms, the remaining branches give b, c and cRL from their
        centred moments.
    discrete: every branch is an atom and c = 0, so g is exactly the one-step objective.
    """
    dR, probs, _, jumps = lattice.branch_arrays(k, i)
    dA = float(lattice.clock[k])
    xprime = np.asarray(ell_next, dtype=float) - ell
    if flavour == "discrete":
        jumps = np.ones(probs.size, dtype=bool)
    elif flavour != "tagged":
        raise ValueError(f"unknown flavour {flavour!r}")
    diff = ~jumps
    d = lattice.d
    b = probs[jumps] @ cutoff(dR[jumps]).reshape(-1, d) if np.any(jumps) else np.zeros(d)
    c, cRL, cL = np.zeros((d, d)), np.zeros(d), 0.0
    mass = float(probs[diff].sum())
    if mass > 0:
        pd_ = probs[diff]
        centred_R = dR[diff] - pd_ @ dR[diff] / mass
        centred_L = xprime[diff] - pd_ @ xprime[diff] / mass
        b = b + pd_ @ dR[diff]
        c = (centred_R.T * pd_) @ centred_R
        c = 0.5 * (c + c.T)
        cRL = (centred_R.T * pd_) @ centred_L
        cL = float(pd_ @ centred_L ** 2)
    moving = jumps & ((np.abs(dR).max(axis=1) > 0) | (xprime != 0))
    return JointCharacteristics(
        bR=b / dA,
        cR=c / dA,
        cRL=cRL / dA,
        aL=float(probs @ xprime) / dA,
        atoms_x=dR[moving],
        atoms_xp=xprime[moving],
        atoms_w=probs[moving] / dA,
        dA=dA,
        cL=cL / dA,
    )


# ---------------------------------------------------------------------------
# One-step problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OneStep:
    """
    The one-step problem at a node with wealth normalized to one:

        J(pi, kappa) = U_t(kappa) dmu + (1/p) E[L_next (1 + pi'dR - kappa dmu)^p]
    """

    lattice: MarketLattice
    k: int
    i: int
    L_next: np.ndarray
    spec: PowerUtilitySpec

    @classmethod
    def at(cls, lattice: MarketLattice, spec: PowerUtilitySpec, k: int, i: int, L_level: np.ndarray) -> "OneStep":
        _, _, children, _ = lattice.branch_arrays(k, i)
        return cls(lattice=lattice, k=k, i=i, L_next=np.asarray(L_level, dtype=float)[children], spec=spec)

    @property
    def node(self) -> str:
        return MarketLattice.node_id(self.k, self.i)

    @property
    def dR(self) -> np.ndarray:
        return self.lattice.branch_arrays(self.k, self.i)[0]

    @property
    def probs(self) -> np.ndarray:
        return self.lattice.branch_arrays(self.k, self.i)[1]

    @property
    def dmu(self) -> float:
        return consumption_increment(self.lattice, self.spec, self.k)

    @property
    def D_t(self) -> float:
        return self.spec.D_at(float(self.lattice.times[self.k]))

    def factors(self, pi: np.ndarray, kappa: float) -> np.ndarray:
        return 1.0 + self.dR @ np.asarray(pi, dtype=float) - kappa * self.dmu

    def value(self, pi: np.ndarray, kappa: float) -> float:
        """J(pi, kappa); -inf for inadmissible steps or infinite disutility."""
        p = self.spec.p
        factors = self.factors(pi, kappa)
        if factors.min() < -1e-14:
            return NEG_INF
        factors = np.maximum(factors, 0.0)
        if p < 0 and factors.min() <= 0:
            return NEG_INF
        consumption = 0.0
        if self.dmu > 0:
            if kappa <= 0:
                if p < 0:
                    return NEG_INF
            else:
                consumption = self.D_t * kappa ** p / p * self.dmu
        return consumption + float(self.probs @ (self.L_next * factors ** p)) / p

    def best_kappa(self, pi: np.ndarray) -> float:
        """Consumption maximizing J for a fixed portfolio: root of D k^(p-1) = E[L_next F(k)^(p-1)]."""
        p, dmu = self.spec.p, self.dmu
        if dmu == 0:
            return 0.0
        base = 1.0 + self.dR @ np.asarray(pi, dtype=float)
        lowest = float(base.min())
        if lowest <= 0:
            return 0.0
        hi = lowest / dmu * (1.0 - 1e-12)
        lo = hi * 1e-14

        def foc(kappa: float) -> float:
            return self.D_t * kappa ** (p - 1.0) - float(self.probs @ (self.L_next * (base - kappa * dmu) ** (p - 1.0)))

        if foc(lo) <= 0:
            return lo
        if foc(hi) >= 0:
            return hi
        return brentq(foc, lo, hi, xtol=1e-15)

    def characteristics(self, ell: float, flavour: Literal["tagged", "discrete"] = "discrete") -> JointCharacteristics:
        return node_characteristics(self.lattice, self.k, self.i, self.L_next, ell, flavour)


def optimize_step(
    step: OneStep,
    C: ConstraintSet,
    settings: Settings,
    kappa_grid: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, float, float]:
    """
    Maximize the one-step objective over pi in C and kappa >= 0.

    Finite constraint sets are enumerated (with a root search or the grid for kappa). Otherwise the
    portfolio step maximizes the node's discrete g over C / (1 - kappa dmu) and the consumption step
    solves its first-order condition, alternating dp_alternations times.

    Returns:
        (pi, kappa, J)

    Raises:
        InfiniteValueError: the node objective is unbounded, or no choice has finite utility
    """
    p, dmu = step.spec.p, step.dmu
    best_pi, best_kappa, best_J = np.zeros(step.lattice.d), 0.0, NEG_INF
    try:
        if C.kind == "finite":
            for z in C.points:
                kappas = [0.0] if dmu == 0 else (list(kappa_grid) if kappa_grid is not None else [step.best_kappa(z)])
                for kappa in kappas:
                    J = step.value(z, kappa)
                    if J > best_J:
                        best_pi, best_kappa, best_J = z.copy(), float(kappa), J
        elif dmu > 0 and kappa_grid is not None:
            for kappa in kappa_grid:
                s = 1.0 - kappa * dmu
                if s <= 0:
                    continue
                y = _portfolio_step(step, C, s, settings)
                J = step.value(s * y, kappa)
                if J > best_J:
                    best_pi, best_kappa, best_J = s * y, float(kappa), J
        else:
            best_pi, best_kappa = _alternate(step, C, settings)
            best_J = step.value(best_pi, best_kappa)
    except UnboundedObjectiveError as e:
        raise InfiniteValueError(f"the one-step objective is unbounded: {e}", node=step.node) from e
    if best_J == NEG_INF:
        raise InfiniteValueError("no admissible choice has finite utility", node=step.node)
    return best_pi, best_kappa, best_J


def _portfolio_step(step: OneStep, C: ConstraintSet, s: float, settings: Settings) -> np.ndarray:
    mean_L = float(step.probs @ step.L_next)
    ctx = GContext(ell=mean_L, chars=step.characteristics(mean_L, "discrete"), p=step.spec.p, constraint=C.dilate(1.0 / s))
    y, _ = maximize_g(ctx, settings)
    return y


def _alternate(step: OneStep, C: ConstraintSet, settings: Settings) -> Tuple[np.ndarray, float]:
    p, dmu = step.spec.p, step.dmu
    if dmu == 0:
        return _portfolio_step(step, C, 1.0, settings), 0.0
    mean_L = float(step.probs @ step.L_next)
    kappa = min((step.D_t / mean_L) ** step.spec.beta, 0.5 / dmu)
    pi = np.zeros(step.lattice.d)
    for _ in range(max(1, settings.dp_alternations)):
        s = 1.0 - kappa * dmu
        y = _portfolio_step(step, C, s, settings)
        if C.is_cone:
            V = float(step.probs @ (step.L_next * np.maximum(1.0 + step.dR @ y, 0.0) ** p))
            r = (V / step.D_t) ** (1.0 / (p - 1.0))
            new_kappa = r / (1.0 + r * dmu)
            pi = (1.0 - new_kappa * dmu) * y
        else:
            pi = s * y
            new_kappa = step.best_kappa(pi)
        converged = abs(new_kappa - kappa) <= 1e-15 * (1.0 + kappa)
        kappa = new_kappa
        if converged:
            break
    return pi, kappa


# ---------------------------------------------------------------------------
# Dynamic programming
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpportunityLattice:
    """Opportunity process L per node with the maximizing strategy; value0 = L0 x0^p / p."""

    L: Tuple[np.ndarray, ...]
    strategy: StrategyTable
    value0: float

    @property
    def L0(self) -> float:
        return float(self.L[0][0])

    def summary(self) -> Dict[str, object]:
        pi, kappa = self.strategy.at(0, 0)
        return {
            "value0": self.value0,
            "L0": self.L0,
            "strategy_at_root": {"pi": [float(v) for v in pi], "kappa": kappa},
        }


def solve_tree_dp(
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
    kappa_grid: Optional[Sequence[float]] = None,
) -> OpportunityLattice:
    """
    Backward induction L(node)/p = max_{pi, kappa} J(pi, kappa) from L_T = D_T.

    Args:
        lattice: Markov lattice (shared children allowed)
        spec: Utility and consumption clock
        C: Portfolio constraints (a finite set gives a grid-restricted DP)
        settings: Tolerances and iteration limits
        kappa_grid: Restrict consumption to these propensities

    Returns:
        OpportunityLattice with the optimal strategy (kappa = 1 at terminal nodes)
    """
    settings = settings or Settings()
    if C.d != lattice.d:
        raise ModelError("constraint and lattice have different dimensions")
    N = lattice.n_steps
    logger.info(f"🧮 Solving the Bellman recursion on {N} steps ({lattice.n_nodes} nodes, {C.kind} constraint)")
    L: List[np.ndarray] = [np.empty(0)] * (N + 1)
    pis: List[np.ndarray] = [np.empty(0)] * (N + 1)
    kappas: List[np.ndarray] = [np.empty(0)] * (N + 1)
    n_last = len(lattice.levels[N])
    L[N] = np.full(n_last, spec.D_at(lattice.T))
    pis[N] = np.zeros((n_last, lattice.d))
    kappas[N] = np.ones(n_last)
    for k in reversed(range(N)):
        n = len(lattice.levels[k])
        L[k], pis[k], kappas[k] = np.empty(n), np.empty((n, lattice.d)), np.empty(n)
        for i in range(n):
            step = OneStep.at(lattice, spec, k, i, L[k + 1])
            pi, kappa, J = optimize_step(step, C, settings, kappa_grid)
            value = spec.p * J
            if not (np.isfinite(value) and value > 0):
                raise NumericalFailureError(f"opportunity process {value} is not positive at node {step.node}")
            L[k][i], pis[k][i], kappas[k][i] = value, pi, kappa
    value0 = float(L[0][0]) * spec.x0 ** spec.p / spec.p
    logger.info(f"✅ L0 = {L[0][0]:.10g}, value = {value0:.10g}")
    return OpportunityLattice(L=tuple(L), strategy=StrategyTable(pi=tuple(pis), kappa=tuple(kappas)), value0=value0)


# ---------------------------------------------------------------------------
# Expected utility and the brute-force oracle
# ---------------------------------------------------------------------------

def node_probabilities(lattice: MarketLattice) -> List[np.ndarray]:
    """Path probabilities of the nodes of a tree."""
    parents = lattice.parents()
    probs = [np.ones(1)]
    for k in range(lattice.n_steps):
        level = np.empty(len(lattice.levels[k + 1]))
        for c, (i, j) in enumerate(parents[k + 1]):
            level[c] = probs[k][i] * lattice.levels[k][i].branches[j].prob
        probs.append(level)
    return probs


def expected_utility(
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    strategy: StrategyTable,
    allow_zero: Optional[bool] = None,
) -> float:
    """E[sum_k U_k(kappa X) dmu_k + U_T(X_T)] on a tree (-inf when zero wealth meets p < 0)."""
    allow_zero = spec.p > 0 if allow_zero is None else allow_zero
    wealth = wealth_path(lattice, spec, strategy, allow_zero=allow_zero)
    probs = node_probabilities(lattice)
    total = 0.0
    for k in range(lattice.n_steps):
        dmu = consumption_increment(lattice, spec, k)
        if dmu == 0:
            continue
        t = float(lattice.times[k])
        for i, x in enumerate(wealth[k]):
            total += probs[k][i] * utility_extended(spec, t, float(strategy.kappa[k][i]) * x) * dmu
    for i, x in enumerate(wealth[-1]):
        total += probs[-1][i] * utility_extended(spec, lattice.T, float(x))
    return total


def no_trade_value(lattice: MarketLattice, spec: PowerUtilitySpec) -> float:
    """Utility of holding the initial wealth without trading or consuming: D_T x0^p / p."""
    tree = expand_lattice(lattice)
    return expected_utility(tree, spec, StrategyTable.constant(tree, np.zeros(lattice.d), 0.0))


@dataclass(frozen=True)
class StrategyGrid:
    """Finite menu of portfolios and propensities to consume offered at every node."""

    pi_values: np.ndarray
    kappa_values: Tuple[float, ...] = (0.0,)

    @classmethod
    def for_constraint(cls, C: ConstraintSet, points: int = 21, kappas: Sequence[float] = (0.0,)) -> "StrategyGrid":
        if C.kind == "finite":
            return cls(pi_values=C.points.copy(), kappa_values=tuple(kappas))
        lo, hi = feasible_box(C, natural_constraints(np.zeros((0, C.d))))
        lo, hi = np.where(np.isfinite(lo), lo, -1.0), np.where(np.isfinite(hi), hi, 1.0)
        axes = [np.linspace(lo[j], hi[j], points) for j in range(C.d)]
        grid = np.array(np.meshgrid(*axes, indexing="ij")).reshape(C.d, -1).T
        grid = np.vstack([np.zeros(C.d), grid[[C.contains(y) for y in grid]]])
        return cls(pi_values=ConstraintSet.finite(grid).points, kappa_values=tuple(kappas))

    def as_constraint(self) -> ConstraintSet:
        return ConstraintSet.finite(self.pi_values)


@dataclass(frozen=True)
class OracleResult:
    value: float
    strategy: StrategyTable
    lattice: MarketLattice
    combinations: int


def brute_force_oracle(
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    grid: StrategyGrid,
    settings: Optional[Settings] = None,
) -> OracleResult:
    """
    Exact maximum of the expected utility over all adapted grid-valued strategies.

    The lattice is unfolded into a tree first; per node only choices whose wealth factors are
    admissible (nonnegative for p > 0, positive for p < 0) are kept.

    Raises:
        OracleBudgetError: more than max_oracle_combos strategy combinations
    """
    settings = settings or Settings()
    tree = expand_lattice(lattice)
    strict = spec.p < 0
    nodes: List[Tuple[int, int]] = []
    choices: List[List[Tuple[np.ndarray, float]]] = []
    for k in range(tree.n_steps):
        dmu = consumption_increment(tree, spec, k)
        kappas = [0.0] if dmu == 0 else [float(v) for v in grid.kappa_values]
        for i in range(len(tree.levels[k])):
            dR = tree.branch_arrays(k, i)[0]
            options = []
            for pi in grid.pi_values:
                for kappa in kappas:
                    factors = 1.0 + dR @ pi - kappa * dmu
                    if (factors.min() > 0) if strict else (factors.min() >= -1e-14):
                        options.append((pi, kappa))
            if not options:
                raise InfiniteValueError("no admissible grid choice", node=MarketLattice.node_id(k, i))
            nodes.append((k, i))
            choices.append(options)
    total = int(np.prod([len(c) for c in choices], dtype=float))
    if total > settings.max_oracle_combos:
        raise OracleBudgetError(f"{total} strategy combinations exceed the budget of {settings.max_oracle_combos}")
    logger.info(f"🔍 Enumerating {total} grid strategies on {len(nodes)} decision nodes")

    best_value, best_table = NEG_INF, None
    for combo in itertools.product(*choices):
        pis = [np.zeros((len(level), tree.d)) for level in tree.levels]
        kaps = [np.zeros(len(level)) for level in tree.levels]
        for (k, i), (pi, kappa) in zip(nodes, combo):
            pis[k][i], kaps[k][i] = pi, kappa
        table = StrategyTable(pi=tuple(pis), kappa=tuple(kaps))
        value = expected_utility(tree, spec, table, allow_zero=not strict)
        if best_table is None or value > best_value:
            best_value, best_table = value, table
    logger.info(f"✅ Oracle value {best_value:.10g}")
    return OracleResult(value=best_value, strategy=best_table, lattice=tree, combinations=total)


# ---------------------------------------------------------------------------
# Drift identity and martingale decomposition
# ---------------------------------------------------------------------------

def drift_identity_residual(
    opp: OpportunityLattice,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
    flavour: Literal["tagged", "discrete"] = "tagged",
) -> List[np.ndarray]:
    """
    Per non-terminal node: E[dL]/dA + p (U*(L) dmu/dA + max g), with g built from the node's
    characteristics of (dR, dL).

    The tagged flavour treats untagged branches as a continuous part and converges to zero
    with the step size. The discrete flavour keeps every branch as an atom and is zero up to
    optimizer precision at every node of a terminal-wealth problem.
    """
    settings = settings or Settings()
    out: List[np.ndarray] = []
    for k in range(lattice.n_steps):
        t = float(lattice.times[k])
        dA = float(lattice.clock[k])
        dmu = consumption_increment(lattice, spec, k)
        level = np.empty(len(lattice.levels[k]))
        for i in range(level.size):
            ell = float(opp.L[k][i])
            step = OneStep.at(lattice, spec, k, i, opp.L[k + 1])
            chars = step.characteristics(ell, flavour)
            _, g_star = maximize_g(GContext(ell=ell, chars=chars, p=spec.p, constraint=C), settings)
            conj = eval_conjugate(spec, t, ell) * dmu / dA if dmu > 0 else 0.0
            level[i] = chars.aL + spec.p * (conj + g_star)
        out.append(level)
    return out


@dataclass(frozen=True)
class NodeDecomposition:
    """
    One-step split of dL: drift rate aL, loading phi on the martingale part of dR, the values of
    dL on jump branches and the orthogonal remainder per branch.
    """

    aL: float
    phi: np.ndarray
    jumps: Dict[int, float]
    residual: np.ndarray
    rank_deficient: bool


def decompose_martingale_part(
    opp: Union[OpportunityLattice, "SolutionTriple"], lattice: MarketLattice
) -> List[List[NodeDecomposition]]:
    """
    Probability-weighted least squares of the centred dL on the centred dR at every node, for a
    DP result or a candidate's ell.
    """
    levels = opp.L if isinstance(opp, OpportunityLattice) else opp.ell
    out: List[List[NodeDecomposition]] = []
    for k in range(lattice.n_steps):
        dA = float(lattice.clock[k])
        level: List[NodeDecomposition] = []
        for i in range(len(lattice.levels[k])):
            dR, probs, children, jumps = lattice.branch_arrays(k, i)
            dL = levels[k + 1][children] - levels[k][i]
            centred_L = dL - probs @ dL
            centred_R = dR - probs @ dR
            weights = np.sqrt(probs)
            phi, _, rank, _ = np.linalg.lstsq(centred_R * weights[:, None], centred_L * weights, rcond=None)
            level.append(
                NodeDecomposition(
                    aL=float(probs @ dL) / dA,
                    phi=phi,
                    jumps={int(j): float(dL[j]) for j in np.flatnonzero(jumps)},
                    residual=centred_L - centred_R @ phi,
                    rank_deficient=bool(rank < lattice.d),
                )
            )
        out.append(level)
    return out


# ---------------------------------------------------------------------------
# Deterministic reductions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdeSolution:
    """Values on an equally spaced grid; for the log-opportunity equation `values` holds Y = log L."""

    times: np.ndarray
    values: np.ndarray
    log_scale: bool = False
    g0: Optional[float] = None

    @property
    def L(self) -> np.ndarray:
        return np.exp(self.values) if self.log_scale else self.values

    @property
    def L0(self) -> float:
        return float(self.L[0])

    def at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.L))


def _rk4_backward(rhs: Callable[[float, float], float], T: float, terminal: float, steps: int) -> Tuple[np.ndarray, np.ndarray]:
    times = np.linspace(0.0, T, steps + 1)
    values = np.empty(steps + 1)
    values[-1] = terminal
    h = -T / steps
    for n in range(steps, 0, -1):
        t, y = times[n], values[n]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        values[n - 1] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return times, values


def solve_levy_ode(
    spec: PowerUtilitySpec,
    chars: JointCharacteristics,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
) -> OdeSolution:
    """
    Deterministic opportunity process of a Levy model: L' = -p [delta U*(L) + L g0], L(T) = D_T,
    where g0 is the maximum of g with ell = 1 and no companion terms.
    """
    settings = settings or Settings()
    ctx = GContext(ell=1.0, chars=chars.r_part(), p=spec.p, constraint=C)
    _, g0 = maximize_g(ctx, settings)

    def rhs(t: float, L: float) -> float:
        if not L > 0:
            raise NumericalFailureError(f"opportunity process left (0, inf) at t={t:.6g}")
        drift = L * g0
        if spec.intermediate:
            drift += eval_conjugate(spec, t, L)
        return -spec.p * drift

    times, values = _rk4_backward(rhs, spec.T, spec.D_at(spec.T), settings.ode_steps)
    if np.any(values <= 0):
        raise NumericalFailureError("opportunity process left (0, inf)")
    logger.info(f"🧮 Levy ODE: g0 = {g0:.10g}, L0 = {values[0]:.10g}")
    return OdeSolution(times=times, values=values, g0=g0)


def solve_deterministic_ito(
    spec: PowerUtilitySpec,
    theta: Union[Sequence[float], Callable[[float], Sequence[float]]],
    sigma: np.ndarray,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
) -> OdeSolution:
    """Y = log L solves Y' = f(Y, 0, 0), Y(T) = log D_T, for deterministic market price of risk theta."""
    settings = settings or Settings()
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    theta_at = theta if callable(theta) else (lambda t, value=np.asarray(theta, dtype=float): value)
    zeros = np.zeros(sigma.shape[1])

    def rhs(t: float, Y: float) -> float:
        return hu_driver(Y, zeros, theta_at(t), sigma, C, spec, spec.D_at(t))

    times, values = _rk4_backward(rhs, spec.T, float(np.log(spec.D_at(spec.T))), settings.ode_steps)
    logger.info(f"🧮 Ito reduction: L0 = {np.exp(values[0]):.10g}")
    return OdeSolution(times=times, values=values, log_scale=True)


# ---------------------------------------------------------------------------
# Candidate solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolutionTriple:
    """Candidate (ell, pi_check, kappa_check) per node."""

    ell: Tuple[np.ndarray, ...]
    pi: Tuple[np.ndarray, ...]
    kappa: Tuple[np.ndarray, ...]

    def strategy(self) -> StrategyTable:
        return StrategyTable(pi=self.pi, kappa=self.kappa)

    def validate(self, lattice: MarketLattice, spec: PowerUtilitySpec, C: ConstraintSet) -> None:
        """
        Raises:
            CandidateError: wrong shape, nonpositive ell, terminal condition violated, or a
                portfolio outside C or outside the strict natural constraints
        """
        shapes = [len(level) for level in lattice.levels]
        got = [len(level) for level in self.ell]
        if got != shapes or [len(v) for v in self.pi] != shapes or [len(v) for v in self.kappa] != shapes:
            raise CandidateError(f"candidate has level sizes {got}, lattice has {shapes}")
        if any(np.asarray(v).reshape(len(v), -1).shape[1] != lattice.d for v in self.pi if len(v)):
            raise CandidateError(f"candidate portfolios must have {lattice.d} components")
        N = lattice.n_steps
        for k, level in enumerate(self.ell):
            if np.any(~(np.asarray(level) > 0)):
                raise CandidateError(f"ell must be positive at level {k}")
        D_T = spec.D_at(lattice.T)
        if np.max(np.abs(self.ell[N] - D_T)) > 1e-12 * max(1.0, D_T):
            raise CandidateError("terminal condition ell_T = D_T is violated")
        if np.max(np.abs(self.kappa[N] - 1.0)) > 1e-12:
            raise CandidateError("kappa must equal 1 at terminal nodes")
        for k in range(N):
            dmu = consumption_increment(lattice, spec, k)
            for i in range(len(lattice.levels[k])):
                pi, kappa = self.pi[k][i], float(self.kappa[k][i])
                node = MarketLattice.node_id(k, i)
                if not C.contains(pi, tol=1e-9):
                    raise CandidateError(f"portfolio at node {node} is outside the constraints")
                if kappa < 0:
                    raise CandidateError(f"negative consumption at node {node}")
                factors = 1.0 + lattice.branch_arrays(k, i)[0] @ pi - kappa * dmu
                if factors.min() <= 0:
                    raise CandidateError(f"portfolio at node {node} can lose all wealth")

    def kappa_formula_residual(self, lattice: MarketLattice, spec: PowerUtilitySpec) -> float:
        """max |kappa - (D/ell)^beta| over non-terminal nodes (0 without intermediate consumption)."""
        if not spec.intermediate:
            return 0.0
        worst = 0.0
        for k in range(lattice.n_steps):
            target = (spec.D_at(float(lattice.times[k])) / self.ell[k]) ** spec.beta
            worst = max(worst, float(np.max(np.abs(self.kappa[k] - target))))
        return worst


def candidate_from_opportunity(
    opp: OpportunityLattice,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    scale: float = 1.0,
    settings: Optional[Settings] = None,
) -> SolutionTriple:
    """
    Candidate built from a DP result. With scale != 1 the non-terminal ell are multiplied by
    scale and the strategy is recomputed as the best response to the scaled continuation.
    """
    settings = settings or Settings()
    N = lattice.n_steps
    ell = tuple(np.asarray(level, dtype=float) * (scale if k < N else 1.0) for k, level in enumerate(opp.L))
    if scale == 1.0:
        return SolutionTriple(ell=ell, pi=opp.strategy.pi, kappa=opp.strategy.kappa)
    pis = [np.array(level, dtype=float) for level in opp.strategy.pi]
    kappas = [np.array(level, dtype=float) for level in opp.strategy.kappa]
    for k in range(N):
        for i in range(len(lattice.levels[k])):
            pi, kappa, _ = optimize_step(OneStep.at(lattice, spec, k, i, ell[k + 1]), C, settings)
            pis[k][i], kappas[k][i] = pi, kappa
    return SolutionTriple(ell=ell, pi=tuple(pis), kappa=tuple(kappas))


@dataclass(frozen=True)
class MinimalityReport:
    max_violation: float
    minimal: bool
    identical: bool
    ell_ratio_sup: float


def compare_solution_to_oracle(cand: SolutionTriple, opp: OpportunityLattice, tol: float = 1e-9) -> MinimalityReport:
    """ell >= L node-wise for every solution; reports the largest violation and sup ell/L."""
    gaps = np.concatenate([np.asarray(L) - np.asarray(e) for L, e in zip(opp.L, cand.ell)])
    ratios = np.concatenate([np.asarray(e) / np.asarray(L) for L, e in zip(opp.L, cand.ell)])
    violation = float(max(0.0, gaps.max()))
    return MinimalityReport(
        max_violation=violation,
        minimal=violation <= tol,
        identical=float(np.abs(gaps).max()) <= tol,
        ell_ratio_sup=float(ratios.max()),
    )


class CandidateNode(BaseModel):
    ell: float
    pi: List[float]
    kappa: float = 0.0


class CandidateFile(BaseModel):
    """JSON candidate file, schema bp-candidate/1."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    schema_: Literal["bp-candidate/1"] = Field(CANDIDATE_SCHEMA, alias="schema")
    levels: List[List[CandidateNode]]

    def to_triple(self) -> SolutionTriple:
        return SolutionTriple(
            ell=tuple(np.array([n.ell for n in level]) for level in self.levels),
            pi=tuple(np.array([n.pi for n in level], dtype=float) for level in self.levels),
            kappa=tuple(np.array([n.kappa for n in level]) for level in self.levels),
        )

    @classmethod
    def from_triple(cls, cand: SolutionTriple) -> "CandidateFile":
        levels = [
            [CandidateNode(ell=float(e), pi=[float(v) for v in np.atleast_1d(pi)], kappa=float(kap))
             for e, pi, kap in zip(ell, pis, kaps)]
            for ell, pis, kaps in zip(cand.ell, cand.pi, cand.kappa)
        ]
        return cls(levels=levels)


def load_candidate(path: Union[str, Path]) -> SolutionTriple:
    """
    Raises:
        CandidateError: missing file, malformed JSON or schema violation
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return CandidateFile.model_validate(raw).to_triple()
    except FileNotFoundError as e:
        raise CandidateError(f"candidate file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise CandidateError(f"malformed JSON in {path}: {e}") from e
    except ValidationError as e:
        raise CandidateError(f"candidate does not match {CANDIDATE_SCHEMA}: {e}") from e


def save_candidate(cand: SolutionTriple, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(CandidateFile.from_triple(cand).model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"💾 Candidate written to {path}")
    return path


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def _node_columns(lattice: MarketLattice) -> Dict[str, list]:
    cols: Dict[str, list] = {"node": [], "level": [], "index": [], "time": [], "label": []}
    for k, level in enumerate(lattice.levels):
        for i, node in enumerate(level):
            cols["node"].append(MarketLattice.node_id(k, i))
            cols["level"].append(k)
            cols["index"].append(i)
            cols["time"].append(float(lattice.times[k]))
            cols["label"].append(node.label)
    return cols


def opportunity_frame(opp: OpportunityLattice, lattice: MarketLattice) -> pd.DataFrame:
    """One row per node: id, time, label, L, portfolio components and kappa."""
    cols = _node_columns(lattice)
    cols["L"] = [float(v) for level in opp.L for v in level]
    pis = np.vstack([np.asarray(level).reshape(-1, lattice.d) for level in opp.strategy.pi])
    for j in range(lattice.d):
        cols[f"pi_{j}"] = pis[:, j].tolist()
    cols["kappa"] = [float(v) for level in opp.strategy.kappa for v in level]
    return pd.DataFrame(cols)


def residual_frame(residuals: List[np.ndarray], lattice: MarketLattice) -> pd.DataFrame:
    cols = _node_columns(lattice)
    n = sum(len(level) for level in residuals)
    frame = pd.DataFrame({key: values[:n] for key, values in cols.items()})
    frame["residual"] = [float(v) for level in residuals for v in level]
    return frame


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"💾 Wrote {len(frame)} rows to {path}")
    return path
