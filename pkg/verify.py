import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bellman import (
    NodeDecomposition,
    OneStep,
    OpportunityLattice,
    SolutionTriple,
    compare_solution_to_oracle,
    decompose_martingale_part,
    node_characteristics,
)
from config import Settings
from constraints import ConstraintSet
from errors import ModelError
from gfun import GContext, audit_grid, directional_G
from model import (
    JointCharacteristics,
    MarketLattice,
    PowerUtilitySpec,
    StrategyTable,
    consumption_increment,
    cutoff,
    utility_extended,
    wealth_path,
)

logger = logging.getLogger(__name__)

VERIFY_SCHEMA = "bp-verify/1"
Candidate = Union[SolutionTriple, OpportunityLattice]

CLASS_D_NOTE = "Every process on a finite lattice is of class (D); the class (D) conditions hold trivially."
GRID_NOTE = (
    "Competitors and first-order audits range over finite grids around the candidate; "
    "a pass is evidence of optimality over all strategies, not a proof."
)

# Optimality result -> flags that must all hold for it.
CERTIFICATES: Dict[str, Tuple[str, ...]] = {
    "direct": ("z_martingale", "z_supermartingale"),
    "deflator": ("deflator_supermartingale",),
    "convex_first_order": ("first_order",),
    "minimality": ("minimality",),
}


def _ell(cand: Candidate) -> Tuple[np.ndarray, ...]:
    return cand.ell if isinstance(cand, SolutionTriple) else cand.L


def _strategy(cand: Candidate) -> StrategyTable:
    return cand.strategy() if isinstance(cand, SolutionTriple) else cand.strategy


def _marginal(spec: PowerUtilitySpec, t: float, kappa_c: float, ell: float) -> float:
    """Marginal utility of consumption D kappa^(p-1) at the candidate (equals ell at the optimum)."""
    return spec.D_at(t) * kappa_c ** (spec.p - 1.0) if kappa_c > 0 else ell


class Counterexample(BaseModel):
    check: str
    node: str
    pi: List[float]
    kappa: float
    drift: float


# ---------------------------------------------------------------------------
# Z process
# ---------------------------------------------------------------------------

def z_path(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    strategy: StrategyTable,
    allow_zero: Optional[bool] = None,
) -> List[np.ndarray]:
    """Z = ell X^p / p + sum of U(kappa X) dmu up to the node, along the paths of a tree."""
    allow_zero = spec.p > 0 if allow_zero is None else allow_zero
    ell = _ell(cand)
    wealth = wealth_path(lattice, spec, strategy, allow_zero=allow_zero)
    parents = lattice.parents()
    consumed = [np.zeros(1)]
    for k in range(lattice.n_steps):
        dmu = consumption_increment(lattice, spec, k)
        t = float(lattice.times[k])
        here = np.array([
            utility_extended(spec, t, float(strategy.kappa[k][i]) * x) * dmu if dmu > 0 else 0.0
            for i, x in enumerate(wealth[k])
        ])
        consumed.append(np.array([consumed[k][i] + here[i] for i, _ in parents[k + 1]]))
    out = []
    for k, x in enumerate(wealth):
        with np.errstate(divide="ignore"):
            terminal = np.where(x > 0, ell[k] * np.abs(x) ** spec.p / spec.p, utility_extended(spec, 0.0, 0.0))
        out.append(terminal + consumed[k])
    return out


def competitor_set(
    step: OneStep,
    pi_c: np.ndarray,
    kappa_c: float,
    C: ConstraintSet,
    settings: Settings,
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[np.ndarray, float]]:
    """
    Admissible one-step competitors at a node: per-coordinate lines through the candidate portfolio,
    small perturbations of it, the origin and (for finite sets) every point, each combined with
    multiples of the candidate consumption. With rng, settings.random_competitors uniform draws
    from the box of half-width radius around the candidate are added.
    """
    p, dmu = step.spec.p, step.dmu
    pi_c = np.asarray(pi_c, dtype=float)
    radius = max(1.0, float(np.max(np.abs(pi_c))) if pi_c.size else 1.0)
    offsets = list(radius * np.linspace(-1.0, 1.0, settings.competitor_points))
    offsets += [radius * eps for eps in (-1e-3, -1e-6, 1e-6, 1e-3)]
    pis = [np.zeros_like(pi_c), pi_c.copy()]
    for j in range(pi_c.size):
        for off in offsets:
            y = pi_c.copy()
            y[j] += off
            pis.append(y)
    if C.kind == "finite":
        pis.extend(z.copy() for z in C.points)
    if rng is not None:
        pis.extend(pi_c + radius * rng.uniform(-1.0, 1.0, size=(settings.random_competitors, pi_c.size)))
    if dmu == 0:
        kappas = [0.0]
    else:
        multiples = [0.0, 0.5, 1.0, 1.5, 2.0] if p > 0 else [0.25, 0.5, 1.0, 1.5, 2.0]
        kappas = [m * kappa_c for m in multiples[: settings.competitor_kappas]]
    out = []
    for pi in pis:
        if not C.contains(pi):
            continue
        for kappa in kappas:
            factors = step.factors(pi, kappa)
            if factors.min() < -1e-14 or (p < 0 and factors.min() <= 0):
                continue
            out.append((pi, float(kappa)))
    return out


@dataclass(frozen=True)
class DriftCheck:
    candidate_residual: float
    competitor_max_drift: float
    counterexample: Optional[Counterexample] = None
    pz_identity_residual: Optional[float] = None


def _steps(cand: Candidate, lattice: MarketLattice, spec: PowerUtilitySpec):
    ell = _ell(cand)
    strategy = _strategy(cand)
    for k in range(lattice.n_steps):
        for i in range(len(lattice.levels[k])):
            step = OneStep.at(lattice, spec, k, i, ell[k + 1])
            pi_c, kappa_c = strategy.at(k, i)
            yield step, float(ell[k][i]), np.asarray(pi_c, dtype=float), kappa_c


def check_z(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
    rng: Optional[np.random.Generator] = None,
) -> DriftCheck:
    """
    One-step drift of Z with wealth normalized to one at every node:
    E[ell_next F^p] / p + U(kappa) dmu - ell / p. Zero for the candidate, nonpositive for competitors.
    """
    settings = settings or Settings()
    residual, worst, counter = 0.0, float("-inf"), None
    for step, ell, pi_c, kappa_c in _steps(cand, lattice, spec):
        base = ell / spec.p
        residual = max(residual, abs(step.value(pi_c, kappa_c) - base))
        for pi, kappa in competitor_set(step, pi_c, kappa_c, C, settings, rng):
            drift = step.value(pi, kappa) - base
            if drift == float("-inf"):
                continue
            if drift > worst:
                worst = drift
            if counter is None and drift > settings.tol_mart:
                counter = Counterexample(check="z_supermartingale", node=step.node, pi=pi.tolist(), kappa=kappa, drift=drift)
    return DriftCheck(candidate_residual=residual, competitor_max_drift=max(worst, 0.0),
                      counterexample=counter)


# ---------------------------------------------------------------------------
# Gamma process
# ---------------------------------------------------------------------------

def _gamma_drift(step: OneStep, ell: float, pi_c: np.ndarray, kappa_c: float, pi: np.ndarray, kappa: float) -> float:
    """E[ell_next Fc^(p-1) F] - ell + kappa dmu U'(kappa_c), wealth normalized at the node."""
    p = step.spec.p
    Fc = step.factors(pi_c, kappa_c)
    F = np.maximum(step.factors(pi, kappa), 0.0)
    marginal = _marginal(step.spec, float(step.lattice.times[step.k]), kappa_c, ell)
    return float(step.probs @ (step.L_next * Fc ** (p - 1.0) * F)) - ell + kappa * step.dmu * marginal


def gamma_path(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    strategy: StrategyTable,
) -> List[np.ndarray]:
    """
    Gamma = X ell Xc^(p-1) + sum kappa X U'(kappa_c Xc) dmu along the paths of a tree, Xc being the
    candidate wealth. At the candidate strategy Gamma = p Z.
    """
    ell = _ell(cand)
    candidate = wealth_path(lattice, spec, _strategy(cand))
    wealth = wealth_path(lattice, spec, strategy, allow_zero=True)
    cand_strategy = _strategy(cand)
    parents = lattice.parents()
    consumed = [np.zeros(1)]
    for k in range(lattice.n_steps):
        dmu = consumption_increment(lattice, spec, k)
        t = float(lattice.times[k])
        here = np.zeros(len(wealth[k]))
        if dmu > 0:
            for i in range(here.size):
                kc = float(cand_strategy.kappa[k][i])
                here[i] = (float(strategy.kappa[k][i]) * wealth[k][i]
                           * _marginal(spec, t, kc, float(ell[k][i])) * candidate[k][i] ** (spec.p - 1.0) * dmu)
        consumed.append(np.array([consumed[k][i] + here[i] for i, _ in parents[k + 1]]))
    return [wealth[k] * ell[k] * candidate[k] ** (spec.p - 1.0) + consumed[k] for k in range(len(wealth))]


def check_gamma(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
    rng: Optional[np.random.Generator] = None,
) -> DriftCheck:
    """Martingale check of Gamma at the candidate, supermartingale check over competitors, Gamma = pZ."""
    settings = settings or Settings()
    residual, worst, counter, identity = 0.0, float("-inf"), None, 0.0
    for step, ell, pi_c, kappa_c in _steps(cand, lattice, spec):
        own = _gamma_drift(step, ell, pi_c, kappa_c, pi_c, kappa_c)
        residual = max(residual, abs(own))
        identity = max(identity, abs(own - spec.p * (step.value(pi_c, kappa_c) - ell / spec.p)))
        for pi, kappa in competitor_set(step, pi_c, kappa_c, C, settings, rng):
            drift = _gamma_drift(step, ell, pi_c, kappa_c, pi, kappa)
            worst = max(worst, drift)
            if counter is None and drift > settings.tol_mart:
                counter = Counterexample(check="deflator_supermartingale", node=step.node, pi=pi.tolist(),
                                         kappa=kappa, drift=drift)
    if lattice.is_tree:
        strategy = _strategy(cand)
        gamma = gamma_path(cand, lattice, spec, strategy)
        zeta = z_path(cand, lattice, spec, strategy)
        for g_level, z_level in zip(gamma, zeta):
            identity = max(identity, float(np.max(np.abs(g_level - spec.p * z_level))))
    return DriftCheck(candidate_residual=residual, competitor_max_drift=max(worst, 0.0),
                      counterexample=counter, pz_identity_residual=identity)


def gamma_drift_vs_G(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    pi: Sequence[float],
    kappa: float = 0.0,
) -> List[np.ndarray]:
    """
    Per node the pair (empirical Gamma drift rate, G(pi, pi_check)) where G uses the node's tagged
    characteristics of (dR, d ell); wealth is normalized at the node.
    """
    pi = np.asarray(pi, dtype=float)
    out: List[np.ndarray] = []
    for k in range(lattice.n_steps):
        level = np.empty((len(lattice.levels[k]), 2))
        dA = float(lattice.clock[k])
        for i in range(level.shape[0]):
            step = OneStep.at(lattice, spec, k, i, _ell(cand)[k + 1])
            ell = float(_ell(cand)[k][i])
            pi_c, kappa_c = _strategy(cand).at(k, i)
            empirical = _gamma_drift(step, ell, np.asarray(pi_c), kappa_c, pi, kappa) / dA
            ctx = GContext(ell=ell, chars=step.characteristics(ell, "tagged"), p=spec.p, constraint=C)
            level[i] = (empirical, directional_G(ctx, pi, pi_c))
        out.append(level)
    return out


def max_discrepancy(pairs: List[np.ndarray]) -> float:
    return max(float(np.max(np.abs(level[:, 0] - level[:, 1]))) for level in pairs)


# ---------------------------------------------------------------------------
# xi decomposition and the exponential formula
# ---------------------------------------------------------------------------

def xi_drift_rate(
    chars: JointCharacteristics,
    ell: float,
    pi_c: np.ndarray,
    kappa_c: float,
    pi: np.ndarray,
    kappa: float,
    dmu: float,
    p: float,
) -> float:
    """
    Drift rate of xi = ell Xc^(p-1) X per unit of the clock, wealth normalized to one, from the
    joint characteristics of (dR, d ell). Exact for discrete characteristics; branches that move
    neither R nor ell contribute only through consumption.
    """
    dA = chars.dA
    pi_c, pi = np.asarray(pi_c, dtype=float), np.asarray(pi, dtype=float)
    pi_bar = (p - 1.0) * pi_c + pi
    kappa_bar = (p - 1.0) * kappa_c + kappa
    rate = (
        chars.aL
        + ell * float(pi_bar @ chars.bR)
        - ell * kappa_bar * dmu / dA
        + float(pi_bar @ chars.cRL)
        + ell * (p - 1.0) * float((0.5 * (p - 2.0) * pi_c + pi) @ chars.cR @ pi_c)
        - chars.aL * kappa_bar * dmu
    )
    ax, axp, aw = chars.active_atoms()
    if ax.size:
        h = cutoff(ax).reshape(ax.shape)
        Fc = 1.0 + ax @ pi_c - kappa_c * dmu
        F = np.maximum(1.0 + ax @ pi - kappa * dmu, 0.0)
        brace = Fc ** (p - 1.0) * F - 1.0 - h @ pi_bar + kappa_bar * dmu
        rate += float(aw @ (axp * (h @ pi_bar) + (ell + axp) * brace))
    still = 1.0 - float(aw.sum()) * dA
    brace0 = (1.0 - kappa_c * dmu) ** (p - 1.0) * (1.0 - kappa * dmu) - 1.0 + kappa_bar * dmu
    return rate + ell * brace0 * still / dA


def xi_node_residual(
    step: OneStep,
    dec: NodeDecomposition,
    ell: float,
    pi_c: np.ndarray,
    kappa_c: float,
    pi: np.ndarray,
    kappa: float,
    scale: float = 1.0,
) -> float:
    """
    One step of xi against its decomposition at a node. d ell is rebuilt from the martingale
    decomposition (drift, loading on the centred returns, orthogonal part, jump table); the
    branch increments of xi are compared with their expansion in that d ell, and the mean
    increment with the drift rate of the rebuilt characteristics.
    """
    p, dmu = step.spec.p, step.dmu
    dA = float(step.lattice.clock[step.k])
    dR, probs = step.dR, step.probs
    xprime = dec.aL * dA + (dR - probs @ dR) @ dec.phi + dec.residual
    for j, jump in dec.jumps.items():
        xprime[j] = jump
    pi_c, pi = np.asarray(pi_c, dtype=float), np.asarray(pi, dtype=float)
    Fc, F = step.factors(pi_c, kappa_c), np.maximum(step.factors(pi, kappa), 0.0)
    direct = step.L_next * Fc ** (p - 1.0) * F - ell

    pi_bar = (p - 1.0) * pi_c + pi
    kappa_bar = (p - 1.0) * kappa_c + kappa
    ph = cutoff(dR).reshape(dR.shape) @ pi_bar
    brace = Fc ** (p - 1.0) * F - 1.0 - ph + kappa_bar * dmu
    expanded = xprime + ell * ph - ell * kappa_bar * dmu + xprime * ph - xprime * kappa_bar * dmu + (ell + xprime) * brace
    pathwise = float(np.max(np.abs(direct - expanded)))

    chars = node_characteristics(step.lattice, step.k, step.i, ell + xprime, ell, "discrete")
    drift = xi_drift_rate(chars, ell, pi_c, kappa_c, pi, kappa, dmu, p) * dA
    return scale * max(pathwise, abs(float(probs @ direct) - drift))


def xi_decomposition_check(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    strategy: StrategyTable,
) -> float:
    """
    Max over path steps of the xi residual for xi = ell Xc^(p-1) X. Trees weight each node by the
    actual wealths, recombining lattices normalize both wealths to one at every node.
    """
    ell = _ell(cand)
    cand_strategy = _strategy(cand)
    decompositions = decompose_martingale_part(cand, lattice)
    if lattice.is_tree:
        candidate = wealth_path(lattice, spec, cand_strategy)
        wealth = wealth_path(lattice, spec, strategy, allow_zero=True)
    worst = 0.0
    for k in range(lattice.n_steps):
        for i in range(len(lattice.levels[k])):
            step = OneStep.at(lattice, spec, k, i, ell[k + 1])
            scale = candidate[k][i] ** (spec.p - 1.0) * wealth[k][i] if lattice.is_tree else 1.0
            pi_c, kappa_c = cand_strategy.at(k, i)
            pi, kappa = strategy.at(k, i)
            residual = xi_node_residual(step, decompositions[k][i], float(ell[k][i]), pi_c, kappa_c, pi, kappa, scale)
            worst = max(worst, residual)
    return worst


@dataclass(frozen=True)
class ExponentialCheck:
    max_residual: float
    continuous_gap: float
    kappa_gap: float
    applicable: bool


def psi_exponential_check(cand: Candidate, lattice: MarketLattice, spec: PowerUtilitySpec) -> ExponentialCheck:
    """
    ell_next (1 + r)^p / ell = 1 + dPsi - rho dmu on every branch, with r the candidate's step return,
    dPsi the compensated increment of the exponent and rho = D kappa^p / ell the consumption
    discount (equal to kappa when kappa = (D/ell)^beta). The continuous product
    (1 + dPsi) exp(-kappa dmu) is reported as a gap.
    """
    p = spec.p
    residual, gap, kappa_gap, applicable = 0.0, 0.0, 0.0, True
    for step, ell, pi_c, kappa_c in _steps(cand, lattice, spec):
        dmu = step.dmu
        hx = cutoff(step.dR).reshape(step.dR.shape)
        probs = step.probs
        r = step.dR @ pi_c - kappa_c * dmu
        ratio = step.L_next / ell - 1.0
        ph = hx @ pi_c
        K = (1.0 + r) ** p - 1.0 - p * ph
        parts = [ratio, p * ph, p * ratio * ph, (1.0 + ratio) * K]
        dpsi = sum(part - probs @ part for part in parts)
        rho = spec.D_at(float(lattice.times[step.k])) * kappa_c ** p / ell if dmu > 0 else 0.0
        lhs = step.L_next * (1.0 + r) ** p / ell
        residual = max(residual, float(np.max(np.abs(lhs - (1.0 + dpsi - rho * dmu)))))
        gap = max(gap, float(np.max(np.abs(lhs - (1.0 + dpsi) * np.exp(-kappa_c * dmu)))))
        kappa_gap = max(kappa_gap, abs(rho - kappa_c) if dmu > 0 else 0.0)
        applicable = applicable and bool(np.all(1.0 + dpsi > 0))
    return ExponentialCheck(max_residual=residual, continuous_gap=gap, kappa_gap=kappa_gap, applicable=applicable)


# ---------------------------------------------------------------------------
# q-optimal drift and first-order audit
# ---------------------------------------------------------------------------

def _discrete_context(step: OneStep, pi_c: np.ndarray, kappa_c: float, C: ConstraintSet) -> Tuple[GContext, np.ndarray]:
    s = 1.0 - kappa_c * step.dmu
    mean_L = float(step.probs @ step.L_next)
    ctx = GContext(ell=mean_L, chars=step.characteristics(mean_L, "discrete"), p=step.spec.p, constraint=C.dilate(1.0 / s))
    return ctx, np.asarray(pi_c, dtype=float) / s


def deflator_qopt_drift(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
) -> List[np.ndarray]:
    """Per node pi'grad g(pi) = -G(0, pi) at the optimal portfolio; all zero iff the deflator drift vanishes."""
    if not C.is_convex:
        raise ModelError("the q-optimal drift criterion needs a convex constraint set")
    out: List[np.ndarray] = []
    for k in range(lattice.n_steps):
        out.append(np.zeros(len(lattice.levels[k])))
    for step, _, pi_c, kappa_c in _steps(cand, lattice, spec):
        ctx, y = _discrete_context(step, pi_c, kappa_c, C)
        out[step.k][step.i] = -directional_G(ctx, np.zeros_like(y), y)
    return out


def first_order_audit(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
) -> float:
    """Max of G(y, pi_check) over audit grids of every node (convex constraint sets only)."""
    settings = settings or Settings()
    worst = float("-inf")
    for step, _, pi_c, kappa_c in _steps(cand, lattice, spec):
        ctx, y_c = _discrete_context(step, pi_c, kappa_c, C)
        for y in audit_grid(ctx, y_c, settings.audit_points):
            worst = max(worst, directional_G(ctx, y, y_c))
    return worst


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

class VerificationReport(BaseModel):
    """
    Optimality certificates of a candidate, schema bp-verify/1.

    flags, one per check:
        z_martingale: Z = ell X^p / p + consumed utility has zero drift under the candidate.
        z_supermartingale: Z has nonpositive drift for every competitor. With z_martingale this
            is the direct verification of optimality.
        deflator_supermartingale: Gamma = X ell Xc^(p-1) + consumed marginal utility is a martingale
            under the candidate and a supermartingale for every competitor, i.e. the candidate's
            marginal utility is a supermartingale deflator.
        gamma_pz_identity: Gamma = p Z along the candidate.
        xi_identity: xi = ell Xc^(p-1) X matches its decomposition.
        exponential_formula: ell Xc^p / p is the stochastic exponential of the optimal strategy.
        first_order: G(y, pi_check) <= 0 on the audit grid, which certifies optimality on its own
            for convex C (None otherwise).
        minimality: ell >= L node-wise against the oracle opportunity process L (None without
            an oracle).

    certificates groups the flags by the optimality result they establish (see CERTIFICATES).
    """


    model_config = ConfigDict(populate_by_name=True)

    schema_: Literal["bp-verify/1"] = Field(VERIFY_SCHEMA, alias="schema")
    z_candidate_residual: float
    z_competitor_max_drift: float
    gamma_residual: float
    gamma_competitor_max_drift: float
    gamma_pz_residual: float
    G_max: Optional[float] = None
    xi_residual: float
    psi_residual: float
    psi_continuous_gap: float
    psi_applicable: bool
    kappa_formula_residual: float
    qopt_max_abs: Optional[float] = None
    minimality_violation: Optional[float] = None
    ell_ratio_sup: Optional[float] = None
    flags: Dict[str, Optional[bool]]
    certificates: Dict[str, Optional[bool]] = {}
    counterexample: Optional[Counterexample] = None
    notes: List[str] = []
    passed: bool

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.model_dump_json(by_alias=True, indent=2) + "\n", encoding="utf-8")
        logger.info(f"💾 Verification report written to {path}")
        return path


def certificates_from_flags(flags: Dict[str, Optional[bool]]) -> Dict[str, Optional[bool]]:
    """None when none of a certificate's flags applies."""
    out: Dict[str, Optional[bool]] = {}
    for name, members in CERTIFICATES.items():
        known = [flags[m] for m in members if flags.get(m) is not None]
        out[name] = all(known) if known else None
    return out


def verify_all(
    cand: Candidate,
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    C: ConstraintSet,
    settings: Optional[Settings] = None,
    oracle: Optional[OpportunityLattice] = None,
    rng: Optional[np.random.Generator] = None,
) -> VerificationReport:
    """
    Run every certificate on a candidate. A generator adds random competitors to the
    supermartingale checks.

    Raises:
        CandidateError: the candidate fails validation (shape, terminal condition, admissibility)
    """
    settings = settings or Settings()
    if isinstance(cand, OpportunityLattice):
        cand = SolutionTriple(ell=cand.L, pi=cand.strategy.pi, kappa=cand.strategy.kappa)
    cand.validate(lattice, spec, C)
    logger.info(f"🔍 Verifying candidate on {lattice.n_steps} steps")

    z = check_z(cand, lattice, spec, C, settings, rng)
    gamma = check_gamma(cand, lattice, spec, C, settings, rng)
    zero = StrategyTable.constant(lattice, np.zeros(lattice.d), 0.0)
    xi = xi_decomposition_check(cand, lattice, spec, zero)
    psi = psi_exponential_check(cand, lattice, spec)

    G_max, qopt = None, None
    if C.is_convex:
        G_max = first_order_audit(cand, lattice, spec, C, settings)
        qopt = max(float(np.max(np.abs(level))) for level in deflator_qopt_drift(cand, lattice, spec, C))

    minimality, ratio = None, None
    if oracle is not None:
        mini = compare_solution_to_oracle(cand, oracle, settings.tol_minimality)
        minimality, ratio = mini.max_violation, mini.ell_ratio_sup

    scale = max(1.0, max(float(np.max(np.abs(level))) for level in cand.ell))
    flags: Dict[str, Optional[bool]] = {
        "z_martingale": z.candidate_residual <= settings.tol_mart,
        "z_supermartingale": z.competitor_max_drift <= settings.tol_mart,
        "deflator_supermartingale": gamma.candidate_residual <= settings.tol_mart
        and gamma.competitor_max_drift <= settings.tol_mart,
        "gamma_pz_identity": gamma.pz_identity_residual <= 1e-11 * scale,
        "xi_identity": xi <= settings.tol_mart,
        "exponential_formula": psi.max_residual <= settings.tol_mart and psi.applicable,
        "first_order": None if G_max is None else G_max <= settings.tol_foc,
        "minimality": None if minimality is None else minimality <= settings.tol_minimality,
    }
    passed = all(flag for flag in flags.values() if flag is not None)
    report = VerificationReport(
        z_candidate_residual=z.candidate_residual,
        z_competitor_max_drift=z.competitor_max_drift,
        gamma_residual=gamma.candidate_residual,
        gamma_competitor_max_drift=gamma.competitor_max_drift,
        gamma_pz_residual=gamma.pz_identity_residual,
        G_max=G_max,
        xi_residual=xi,
        psi_residual=psi.max_residual,
        psi_continuous_gap=psi.continuous_gap,
        psi_applicable=psi.applicable,
        kappa_formula_residual=cand.kappa_formula_residual(lattice, spec),
        qopt_max_abs=qopt,
        minimality_violation=minimality,
        ell_ratio_sup=ratio,
        flags=flags,
        certificates=certificates_from_flags(flags),
        counterexample=z.counterexample or gamma.counterexample,
        notes=[CLASS_D_NOTE, GRID_NOTE],
        passed=passed,
    )
    logger.info(f"{'✅' if passed else '❌'} Verification {'passed' if passed else 'failed'}: "
                f"{', '.join(name for name, flag in flags.items() if flag is False) or 'all checks pass'}")
    return report
