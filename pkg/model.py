import logging
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import (
    AdmissibilityError,
    DomainError,
    ModelError,
    StepSizeError,
    StructureConditionError,
)

logger = logging.getLogger(__name__)

MODEL_SCHEMA = "bp-model/1"
PROB_TOL = 1e-12


class PowerUtilitySpec(BaseModel):
    """
    Power utility random field U_t(x) = D_t (1/p) x^p together with the consumption clock.

    D is either a constant or a deterministic path sampled at D_times (defaults to an
    equally spaced grid on [0, T]); values in between are linearly interpolated.
    """

    model_config = ConfigDict(frozen=True)

    p: float
    D: Union[float, Tuple[float, ...]] = 1.0
    D_times: Optional[Tuple[float, ...]] = None
    consumption_mode: Literal["terminal", "intermediate"] = "terminal"
    x0: float = 1.0
    T: float = 1.0

    @model_validator(mode="after")
    def _check(self) -> "PowerUtilitySpec":
        if self.p == 0 or self.p >= 1:
            raise ValueError(f"p must lie in (-inf, 0) or (0, 1), got {self.p}")
        if self.x0 <= 0 or self.T <= 0:
            raise ValueError("x0 and T must be positive")
        values = np.atleast_1d(np.asarray(self.D, dtype=float))
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise ValueError("D must be positive at every grid time")
        if self.D_times is not None and len(self.D_times) != values.size:
            raise ValueError("D_times and D must have the same length")
        return self

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def beta(self) -> float:
        return 1.0 / (1.0 - self.p)

    @property
    def intermediate(self) -> bool:
        return self.consumption_mode == "intermediate"

    def D_at(self, t: float) -> float:
        if isinstance(self.D, (int, float)):
            return float(self.D)
        values = np.asarray(self.D, dtype=float)
        if values.size == 1:
            return float(values[0])
        times = np.asarray(self.D_times) if self.D_times is not None else np.linspace(0.0, self.T, values.size)
        return float(np.interp(t, times, values))


def eval_utility(spec: PowerUtilitySpec, t: float, x: float) -> float:
    """U_t(x) = D_t (1/p) x^p for x > 0."""
    if not x > 0:
        raise DomainError(f"utility needs positive wealth, got {x}")
    return spec.D_at(t) * x ** spec.p / spec.p


def utility_extended(spec: PowerUtilitySpec, t: float, x: float) -> float:
    """Utility with its limit at zero wealth: 0 for p in (0,1), -inf for p < 0."""
    if x > 0:
        return spec.D_at(t) * x ** spec.p / spec.p
    if x == 0:
        return 0.0 if spec.p > 0 else float("-inf")
    raise DomainError(f"negative wealth {x}")


def eval_conjugate(spec: PowerUtilitySpec, t: float, y: float) -> float:
    """U*_t(y) = -(1/q) y^q D_t^beta, the convex conjugate sup_x {U_t(x) - xy}."""
    if not y > 0:
        raise DomainError(f"conjugate needs positive argument, got {y}")
    return -(y ** spec.q) * spec.D_at(t) ** spec.beta / spec.q


def cutoff(x: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Truncation h(x) = x 1{|x| <= radius}, row-wise for a (k, d) array; radius 0 gives h = 0."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    inside = (np.linalg.norm(x, axis=1) <= radius) if radius > 0 else np.zeros(x.shape[0], dtype=bool)
    return x * inside[:, None]


@dataclass(frozen=True)
class JointCharacteristics:
    """
    Differential characteristics of (R, L) per unit of the clock A, with finitely many jump atoms.

    atoms_x is (k, d), atoms_xp and atoms_w are (k,). A missing cL means the covariance
    block of the companion process is not tracked.
    """

    bR: np.ndarray
    cR: np.ndarray
    cRL: Optional[np.ndarray] = None
    aL: float = 0.0
    atoms_x: Optional[np.ndarray] = None
    atoms_xp: Optional[np.ndarray] = None
    atoms_w: Optional[np.ndarray] = None
    dA: float = 1.0
    cL: Optional[float] = None

    def __post_init__(self):
        bR = np.atleast_1d(np.asarray(self.bR, dtype=float))
        d = bR.size
        cR = np.asarray(self.cR, dtype=float).reshape(d, d)
        cRL = np.zeros(d) if self.cRL is None else np.asarray(self.cRL, dtype=float).reshape(d)
        ax = np.zeros((0, d)) if self.atoms_x is None else np.asarray(self.atoms_x, dtype=float).reshape(-1, d)
        k = ax.shape[0]
        axp = np.zeros(k) if self.atoms_xp is None else np.asarray(self.atoms_xp, dtype=float).reshape(k)
        aw = np.ones(k) if self.atoms_w is None else np.asarray(self.atoms_w, dtype=float).reshape(k)

        if not np.allclose(cR, cR.T, atol=1e-12):
            raise ModelError("cR must be symmetric")
        if d and np.linalg.eigvalsh(cR).min() < -1e-10:
            raise ModelError("cR must be positive semidefinite")
        if self.cL is not None:
            block = np.block([[cR, cRL[:, None]], [cRL[None, :], np.array([[self.cL]])]])
            if np.linalg.eigvalsh(block).min() < -1e-10:
                raise ModelError("joint covariance of (R, L) must be positive semidefinite")
        if np.any(aw < 0):
            raise ModelError("atom weights must be nonnegative")
        if k and np.any((np.abs(ax).max(axis=1) == 0) & (axp == 0)):
            raise ModelError("an atom must move R or L")
        if self.dA <= 0:
            raise ModelError("clock increment must be positive")

        object.__setattr__(self, "bR", bR)
        object.__setattr__(self, "cR", cR)
        object.__setattr__(self, "cRL", cRL)
        object.__setattr__(self, "atoms_x", ax)
        object.__setattr__(self, "atoms_xp", axp)
        object.__setattr__(self, "atoms_w", aw)

    @property
    def d(self) -> int:
        return self.bR.size

    @property
    def n_atoms(self) -> int:
        return self.atoms_x.shape[0]

    def active_atoms(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Atoms with strictly positive weight."""
        keep = self.atoms_w > 0
        return self.atoms_x[keep], self.atoms_xp[keep], self.atoms_w[keep]

    def r_part(self) -> "JointCharacteristics":
        """Drop everything that concerns the companion process."""
        return JointCharacteristics(
            bR=self.bR, cR=self.cR, atoms_x=self.atoms_x, atoms_xp=np.zeros(self.n_atoms),
            atoms_w=self.atoms_w, dA=self.dA,
        )


def p_suitable_check(chars: JointCharacteristics, p: float) -> float:
    """Sum over atoms with |x| > 1 of w (1 + |x'|) (1 + |x|)^p; finite for finite atom lists."""
    if not 0 < p < 1:
        raise DomainError(f"p-suitability is defined for p in (0, 1), got {p}")
    norms = np.linalg.norm(chars.atoms_x, axis=1)
    big = norms > 1.0
    return float(np.sum(chars.atoms_w[big] * (1.0 + np.abs(chars.atoms_xp[big])) * (1.0 + norms[big]) ** p))


def check_structure_condition(bR: Sequence[float], cR: Sequence[Sequence[float]]) -> np.ndarray:
    """
    Minimum-norm lambda with cR lambda = bR.

    Raises:
        StructureConditionError: bR is not in the range of cR (the model admits arbitrage
            through the covariance null space)
    """
    b = np.atleast_1d(np.asarray(bR, dtype=float))
    c = np.asarray(cR, dtype=float).reshape(b.size, b.size)
    lam, *_ = np.linalg.lstsq(c, b, rcond=None)
    if np.linalg.norm(c @ lam - b) > 1e-10 * max(1.0, np.linalg.norm(b)):
        raise StructureConditionError("drift is not in the range of the covariance; no-arbitrage fails")
    return lam


# ---------------------------------------------------------------------------
# Lattices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Branch:
    dR: np.ndarray
    prob: float
    child: int
    jump: bool = False


@dataclass(frozen=True)
class LatticeNode:
    branches: Tuple[Branch, ...] = ()
    label: str = ""

    @property
    def terminal(self) -> bool:
        return not self.branches


def _branch_arrays(node: LatticeNode, d: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    branches = node.branches
    arrays = (
        np.array([b.dR for b in branches], dtype=float).reshape(len(branches), d),
        np.array([b.prob for b in branches], dtype=float),
        np.array([b.child for b in branches], dtype=int),
        np.array([b.jump for b in branches], dtype=bool),
    )
    for a in arrays:
        a.setflags(write=False)
    return arrays


@dataclass(frozen=True)
class MarketLattice:
    """
    Finite-horizon Markov lattice of return increments.

    levels[k] holds the nodes at times[k]; each branch points to a node index at level k+1.
    Children may be shared, in which case wealth is path dependent and only one-step
    quantities are defined per node. clock[k] is the increment of A over step k.
    """

    d: int
    times: np.ndarray
    levels: Tuple[Tuple[LatticeNode, ...], ...]
    clock: Optional[np.ndarray] = None
    _arrays: Tuple[Tuple[Tuple[np.ndarray, ...], ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0) or times[0] != 0:
            raise ModelError("times must be a strictly increasing grid starting at 0")
        if len(self.levels) != times.size:
            raise ModelError("one level of nodes per grid time is required")
        if len(self.levels[0]) != 1:
            raise ModelError("the lattice must start from a single root node")
        clock = np.diff(times) if self.clock is None else np.asarray(self.clock, dtype=float)
        if clock.shape != (times.size - 1,) or np.any(clock <= 0):
            raise ModelError("clock increments must be positive, one per step")
        last = len(self.levels) - 1
        for k, level in enumerate(self.levels):
            for i, node in enumerate(level):
                if k == last:
                    if not node.terminal:
                        raise ModelError(f"terminal node {k}:{i} has branches")
                    continue
                if node.terminal:
                    raise ModelError(f"node {k}:{i} before the horizon has no branch")
                probs = np.array([b.prob for b in node.branches])
                if np.any(probs <= 0) or abs(probs.sum() - 1.0) > PROB_TOL:
                    raise ModelError(f"branch probabilities at node {k}:{i} must be positive and sum to 1")
                for b in node.branches:
                    if not 0 <= b.child < len(self.levels[k + 1]):
                        raise ModelError(f"branch of node {k}:{i} points to a missing child")
                    if np.asarray(b.dR).shape != (self.d,):
                        raise ModelError(f"branch of node {k}:{i} has the wrong dimension")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "clock", clock)
        object.__setattr__(self, "_arrays", tuple(tuple(_branch_arrays(node, self.d) for node in level) for level in self.levels))

    @property
    def n_steps(self) -> int:
        return len(self.levels) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_nodes(self) -> int:
        return sum(len(level) for level in self.levels)

    def dt(self, k: int) -> float:
        return float(self.times[k + 1] - self.times[k])

    @staticmethod
    def node_id(k: int, i: int) -> str:
        return f"{k}:{i}"

    def branch_arrays(self, k: int, i: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(dR as (n, d), probs, child indices, jump mask) of node (k, i); the arrays are read-only."""
        return self._arrays[k][i]

    @property
    def is_tree(self) -> bool:
        for k in range(self.n_steps):
            children = [b.child for node in self.levels[k] for b in node.branches]
            if len(children) != len(set(children)) or len(children) != len(self.levels[k + 1]):
                return False
        return True

    def parents(self) -> List[List[Tuple[int, int]]]:
        """For a tree: (parent index, branch index) of every node, level by level."""
        if not self.is_tree:
            raise ModelError("wealth is path dependent on a recombining lattice; expand it to a tree first")
        out: List[List[Tuple[int, int]]] = [[(-1, -1)]]
        for k in range(self.n_steps):
            level = [(-1, -1)] * len(self.levels[k + 1])
            for i, node in enumerate(self.levels[k]):
                for j, b in enumerate(node.branches):
                    level[b.child] = (i, j)
            out.append(level)
        return out


def consumption_increment(lattice: MarketLattice, spec: PowerUtilitySpec, k: int) -> float:
    """Increment of the consumption clock over step k (zero without intermediate consumption)."""
    return lattice.dt(k) if spec.intermediate else 0.0


def expand_lattice(lattice: MarketLattice, max_nodes: int = 200000) -> MarketLattice:
    """Unfold shared children into a tree with unique parents."""
    if lattice.is_tree:
        return lattice
    levels: List[List[LatticeNode]] = []
    origin = [0]
    total = 1
    for k in range(lattice.n_steps + 1):
        next_origin: List[int] = []
        level: List[LatticeNode] = []
        for i, src in enumerate(origin):
            node = lattice.levels[k][src]
            branches = []
            for b in node.branches:
                branches.append(Branch(dR=b.dR, prob=b.prob, child=len(next_origin), jump=b.jump))
                next_origin.append(b.child)
            level.append(LatticeNode(branches=tuple(branches), label=f"{node.label}/{i}"))
        levels.append(level)
        total += len(next_origin)
        if total > max_nodes:
            raise ModelError(f"expanded tree would exceed {max_nodes} nodes")
        origin = next_origin
    return MarketLattice(d=lattice.d, times=lattice.times, levels=tuple(tuple(lv) for lv in levels), clock=lattice.clock)


def build_lattice(
    chars: JointCharacteristics,
    steps: int,
    scheme: Literal["binomial", "multinomial"] = "binomial",
    T: float = 1.0,
) -> MarketLattice:
    """
    Moment-matching lattice with i.i.d. increments, one node per time.

    Every step has one branch per jump atom (probability w dt) and diffusion branches
    around the centre m = (b - sum w h(x)) dt / (1 - W), W = sum w dt, spread so that the
    diffusion part carries covariance c dt exactly.

    Raises:
        StepSizeError: W >= 1, so the diffusion branches would have no mass left
    """
    if steps < 1:
        raise ModelError("at least one step is required")
    if scheme == "binomial" and chars.d != 1:
        raise ModelError("the binomial scheme needs a single asset; use multinomial")
    dt = T / steps
    ax, _, aw = chars.active_atoms()
    total_w = float(aw.sum())
    W = total_w * dt
    if W >= 1.0:
        raise StepSizeError("jump probabilities exhaust the step", max_dt=1.0 / total_w)

    rest = 1.0 - W
    centre = (chars.bR - (aw[:, None] * cutoff(ax)).sum(axis=0)) * dt / rest if ax.size else chars.bR * dt
    evals, evecs = np.linalg.eigh(chars.cR * dt / rest)
    cols = [evecs[:, i] * np.sqrt(ev) for i, ev in enumerate(evals) if ev > 1e-12 * max(1.0, evals.max())]

    branches: List[Tuple[np.ndarray, float, bool]] = []
    if cols:
        scale = np.sqrt(len(cols))
        share = rest / (2 * len(cols))
        for col in cols:
            branches.append((centre + scale * col, share, False))
            branches.append((centre - scale * col, share, False))
    else:
        branches.append((centre, rest, False))
    for x, w in zip(ax, aw):
        branches.append((np.array(x, dtype=float), float(w * dt), True))

    levels = []
    for k in range(steps):
        node = LatticeNode(
            branches=tuple(Branch(dR=np.asarray(r, dtype=float), prob=pr, child=0, jump=j) for r, pr, j in branches),
            label=f"t{k}",
        )
        levels.append((node,))
    levels.append((LatticeNode(label=f"t{steps}"),))
    logger.debug(f"🌳 Built {scheme} lattice: {steps} steps, {len(branches)} branches per node")
    return MarketLattice(d=chars.d, times=np.linspace(0.0, T, steps + 1), levels=tuple(levels))


# ---------------------------------------------------------------------------
# Strategies and wealth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyTable:
    """Per-node portfolio fractions pi (n_k, d) and propensities to consume kappa (n_k,)."""

    pi: Tuple[np.ndarray, ...]
    kappa: Tuple[np.ndarray, ...]

    @classmethod
    def constant(cls, lattice: MarketLattice, pi: Sequence[float], kappa: float = 0.0) -> "StrategyTable":
        pi = np.asarray(pi, dtype=float).reshape(lattice.d)
        pis = tuple(np.tile(pi, (len(level), 1)) for level in lattice.levels)
        kappas = tuple(np.full(len(level), float(kappa)) for level in lattice.levels)
        return cls(pi=pis, kappa=kappas)

    def at(self, k: int, i: int) -> Tuple[np.ndarray, float]:
        return self.pi[k][i], float(self.kappa[k][i])


def wealth_path(
    lattice: MarketLattice,
    spec: PowerUtilitySpec,
    strategy: StrategyTable,
    allow_zero: bool = False,
) -> List[np.ndarray]:
    """
    Wealth X = x0 E(pi . R - kappa . mu) at every node of a tree.

    Args:
        lattice: Tree lattice (unique parents)
        spec: Utility specification, supplies x0 and the consumption clock
        strategy: Per-node (pi, kappa)
        allow_zero: Accept steps that take wealth exactly to zero (absorbing)

    Returns:
        One array of wealth values per level

    Raises:
        AdmissibilityError: some step factor 1 + pi'dR - kappa dmu is not positive
    """
    parents = lattice.parents()
    wealth = [np.array([spec.x0])]
    for k in range(lattice.n_steps):
        dmu = consumption_increment(lattice, spec, k)
        nxt = np.empty(len(lattice.levels[k + 1]))
        for c, (i, j) in enumerate(parents[k + 1]):
            pi, kappa = strategy.at(k, i)
            factor = 1.0 + float(lattice.levels[k][i].branches[j].dR @ pi) - kappa * dmu
            if abs(factor) <= 1e-14:
                factor = 0.0
            if factor < 0 or (factor == 0 and not allow_zero):
                raise AdmissibilityError(
                    f"wealth factor {factor:.3g} is not positive", node=MarketLattice.node_id(k, i)
                )
            nxt[c] = wealth[k][i] * factor
        wealth.append(nxt)
    return wealth


# ---------------------------------------------------------------------------
# Model file schema
# ---------------------------------------------------------------------------

class AtomSpec(BaseModel):
    x: List[float]
    xp: float = 0.0
    w: float = Field(ge=0)


class TreeBranchSpec(BaseModel):
    dR: List[float]
    prob: float = Field(gt=0)
    jump: bool = True
    next: Optional["TreeNodeSpec"] = None


class TreeNodeSpec(BaseModel):
    branches: List[TreeBranchSpec] = []


TreeBranchSpec.model_rebuild()


class TreeSpec(BaseModel):
    times: List[float]
    root: TreeNodeSpec


class ModelFile(BaseModel):
    """JSON model file, schema bp-model/1."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    schema_: Literal["bp-model/1"] = Field(MODEL_SCHEMA, alias="schema")
    p: float
    D: Union[float, List[float]] = 1.0
    D_times: Optional[List[float]] = None
    mode: Literal["terminal", "intermediate"] = "terminal"
    x0: float = 1.0
    T: float = 1.0
    d: int = Field(1, ge=1)
    b: Optional[List[float]] = None
    c: Optional[List[List[float]]] = None
    atoms: List[AtomSpec] = []
    steps: int = Field(1, ge=1)
    scheme: Literal["binomial", "multinomial"] = "binomial"
    tree: Optional[TreeSpec] = None
    constraint: Dict[str, Any] = {"type": "full"}
    theta: Optional[List[float]] = None
    sigma: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _dims(self) -> "ModelFile":
        if self.p == 0 or self.p >= 1:
            raise ValueError(f"p must lie in (-inf, 0) or (0, 1), got {self.p}")
        if self.b is not None and len(self.b) != self.d:
            raise ValueError("b must have d entries")
        if self.c is not None and (len(self.c) != self.d or any(len(row) != self.d for row in self.c)):
            raise ValueError("c must be d x d")
        if any(len(a.x) != self.d for a in self.atoms):
            raise ValueError("every atom x must have d entries")
        if self.tree is None and self.b is None and self.theta is None:
            raise ValueError("either a tree, characteristics (b, c) or theta must be given")
        return self

    def to_spec(self) -> PowerUtilitySpec:
        D = self.D if isinstance(self.D, (int, float)) else tuple(self.D)
        return PowerUtilitySpec(
            p=self.p, D=D, D_times=tuple(self.D_times) if self.D_times else None,
            consumption_mode=self.mode, x0=self.x0, T=self.T,
        )

    def to_chars(self) -> JointCharacteristics:
        b = np.zeros(self.d) if self.b is None else np.array(self.b)
        c = np.zeros((self.d, self.d)) if self.c is None else np.array(self.c)
        if self.b is None and self.theta is not None:
            sigma = self.sigma_matrix()
            c = sigma @ sigma.T
            b = sigma @ np.array(self.theta)
        return JointCharacteristics(
            bR=b, cR=c,
            atoms_x=np.array([a.x for a in self.atoms]).reshape(-1, self.d),
            atoms_xp=np.array([a.xp for a in self.atoms]),
            atoms_w=np.array([a.w for a in self.atoms]),
        )

    def sigma_matrix(self) -> np.ndarray:
        if self.sigma is not None:
            return np.array(self.sigma, dtype=float).reshape(self.d, -1)
        return np.eye(self.d)

    def to_lattice(self) -> MarketLattice:
        if self.tree is not None:
            return tree_to_lattice(self.tree, self.d)
        return build_lattice(self.to_chars(), self.steps, self.scheme, self.T)


def tree_to_lattice(tree: TreeSpec, d: int) -> MarketLattice:
    """Number the nodes of a nested tree level by level."""
    levels: List[List[LatticeNode]] = []
    frontier: List[Optional[TreeNodeSpec]] = [tree.root]
    depth = len(tree.times) - 1
    for k in range(depth + 1):
        level: List[LatticeNode] = []
        nxt: List[Optional[TreeNodeSpec]] = []
        for i, spec_node in enumerate(frontier):
            branches = [] if spec_node is None else spec_node.branches
            if k == depth and branches:
                raise ModelError("tree is deeper than its time grid")
            if k < depth and not branches:
                raise ModelError(f"node {k}:{i} ends before the horizon")
            built = []
            for b in branches:
                if len(b.dR) != d:
                    raise ModelError(f"branch at node {k}:{i} has the wrong dimension")
                built.append(Branch(dR=np.array(b.dR, dtype=float), prob=b.prob, child=len(nxt), jump=b.jump))
                nxt.append(b.next)
            level.append(LatticeNode(branches=tuple(built), label=f"{k}:{i}"))
        levels.append(level)
        frontier = nxt
    return MarketLattice(d=d, times=np.array(tree.times, dtype=float), levels=tuple(tuple(lv) for lv in levels))


def load_model_file(path: Union[str, Path]) -> ModelFile:
    """
    Read and validate a bp-model/1 file.

    Raises:
        ModelError: missing file, malformed JSON or schema violation
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ModelError(f"model file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ModelError(f"malformed JSON in {path}: {e}") from e
    return parse_model(raw)


def parse_model(raw: Any) -> ModelFile:
    try:
        return ModelFile.model_validate(raw)
    except ValidationError as e:
        raise ModelError(f"model does not match {MODEL_SCHEMA}: {e}") from e
