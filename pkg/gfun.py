import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from config import Settings
from constraints import (
    ConstraintSet,
    NaturalConstraints,
    feasible_box,
    natural_constraints,
    null_space,
    preimage_point,
    sigma_factor,
    sigma_image,
)
from errors import DomainError, ModelError, OutsideDomainError, UnboundedObjectiveError
from model import JointCharacteristics, PowerUtilitySpec, check_structure_condition, cutoff

logger = logging.getLogger(__name__)

NEG_INF = float("-inf")
DOMAIN_TOL = 1e-12


@dataclass(frozen=True)
class GContext:
    """
    Everything the local objective g needs at one node.

    ell is the left limit of the opportunity process; phi is the factor loading with
    cR phi = cRL used by the closed form (solved from cRL when not supplied).
    """

    ell: float
    chars: JointCharacteristics
    p: float
    constraint: ConstraintSet
    phi: Optional[np.ndarray] = None
    cutoff_radius: float = 1.0

    def __post_init__(self):
        if not self.ell > 0:
            raise DomainError(f"the opportunity process must be positive, got {self.ell}")
        if self.constraint.d != self.chars.d:
            raise ModelError("constraint and characteristics have different dimensions")
        _, axp, _ = self.chars.active_atoms()
        if axp.size and np.min(self.ell + axp) <= 0:
            raise DomainError("ell + x' must be positive for every atom")

    @property
    def natural(self) -> NaturalConstraints:
        return natural_constraints(self.chars.atoms_x, self.chars.atoms_w)

    def atoms(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(x, x', w, h(x)) for the atoms with positive weight."""
        ax, axp, aw = self.chars.active_atoms()
        return ax, axp, aw, cutoff(ax, self.cutoff_radius).reshape(ax.shape)


def eval_f(ctx: GContext, spec: PowerUtilitySpec, t: float, k: float) -> float:
    """f_t(k) = U_t(k) - ell k."""
    if k < 0:
        raise DomainError(f"consumption rate must be nonnegative, got {k}")
    if k == 0:
        return 0.0 if spec.p > 0 else NEG_INF
    return spec.D_at(t) * k ** spec.p / spec.p - ctx.ell * k


def kappa_star(spec: PowerUtilitySpec, t: float, ell: float) -> float:
    """Optimal propensity to consume (D_t / ell)^beta."""
    if not ell > 0:
        raise DomainError(f"ell must be positive, got {ell}")
    return (spec.D_at(t) / ell) ** spec.beta


def _margins(ctx: GContext, y: np.ndarray, ax: np.ndarray) -> np.ndarray:
    margins = 1.0 + ax @ y
    if margins.size and margins.min() < -DOMAIN_TOL:
        raise OutsideDomainError(f"portfolio {np.round(y, 10).tolist()} violates the natural constraints")
    return np.maximum(margins, 0.0)


def eval_g(ctx: GContext, y: Sequence[float]) -> float:
    """
    g(y) = ell y'(bR + cRL/ell + (p-1)/2 cR y)
           + sum w [x' y'h(x) + (ell + x')((1 + y'x)^p / p - 1/p - y'h(x))]

    Returns -inf for p < 0 when an atom sits on the boundary 1 + y'x = 0.

    Raises:
        OutsideDomainError: y violates the natural constraints
    """
    y = np.asarray(y, dtype=float).reshape(ctx.chars.d)
    ch, p, ell = ctx.chars, ctx.p, ctx.ell
    ax, axp, aw, hx = ctx.atoms()
    margins = _margins(ctx, y, ax)
    if p < 0 and margins.size and margins.min() == 0.0:
        return NEG_INF
    value = ell * float(y @ (ch.bR + ch.cRL / ell + 0.5 * (p - 1.0) * (ch.cR @ y)))
    if ax.size:
        yh = hx @ y
        value += float(np.sum(aw * (axp * yh + (ell + axp) * ((margins ** p - 1.0) / p - yh))))
    return value


def grad_g(ctx: GContext, y: Sequence[float]) -> np.ndarray:
    """Gradient of g at a point of C0* (the atoms' margins must be positive)."""
    y = np.asarray(y, dtype=float).reshape(ctx.chars.d)
    ch, p, ell = ctx.chars, ctx.p, ctx.ell
    ax, axp, aw, hx = ctx.atoms()
    grad = ell * (ch.bR + ch.cRL / ell + (p - 1.0) * (ch.cR @ y))
    if ax.size:
        margins = _margins(ctx, y, ax)
        if margins.min() <= 0:
            raise OutsideDomainError("the gradient of g needs a strictly admissible portfolio")
        coef = aw * (ell + axp) * margins ** (p - 1.0)
        grad = grad + (aw * axp) @ hx + coef @ ax - (aw * (ell + axp)) @ hx
    return grad


def hess_g(ctx: GContext, y: Sequence[float]) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(ctx.chars.d)
    ch, p, ell = ctx.chars, ctx.p, ctx.ell
    ax, axp, aw, _ = ctx.atoms()
    hess = ell * (p - 1.0) * ch.cR
    if ax.size:
        margins = _margins(ctx, y, ax)
        coef = aw * (ell + axp) * (p - 1.0) * margins ** (p - 2.0)
        hess = hess + (ax.T * coef) @ ax
    return hess


def directional_G(ctx: GContext, y: Sequence[float], y_check: Sequence[float]) -> float:
    """
    Formal directional derivative of g at y_check in the direction y - y_check.

    Raises:
        OutsideDomainError: y outside C0 or y_check outside C0*
    """
    y = np.asarray(y, dtype=float).reshape(ctx.chars.d)
    y_check = np.asarray(y_check, dtype=float).reshape(ctx.chars.d)
    natural = ctx.natural
    if not natural.contains(y):
        raise OutsideDomainError("y must satisfy the natural constraints")
    if not natural.contains(y_check, strict=True):
        raise OutsideDomainError("the base point must satisfy the strict natural constraints")
    return float((y - y_check) @ grad_g(ctx, y_check))


# ---------------------------------------------------------------------------
# Maximization
# ---------------------------------------------------------------------------

def loading(ctx: GContext) -> np.ndarray:
    """phi with cR phi = cRL (the caller's value when given)."""
    if ctx.phi is not None:
        return np.asarray(ctx.phi, dtype=float).reshape(ctx.chars.d)
    if not np.any(ctx.chars.cRL):
        return np.zeros(ctx.chars.d)
    return check_structure_condition(ctx.chars.cRL, ctx.chars.cR)


def market_price_of_risk(ctx: GContext) -> np.ndarray:
    """Psi = lambda + phi / ell, where cR lambda = bR."""
    lam = check_structure_condition(ctx.chars.bR, ctx.chars.cR)
    return lam + loading(ctx) / ctx.ell


def maximize_g(
    ctx: GContext,
    settings: Optional[Settings] = None,
    start: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, float]:
    """
    Maximize g over the constraint set intersected with the natural constraints.

    Finite sets are enumerated, star sets searched segment by segment, atom-free
    contexts solved in closed form and convex sets with atoms handled by projected
    gradient ascent from start (default: the origin).

    Returns:
        (maximizer, maximum)

    Raises:
        StructureConditionError: atom-free context whose drift is not in the range of cR
        UnboundedObjectiveError: g has no finite supremum
    """
    settings = settings or Settings()
    C = ctx.constraint
    if C.kind == "finite":
        return _maximize_finite(ctx)
    if C.kind == "star":
        return _maximize_star(ctx)
    if not C.is_convex:
        raise ModelError(f"cannot maximize over a non-convex {C.kind} set")
    ax, _, _, _ = ctx.atoms()
    if ax.size == 0:
        return _maximize_closed_form(ctx)
    return _maximize_projected_gradient(ctx, settings, start)


def _maximize_finite(ctx: GContext) -> Tuple[np.ndarray, float]:
    natural = ctx.natural
    best_y, best_g = None, NEG_INF
    for z in ctx.constraint.points:
        if not natural.contains(z):
            continue
        value = eval_g(ctx, z)
        if best_y is None or value > best_g:
            best_y, best_g = z.copy(), value
    logger.debug(f"🔍 Enumerated {len(ctx.constraint.points)} points, best g = {best_g:.6g}")
    return best_y, best_g


def _maximize_star(ctx: GContext) -> Tuple[np.ndarray, float]:
    ax, _, _, _ = ctx.atoms()
    best_y, best_g = np.zeros(ctx.chars.d), 0.0
    for z in ctx.constraint.points:
        moves = ax @ z if ax.size else np.zeros(0)
        t_max = min([1.0] + [-1.0 / m for m in moves if m < 0])
        if ctx.p < 0 and t_max < 1.0:
            t_max *= 1.0 - 1e-12
        res = minimize_scalar(lambda t: -eval_g(ctx, t * z), bounds=(0.0, t_max), method="bounded",
                              options={"xatol": 1e-12})
        for t in (res.x, t_max):
            value = eval_g(ctx, t * z)
            if value > best_g:
                best_y, best_g = t * z, value
    return best_y, best_g


def _maximize_closed_form(ctx: GContext) -> Tuple[np.ndarray, float]:
    psi = market_price_of_risk(ctx)
    sigma = sigma_factor(ctx.chars.cR)
    beta = 1.0 / (1.0 - ctx.p)
    u = sigma.T @ psi
    image = sigma_image(sigma, ctx.constraint)
    target = beta * u
    v = image.project(target)[0]
    y = preimage_point(sigma, ctx.constraint, v)
    g_star = 0.5 * ctx.ell * (1.0 - ctx.p) * (beta ** 2 * float(u @ u) - float((v - target) @ (v - target)))
    logger.debug(f"🧮 Closed-form maximizer {np.round(y, 8).tolist()}, g* = {g_star:.8g}")
    return y, g_star


def _feasible_step(ctx: GContext, y: np.ndarray, direction: np.ndarray, ax: np.ndarray) -> float:
    """Largest t <= 1 keeping y + t direction strictly inside the natural constraints."""
    margins = 1.0 + ax @ y
    rates = ax @ direction
    shrinking = rates < 0
    if not np.any(shrinking):
        return 1.0
    limit = float(np.min(margins[shrinking] / -rates[shrinking]))
    return min(1.0, 0.999 * limit)


def _interior_start(ctx: GContext, start: Optional[Sequence[float]]) -> np.ndarray:
    """start projected onto C, then pulled toward the origin until it is strictly inside C0."""
    if start is None:
        return np.zeros(ctx.chars.d)
    y = ctx.constraint.project(np.asarray(start, dtype=float).reshape(ctx.chars.d))[0]
    natural = ctx.natural
    for _ in range(60):
        if natural.contains(y, strict=True):
            return y
        y = 0.5 * y
    return np.zeros(ctx.chars.d)


def _maximize_projected_gradient(
    ctx: GContext, settings: Settings, start: Optional[Sequence[float]] = None
) -> Tuple[np.ndarray, float]:
    C = ctx.constraint
    ax, _, _, _ = ctx.atoms()
    y = _interior_start(ctx, start)
    value = eval_g(ctx, y)
    grad = grad_g(ctx, y)
    alpha = 1.0 / max(1.0, float(np.linalg.norm(hess_g(ctx, y), 2)))
    for it in range(settings.pg_max_iter):
        target = C.project(y + alpha * grad)[0]
        direction = target - y
        step_norm = float(np.linalg.norm(direction))
        if step_norm <= 1e-14 * (1.0 + float(np.linalg.norm(y))):
            break
        t = _feasible_step(ctx, y, direction, ax)
        slope = float(grad @ direction)
        accepted = False
        for _ in range(60):
            trial = y + t * direction
            trial_value = eval_g(ctx, trial)
            if trial_value >= value + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        new_grad = grad_g(ctx, trial)
        s, r = trial - y, new_grad - grad
        curvature = float(s @ r)
        alpha = float(s @ s) / -curvature if curvature < 0 else min(2.0 * alpha, 1e20)
        improvement = trial_value - value
        y, value, grad = trial, trial_value, new_grad
        if np.linalg.norm(y) > settings.unbounded_norm:
            raise UnboundedObjectiveError(
                f"g keeps increasing along {np.round(y / np.linalg.norm(y), 6).tolist()}; the problem is not finite"
            )
        if improvement <= 1e-16 * (1.0 + abs(value)) and t * step_norm <= 1e-12:
            break
    y, value = _newton_polish(ctx, y, value)
    logger.debug(f"🧮 Projected gradient stopped after {it + 1} iterations, g* = {value:.10g}")
    return y, value


def _newton_polish(ctx: GContext, y: np.ndarray, value: float) -> Tuple[np.ndarray, float]:
    C, natural = ctx.constraint, ctx.natural
    for _ in range(20):
        step = -np.linalg.pinv(hess_g(ctx, y)) @ grad_g(ctx, y)
        trial = y + step
        if not (C.contains(trial, tol=0.0) and natural.contains(trial, strict=True)):
            break
        trial_value = eval_g(ctx, trial)
        if trial_value < value:
            break
        y, value = trial, trial_value
        if np.linalg.norm(step) <= 1e-15 * (1.0 + np.linalg.norm(y)):
            break
    return y, value


@dataclass(frozen=True)
class MultiStart:
    maximizers: List[np.ndarray]
    values: List[float]
    spread: float


def multistart_maximize(
    ctx: GContext, rng: np.random.Generator, settings: Optional[Settings] = None
) -> MultiStart:
    """
    Maximize g from the origin and from settings.g_starts - 1 standard normal starts.

    spread is the largest distance from the first maximizer to the others once the
    component in the null space of the characteristics is removed.
    """
    settings = settings or Settings()
    starts = [None] + [rng.standard_normal(ctx.chars.d) for _ in range(settings.g_starts - 1)]
    results = [maximize_g(ctx, settings, start) for start in starts]
    maximizers = [y for y, _ in results]
    basis = null_space(ctx.chars)
    spread = 0.0
    for y in maximizers[1:]:
        gap = y - maximizers[0]
        gap = gap - basis @ (basis.T @ gap)
        spread = max(spread, float(np.linalg.norm(gap)))
    logger.debug(f"🔍 {len(starts)} starts, maximizers agree up to {spread:.3g} modulo N")
    return MultiStart(maximizers=maximizers, values=[v for _, v in results], spread=spread)


def audit_grid(ctx: GContext, center: Sequence[float], points: int = 41) -> List[np.ndarray]:
    """
    Points of C and C0 around a maximizer: a grid over (up to) the first two coordinates
    plus small perturbations of the center in every coordinate.
    """
    center = np.asarray(center, dtype=float).reshape(ctx.chars.d)
    C, natural = ctx.constraint, ctx.natural
    if C.kind == "finite":
        return [z.copy() for z in C.points if natural.contains(z)]
    lo, hi = feasible_box(C, natural) if C.kind != "image" else (np.full(C.d, -np.inf), np.full(C.d, np.inf))
    radius = 2.0 * (1.0 + np.abs(center))
    lo = np.where(np.isfinite(lo), lo, center - radius)
    hi = np.where(np.isfinite(hi), hi, center + radius)
    axes = [np.linspace(lo[j], hi[j], points) for j in range(min(ctx.chars.d, 2))]
    out: List[np.ndarray] = []
    for combo in np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T:
        y = center.copy()
        y[: len(axes)] = combo
        out.append(y)
    for j in range(ctx.chars.d):
        for eps in (-1e-3, -1e-6, 1e-6, 1e-3):
            y = center.copy()
            y[j] += eps * max(1.0, abs(center[j]))
            out.append(y)
    return [y for y in out if C.contains(y) and natural.contains(y)]


# ---------------------------------------------------------------------------
# Continuous-time drivers
# ---------------------------------------------------------------------------

def continuous_driver_F(
    ell: float, phi: Sequence[float], sigma: np.ndarray, lam: Sequence[float], C: ConstraintSet, p: float
) -> float:
    """F(ell, phi) = 1/2 ell {p(1-p) d^2(beta sigma'Psi) + p/(p-1) |sigma'Psi|^2}, Psi = lam + phi/ell."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    psi = np.asarray(lam, dtype=float) + np.asarray(phi, dtype=float) / ell
    u = sigma.T @ psi
    beta = 1.0 / (1.0 - p)
    dist = sigma_image(sigma, C).distance_sq(beta * u)
    return 0.5 * ell * (p * (1.0 - p) * dist + p / (p - 1.0) * float(u @ u))


def cone_driver_F(
    ell: float, phi: Sequence[float], sigma: np.ndarray, lam: Sequence[float], C: ConstraintSet, p: float
) -> float:
    """Driver for convex cones: p / (2(p-1)) ell |Pi(sigma'Psi)|^2."""
    if not C.is_cone:
        raise ModelError("the cone form of the driver needs a convex cone")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    psi = np.asarray(lam, dtype=float) + np.asarray(phi, dtype=float) / ell
    projected = sigma_image(sigma, C).project(sigma.T @ psi)[0]
    return p / (2.0 * (p - 1.0)) * ell * float(projected @ projected)


def hu_driver(
    Y: float,
    Z: Sequence[float],
    theta: Sequence[float],
    sigma: np.ndarray,
    C: ConstraintSet,
    spec: PowerUtilitySpec,
    D_t: float,
    Z_perp: Optional[Sequence[float]] = None,
) -> float:
    """
    Quadratic driver of the log-opportunity BSDE in an Ito model with bounded mean-variance tradeoff:

        f(Y, Z, Z') = 1/2 p(1-p) d^2(beta(theta + Z)) + q/2 |theta + Z|^2
                      + delta (p-1) D^beta exp((q-1) Y) - 1/2 (|Z|^2 + |Z'|^2)

    with delta = 1 under intermediate consumption. Z and Z' live in R^m, the distance is to sigma'C.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    Z = np.asarray(Z, dtype=float)
    Z_perp = np.zeros_like(Z) if Z_perp is None else np.asarray(Z_perp, dtype=float)
    w = np.asarray(theta, dtype=float) + Z
    p, q, beta = spec.p, spec.q, spec.beta
    value = 0.5 * p * (1.0 - p) * sigma_image(sigma, C).distance_sq(beta * w) + 0.5 * q * float(w @ w)
    if spec.intermediate:
        value += (p - 1.0) * D_t ** beta * np.exp((q - 1.0) * Y)
    return value - 0.5 * (float(Z @ Z) + float(Z_perp @ Z_perp))


def hu_growth_bound(spec: PowerUtilitySpec, D_max: float) -> float:
    """Constant K with |f(Y, Z, Z')| <= K (|theta|^2 + exp((q-1)Y) + |Z|^2 + |Z'|^2)."""
    p, q, beta = spec.p, spec.q, spec.beta
    quadratic = abs(p * (1.0 - p)) * beta ** 2 + abs(q) + 0.5
    consumption = abs(p - 1.0) * D_max ** beta if spec.intermediate else 0.0
    return max(quadratic, consumption)
