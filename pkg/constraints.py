import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space as _null_space
from scipy.optimize import brentq, linprog, lsq_linear, minimize, nnls

from errors import ModelError, NotRepresentableError, NumericalFailureError
from model import JointCharacteristics

logger = logging.getLogger(__name__)

Kind = Literal["full", "box", "ball", "polyhedron", "cone", "finite", "star", "image"]

MEMBER_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintSet:
    """
    Closed constraint set containing the origin.

    Variants:
        full        R^d
        box         lo <= y <= hi (bounds may be infinite)
        ball        |y| <= radius
        polyhedron  A y <= bounds
        cone        A y <= 0 (polyhedral convex cone)
        finite      a finite set of points
        star        union of the segments [0, z] over the rows z of points
        image       {M y : y in base}, the linear image of another set
    """

    kind: Kind
    d: int
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    radius: float = 0.0
    A: Optional[np.ndarray] = None
    bounds: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    M: Optional[np.ndarray] = None
    base: Optional["ConstraintSet"] = None

    # -- construction -----------------------------------------------------

    @classmethod
    def full(cls, d: int) -> "ConstraintSet":
        return cls(kind="full", d=d)

    @classmethod
    def box(cls, lo: Sequence[float], hi: Sequence[float]) -> "ConstraintSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > 0) or np.any(hi < 0):
            raise ModelError("a box constraint must satisfy lo <= 0 <= hi")
        return cls(kind="box", d=lo.size, lo=lo, hi=hi)

    @classmethod
    def ball(cls, d: int, radius: float) -> "ConstraintSet":
        if radius < 0:
            raise ModelError("ball radius must be nonnegative")
        return cls(kind="ball", d=d, radius=float(radius))

    @classmethod
    def polyhedron(cls, A: Sequence[Sequence[float]], bounds: Sequence[float]) -> "ConstraintSet":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        bounds = np.atleast_1d(np.asarray(bounds, dtype=float))
        if bounds.shape != (A.shape[0],):
            raise ModelError("one bound per polyhedron row is required")
        if np.any(bounds < 0):
            raise ModelError("polyhedron must contain the origin (bounds >= 0)")
        return cls(kind="polyhedron", d=A.shape[1], A=A, bounds=bounds)

    @classmethod
    def cone(cls, A: Sequence[Sequence[float]]) -> "ConstraintSet":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(kind="cone", d=A.shape[1], A=A, bounds=np.zeros(A.shape[0]))

    @classmethod
    def finite(cls, points: Sequence[Sequence[float]]) -> "ConstraintSet":
        pts = np.asarray(points, dtype=float)
        pts = pts.reshape(-1, 1) if pts.ndim == 1 else pts
        if not np.any(np.all(np.abs(pts) == 0, axis=1)):
            logger.debug("📐 Adding the origin to a finite constraint set")
            pts = np.vstack([np.zeros(pts.shape[1]), pts])
        return cls(kind="finite", d=pts.shape[1], points=_unique_rows(pts))

    @classmethod
    def star(cls, points: Sequence[Sequence[float]]) -> "ConstraintSet":
        pts = np.asarray(points, dtype=float)
        pts = pts.reshape(-1, 1) if pts.ndim == 1 else pts
        return cls(kind="star", d=pts.shape[1], points=_unique_rows(pts))

    # -- geometry ---------------------------------------------------------

    @property
    def is_convex(self) -> bool:
        if self.kind == "finite":
            return self.points.shape[0] == 1
        if self.kind == "star":
            nonzero = [z / np.linalg.norm(z) for z in self.points if np.linalg.norm(z) > 0]
            return all(np.allclose(u, nonzero[0]) for u in nonzero)
        if self.kind == "image":
            return self.base.is_convex
        return True

    @property
    def is_cone(self) -> bool:
        if self.kind in ("full", "cone"):
            return True
        if self.kind == "box":
            return bool(np.all((self.lo == 0) | np.isinf(self.lo)) and np.all((self.hi == 0) | np.isinf(self.hi)))
        if self.kind == "finite":
            return self.points.shape[0] == 1
        if self.kind == "ball":
            return self.radius == 0
        if self.kind == "image":
            return self.base.is_cone
        return False

    @property
    def is_polyhedral(self) -> bool:
        return self.kind in ("full", "box", "polyhedron", "cone")

    def contains(self, y: Sequence[float], tol: float = MEMBER_TOL) -> bool:
        y = np.asarray(y, dtype=float).reshape(self.d)
        if self.kind == "full":
            return True
        if self.kind == "box":
            return bool(np.all(y >= self.lo - tol) and np.all(y <= self.hi + tol))
        if self.kind == "ball":
            return bool(np.linalg.norm(y) <= self.radius + tol)
        if self.kind in ("polyhedron", "cone"):
            return bool(np.all(self.A @ y <= self.bounds + tol))
        return self.distance_sq(y) <= tol * tol

    def project(self, x: Sequence[float]) -> List[np.ndarray]:
        """Points of the set at minimal Euclidean distance from x (several only for non-convex sets)."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        if self.kind == "full":
            return [x.copy()]
        if self.kind == "box":
            return [np.clip(x, self.lo, self.hi)]
        if self.kind == "ball":
            n = np.linalg.norm(x)
            return [x.copy() if n <= self.radius else x * (self.radius / n)]
        if self.kind == "cone":
            lam, _ = nnls(self.A.T, x)
            return [x - self.A.T @ lam]
        if self.kind == "polyhedron":
            return [_project_polyhedron(self.A, self.bounds, x)]
        if self.kind == "finite":
            return _nearest(self.points, x)
        if self.kind == "star":
            candidates = []
            for z in self.points:
                zz = float(z @ z)
                t = 0.0 if zz == 0 else min(1.0, max(0.0, float(x @ z) / zz))
                candidates.append(t * z)
            return _nearest(np.array(candidates), x)
        _, image = self.image_argmin(x)
        return [image]

    def distance_sq(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=float).reshape(self.d)
        z = self.project(x)[0]
        return float((x - z) @ (x - z))

    def image_argmin(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """For an image set {M y : y in base}: a minimizer y of |M y - x| over the base and M y."""
        if self.kind != "image":
            raise NotRepresentableError("image_argmin needs an image set")
        M, base = self.M, self.base
        x = np.asarray(x, dtype=float).reshape(M.shape[0])
        if base.kind == "full":
            y, *_ = np.linalg.lstsq(M, x, rcond=None)
        elif base.kind == "box":
            y = lsq_linear(M, x, bounds=(base.lo, base.hi), method="bvls", tol=1e-14).x
        elif base.kind == "ball":
            y = _ball_least_squares(M, x, base.radius)
        elif base.kind in ("polyhedron", "cone"):
            y = _polyhedral_least_squares(M, x, base.A, base.bounds)
        else:
            raise NotRepresentableError(f"linear image of a {base.kind} set is not supported")
        return y, M @ y

    # -- transformations --------------------------------------------------

    def dilate(self, factor: float) -> "ConstraintSet":
        """factor * C for factor > 0."""
        if factor <= 0:
            raise ValueError("dilation factor must be positive")
        if factor == 1.0 or self.kind in ("full", "cone"):
            return self
        if self.kind == "box":
            return ConstraintSet(kind="box", d=self.d, lo=self.lo * factor, hi=self.hi * factor)
        if self.kind == "ball":
            return ConstraintSet(kind="ball", d=self.d, radius=self.radius * factor)
        if self.kind == "polyhedron":
            return ConstraintSet(kind="polyhedron", d=self.d, A=self.A, bounds=self.bounds * factor)
        if self.kind in ("finite", "star"):
            return ConstraintSet(kind=self.kind, d=self.d, points=self.points * factor)
        return ConstraintSet(kind="image", d=self.d, M=self.M, base=self.base.dilate(factor))

    def linear_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rows (A, b) with C = {A y <= b} for polyhedral variants."""
        if self.kind == "full":
            return np.zeros((0, self.d)), np.zeros(0)
        if self.kind in ("polyhedron", "cone"):
            return self.A, self.bounds
        if self.kind == "box":
            eye = np.eye(self.d)
            A = np.vstack([eye, -eye])
            b = np.concatenate([self.hi, -self.lo])
            keep = np.isfinite(b)
            return A[keep], b[keep]
        raise NotRepresentableError(f"{self.kind} constraint is not polyhedral")

    def preimage(self, Phi: np.ndarray) -> "ConstraintSet":
        """{y : Phi y in C}."""
        Phi = np.asarray(Phi, dtype=float)
        if self.kind == "full":
            return ConstraintSet.full(Phi.shape[1])
        if self.is_polyhedral:
            A, b = self.linear_rows()
            if self.kind == "cone" or np.all(b == 0):
                return ConstraintSet.cone(A @ Phi) if A.size else ConstraintSet.full(Phi.shape[1])
            return ConstraintSet.polyhedron(A @ Phi, b)
        if self.kind in ("finite", "star"):
            if abs(np.linalg.det(Phi)) > 1e-12:
                mapped = np.linalg.solve(Phi, self.points.T).T
                return ConstraintSet.finite(mapped) if self.kind == "finite" else ConstraintSet.star(mapped)
            if self.kind == "finite" and self.points.shape[0] == 1:
                rows = _row_space(Phi)
                return ConstraintSet.cone(np.vstack([rows, -rows])) if rows.size else ConstraintSet.full(Phi.shape[1])
        raise NotRepresentableError(f"preimage of a {self.kind} constraint under this matrix is not representable")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "full":
            return {"type": "full"}
        if self.kind == "box":
            return {"type": "box", "lo": _jsonable(self.lo), "hi": _jsonable(self.hi)}
        if self.kind == "ball":
            return {"type": "ball", "radius": self.radius}
        if self.kind == "polyhedron":
            return {"type": "polyhedron", "A": self.A.tolist(), "bounds": self.bounds.tolist()}
        if self.kind == "cone":
            return {"type": "cone", "A": self.A.tolist()}
        if self.kind in ("finite", "star"):
            return {"type": self.kind, "points": self.points.tolist()}
        raise NotRepresentableError("image sets are not serialized")


def constraint_from_dict(data: Dict[str, Any], d: int) -> ConstraintSet:
    """
    Build a ConstraintSet from its JSON fragment, e.g. {"type": "box", "lo": 0, "hi": 1}.

    Raises:
        ModelError: unknown type, missing or malformed parameters
    """
    kind = data.get("type", "full")
    try:
        if kind == "full":
            return ConstraintSet.full(d)
        if kind == "box":
            lo = _bound_array(data.get("lo"), d, -np.inf)
            hi = _bound_array(data.get("hi"), d, np.inf)
            return ConstraintSet.box(lo, hi)
        if kind == "ball":
            return ConstraintSet.ball(d, float(data["radius"]))
        if kind == "polyhedron":
            return _check_dim(ConstraintSet.polyhedron(data["A"], data["bounds"]), d)
        if kind == "cone":
            return _check_dim(ConstraintSet.cone(data["A"]), d)
        if kind in ("finite", "star"):
            pts = np.asarray(data["points"], dtype=float).reshape(-1, d)
            return ConstraintSet.finite(pts) if kind == "finite" else ConstraintSet.star(pts)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ModelError):
            raise
        raise ModelError(f"malformed {kind} constraint: {e}") from e
    raise ModelError(f"unknown constraint type {kind!r}")


@dataclass(frozen=True)
class NaturalConstraints:
    """C0 = {y : 1 + y'x >= 0 for every atom x}; the strict version is C0*."""

    atoms: np.ndarray

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    def margin(self, y: Sequence[float]) -> float:
        """min over atoms of 1 + y'x (inf without atoms)."""
        if self.atoms.shape[0] == 0:
            return float("inf")
        return float(np.min(1.0 + self.atoms @ np.asarray(y, dtype=float)))

    def contains(self, y: Sequence[float], strict: bool = False, tol: float = 1e-12) -> bool:
        m = self.margin(y)
        return m > 0 if strict else m >= -tol

    def as_polyhedron(self) -> ConstraintSet:
        if self.atoms.shape[0] == 0:
            return ConstraintSet.full(self.d)
        return ConstraintSet.polyhedron(-self.atoms, np.ones(self.atoms.shape[0]))


def natural_constraints(atoms: np.ndarray, weights: Optional[np.ndarray] = None) -> NaturalConstraints:
    """Natural constraints from jump atoms; zero-weight atoms are dropped first."""
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    if weights is not None:
        atoms = atoms[np.asarray(weights, dtype=float) > 0]
    return NaturalConstraints(atoms=atoms)


def membership(K, y: Sequence[float], strict: bool = False) -> bool:
    """y in K; on natural constraints the strict flag selects C0* instead of C0."""
    if isinstance(K, NaturalConstraints):
        return K.contains(y, strict=strict)
    return K.contains(y)


def project(K: ConstraintSet, x: Sequence[float]) -> List[np.ndarray]:
    return K.project(x)


def distance_sq(K: ConstraintSet, x: Sequence[float]) -> float:
    return K.distance_sq(x)


def null_space(chars: JointCharacteristics) -> np.ndarray:
    """Orthonormal basis (columns) of {y : y'b = 0, c y = 0, y'x = 0 for every atom}."""
    ax, _, _ = chars.active_atoms()
    rows = np.vstack([chars.bR[None, :], chars.cR, ax])
    return _null_space(rows)


def sigma_factor(cR: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix, eigenvalues below 1e-12 clipped to zero."""
    evals, evecs = np.linalg.eigh(np.asarray(cR, dtype=float))
    evals = np.where(evals < 1e-12, 0.0, evals)
    return (evecs * np.sqrt(evals)) @ evecs.T


def sigma_image(sigma: np.ndarray, K: ConstraintSet, cR: Optional[np.ndarray] = None) -> ConstraintSet:
    """
    The set sigma' K in R^m for a d x m factor sigma.

    Boxes under a square diagonal sigma stay boxes, polyhedra and cones under an invertible sigma
    keep their kind, finite and star sets map point-wise,
    everything else becomes an image set whose projection is a constrained least-squares problem.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape[0] != K.d:
        raise ModelError("sigma must have one row per asset")
    if cR is not None and not np.allclose(sigma @ sigma.T, cR, atol=1e-10):
        raise ModelError("sigma sigma' does not reproduce cR")
    m = sigma.shape[1]
    M = sigma.T
    if K.kind == "image":
        raise NotRepresentableError("images of image sets are not supported")
    if K.kind == "full" and np.linalg.matrix_rank(M) == m:
        return ConstraintSet.full(m)
    if K.kind == "box" and m == K.d and np.allclose(sigma, np.diag(np.diag(sigma))):
        s = np.diag(sigma)
        a, b = K.lo * s, K.hi * s
        with np.errstate(invalid="ignore"):
            lo = np.where(s == 0, 0.0, np.minimum(a, b))
            hi = np.where(s == 0, 0.0, np.maximum(a, b))
        return ConstraintSet.box(lo, hi)
    if K.kind in ("cone", "polyhedron") and m == K.d and np.linalg.matrix_rank(M) == m:
        A = K.A @ np.linalg.inv(M)
        return ConstraintSet.cone(A) if K.kind == "cone" else ConstraintSet.polyhedron(A, K.bounds)
    if K.kind in ("finite", "star"):
        mapped = K.points @ sigma
        return ConstraintSet.finite(mapped) if K.kind == "finite" else ConstraintSet.star(mapped)
    return ConstraintSet(kind="image", d=m, M=M, base=K)


def preimage_point(sigma: np.ndarray, K: ConstraintSet, v: np.ndarray) -> np.ndarray:
    """Some y in K with sigma' y as close as possible to v."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    v = np.asarray(v, dtype=float)
    if K.kind == "finite":
        dists = np.linalg.norm(K.points @ sigma - v, axis=1)
        return K.points[int(np.argmin(dists))].copy()
    if K.kind == "star":
        best, best_dist = np.zeros(K.d), float(v @ v)
        for z in K.points:
            mz = z @ sigma
            mm = float(mz @ mz)
            t = 0.0 if mm == 0 else min(1.0, max(0.0, float(v @ mz) / mm))
            dist = float((t * mz - v) @ (t * mz - v))
            if dist < best_dist:
                best, best_dist = t * z, dist
        return best
    if K.kind == "full" and np.linalg.matrix_rank(sigma) == K.d:
        return np.linalg.lstsq(sigma.T, v, rcond=None)[0]
    y, _ = ConstraintSet(kind="image", d=sigma.shape[1], M=sigma.T, base=K).image_argmin(v)
    return y


def feasible_box(C: ConstraintSet, natural: NaturalConstraints) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise bounds of C intersected with C0 (infinite where unbounded)."""
    d = C.d
    if C.kind in ("finite", "star"):
        pts = C.points
        if C.kind == "star":
            pts = np.vstack([pts, np.zeros(d)])
        return pts.min(axis=0), pts.max(axis=0)
    if C.kind == "ball":
        lo, hi = np.full(d, -C.radius), np.full(d, C.radius)
    else:
        lo, hi = np.full(d, -np.inf), np.full(d, np.inf)
    if C.is_polyhedral or natural.atoms.shape[0]:
        A_c, b_c = C.linear_rows() if C.is_polyhedral else (np.zeros((0, d)), np.zeros(0))
        A_n, b_n = natural.as_polyhedron().linear_rows()
        A = np.vstack([A_c, A_n])
        b = np.concatenate([b_c, b_n])
        box_bounds = list(zip(np.where(np.isinf(lo), None, lo), np.where(np.isinf(hi), None, hi)))
        for j in range(d):
            for sign, target in ((1.0, lo), (-1.0, hi)):
                cost = np.zeros(d)
                cost[j] = sign
                res = linprog(cost, A_ub=A if A.size else None, b_ub=b if A.size else None,
                              bounds=box_bounds, method="highs")
                if res.status == 0:
                    val = sign * res.fun
                    target[j] = max(target[j], val) if sign > 0 else min(target[j], val)
    return lo, hi


# ---------------------------------------------------------------------------
# Representative portfolios and the transformed model
# ---------------------------------------------------------------------------

def representative_portfolio(j: int, C: ConstraintSet, atoms: np.ndarray) -> Optional[np.ndarray]:
    """
    A portfolio in C and C0* with |phi| <= 1 investing in asset j whenever that is feasible.

    Convex variants: maximize |y_j| over C, C0 and the l1 ball by LP, then halve.
    Finite sets: the feasible point of norm <= 1 with the largest |y_j|.
    Star sets: the longest feasible piece of each segment, halved.

    Returns:
        phi, or None when no feasible portfolio has a nonzero j-th component
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float)).reshape(-1, C.d)
    natural = NaturalConstraints(atoms=atoms)
    if C.kind == "finite":
        best, best_val = None, 0.0
        for z in C.points:
            if natural.contains(z, strict=True) and np.linalg.norm(z) <= 1.0 and abs(z[j]) > best_val:
                best, best_val = z.copy(), abs(z[j])
        return best
    if C.kind == "star":
        best, best_val = None, 0.0
        for z in C.points:
            if z[j] == 0:
                continue
            moves = atoms @ z
            t = min([1.0, 1.0 / np.linalg.norm(z)] + [-1.0 / m for m in moves if m < 0])
            phi = 0.5 * t * z
            if abs(phi[j]) > best_val:
                best, best_val = phi, abs(phi[j])
        return best
    if C.kind == "image":
        raise NotRepresentableError("representative portfolios need the constraint in asset coordinates")

    d = C.d
    if C.kind == "ball":
        A_c, b_c, radius = np.zeros((0, d)), np.zeros(0), min(1.0, C.radius)
    else:
        (A_c, b_c), radius = C.linear_rows(), 1.0
    if radius <= 0:
        return None
    A_n, b_n = natural.as_polyhedron().linear_rows()
    eye = np.eye(d)
    # variables (y, s): y in C and C0, |y_i| <= s_i, sum s <= radius
    A_ub = np.vstack([
        np.hstack([A_c, np.zeros((A_c.shape[0], d))]),
        np.hstack([A_n, np.zeros((A_n.shape[0], d))]),
        np.hstack([eye, -eye]),
        np.hstack([-eye, -eye]),
        np.hstack([np.zeros((1, d)), np.ones((1, d))]),
    ])
    b_ub = np.concatenate([b_c, b_n, np.zeros(2 * d), [radius]])
    bounds = [(None, None)] * d + [(0, None)] * d
    best, best_val = None, 1e-12
    for sign in (-1.0, 1.0):
        cost = np.zeros(2 * d)
        cost[j] = sign
        res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
        if res.status != 0:
            raise NumericalFailureError(f"representative portfolio LP failed: {res.message}")
        y = res.x[:d]
        if abs(y[j]) > best_val:
            best, best_val = y, abs(y[j])
    return None if best is None else 0.5 * best


@dataclass(frozen=True)
class TransformedModel:
    chars: JointCharacteristics
    constraint: ConstraintSet
    Phi: np.ndarray
    representatives: Tuple[Optional[np.ndarray], ...]


def transform_model(chars: JointCharacteristics, C: ConstraintSet) -> TransformedModel:
    """
    Replace the assets one by one by representative portfolios.

    The new returns are Phi' dR, the new constraints {y : Phi y in C}; every portfolio
    of the original model in C and C0* is Phi y for some admissible y, so both models
    generate the same wealth processes.
    """
    d = chars.d
    ax, axp, aw = chars.active_atoms()
    Phi = np.eye(d)
    current_C, current_atoms = C, ax
    reps: List[Optional[np.ndarray]] = []
    for j in range(d):
        phi = representative_portfolio(j, current_C, current_atoms)
        reps.append(phi)
        step = np.eye(d)
        step[:, j] = 0.0 if phi is None else phi
        if phi is None:
            logger.info(f"⚠️ No feasible exposure to asset {j}; its column is set to zero")
        Phi = Phi @ step
        current_C = C.preimage(Phi)
        current_atoms = ax @ Phi

    new_x = ax @ Phi
    keep = (np.abs(new_x).max(axis=1) > 0) | (axp != 0) if new_x.size else np.zeros(0, dtype=bool)
    new_chars = JointCharacteristics(
        bR=Phi.T @ chars.bR,
        cR=Phi.T @ chars.cR @ Phi,
        cRL=Phi.T @ chars.cRL,
        aL=chars.aL,
        atoms_x=new_x[keep],
        atoms_xp=axp[keep],
        atoms_w=aw[keep],
        dA=chars.dA,
    )
    logger.info(f"📐 Transformed model with Phi diagonal {np.round(np.diag(Phi), 6).tolist()}")
    return TransformedModel(chars=new_chars, constraint=current_C, Phi=Phi, representatives=tuple(reps))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _unique_rows(pts: np.ndarray) -> np.ndarray:
    out: List[np.ndarray] = []
    for z in pts:
        if not any(np.allclose(z, u, atol=1e-15) for u in out):
            out.append(z)
    return np.array(out)


def _nearest(candidates: np.ndarray, x: np.ndarray) -> List[np.ndarray]:
    dists = np.sum((candidates - x) ** 2, axis=1)
    best = dists.min()
    chosen = candidates[dists <= best + TIE_TOL * max(1.0, best)]
    return [z.copy() for z in _unique_rows(chosen)]


def _bound_array(value: Any, d: int, missing: float) -> np.ndarray:
    """Box bounds from JSON: a scalar or a list, with null meaning unbounded."""
    if value is None:
        return np.full(d, missing)
    values = value if isinstance(value, list) else [value] * d
    if len(values) != d:
        raise ModelError(f"box bounds need {d} entries")
    return np.array([missing if v is None else float(v) for v in values])


def _jsonable(arr: np.ndarray) -> List[Optional[float]]:
    return [None if np.isinf(v) else float(v) for v in arr]


def _check_dim(C: ConstraintSet, d: int) -> ConstraintSet:
    if C.d != d:
        raise ModelError(f"constraint has dimension {C.d}, model has {d}")
    return C


def _row_space(Phi: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(Phi)
    rank = int(np.sum(s > 1e-12 * max(1.0, s.max() if s.size else 0.0)))
    return vt[:rank]


def _project_polyhedron(A: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if np.all(A @ x <= b + 1e-14):
        return x.copy()
    res = minimize(
        lambda y: 0.5 * float((y - x) @ (y - x)),
        x0=np.zeros_like(x),
        jac=lambda y: y - x,
        constraints=[{"type": "ineq", "fun": lambda y: b - A @ y, "jac": lambda y: -A}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    if not res.success and not np.all(A @ res.x <= b + 1e-8):
        raise NumericalFailureError(f"polyhedral projection failed: {res.message}")
    return res.x


def _polyhedral_least_squares(M: np.ndarray, x: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    res = minimize(
        lambda y: 0.5 * float((M @ y - x) @ (M @ y - x)),
        x0=np.zeros(M.shape[1]),
        jac=lambda y: M.T @ (M @ y - x),
        constraints=[{"type": "ineq", "fun": lambda y: b - A @ y, "jac": lambda y: -A}],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    if not res.success and not np.all(A @ res.x <= b + 1e-8):
        raise NumericalFailureError(f"constrained least squares failed: {res.message}")
    return res.x


def _ball_least_squares(M: np.ndarray, x: np.ndarray, radius: float) -> np.ndarray:
    y, *_ = np.linalg.lstsq(M, x, rcond=None)
    if np.linalg.norm(y) <= radius:
        return y
    if radius == 0:
        return np.zeros(M.shape[1])
    MtM, Mtx = M.T @ M, M.T @ x
    eye = np.eye(M.shape[1])

    def excess(nu: float) -> float:
        return float(np.linalg.norm(np.linalg.solve(MtM + nu * eye, Mtx))) - radius

    # |y(nu)| decreases from the min-norm solution (outside the ball) to 0
    hi = np.linalg.norm(Mtx) / radius + 1.0
    lo = 1e-14 * max(1.0, float(np.trace(MtM)))
    if excess(lo) <= 0:
        return np.linalg.solve(MtM + lo * eye, Mtx)
    nu = brentq(excess, lo, hi, xtol=1e-15)
    return np.linalg.solve(MtM + nu * eye, Mtx)
