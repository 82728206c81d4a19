import numpy as np
import pytest
from scipy.optimize import brentq

from constraints import ConstraintSet, null_space
from errors import OutsideDomainError
from gfun import (
    GContext,
    audit_grid,
    cone_driver_F,
    continuous_driver_F,
    directional_G,
    eval_f,
    eval_g,
    grad_g,
    hu_driver,
    hu_growth_bound,
    kappa_star,
    market_price_of_risk,
    maximize_g,
    multistart_maximize,
)
from model import JointCharacteristics, PowerUtilitySpec

MERTON = JointCharacteristics(bR=[0.1], cR=[[0.04]])
HALF = PowerUtilitySpec(p=0.5)
POSITIVE = ConstraintSet.box([0.0], [np.inf])


def merton_ctx(C=None, ell=1.0):
    return GContext(ell=ell, chars=MERTON, p=0.5, constraint=C or ConstraintSet.full(1))


def test_consumption_objective():
    ctx = merton_ctx()
    assert eval_f(ctx, HALF, 0.0, 1.0) == pytest.approx(1.0)
    assert kappa_star(HALF, 0.0, 0.5) == pytest.approx(4.0)
    assert kappa_star(PowerUtilitySpec(p=-1.0), 0.0, 0.25) == pytest.approx(2.0)
    ks = np.linspace(0.01, 20.0, 40001)
    best = ks[np.argmax([eval_f(merton_ctx(ell=0.5), HALF, 0.0, k) for k in ks])]
    assert best == pytest.approx(4.0, abs=1e-3)


def test_merton_g_and_closed_form():
    ctx = merton_ctx()
    assert eval_g(ctx, [1.0]) == pytest.approx(0.09)
    y, g_star = maximize_g(ctx)
    assert y[0] == pytest.approx(5.0)
    assert g_star == pytest.approx(0.25)
    assert directional_G(ctx, [1.0], [0.0]) == pytest.approx(0.1)
    assert directional_G(ctx, [1.0], y) == pytest.approx(0.0, abs=1e-12)
    assert market_price_of_risk(ctx)[0] == pytest.approx(2.5)


def test_closed_form_under_constraints():
    y, g_star = maximize_g(merton_ctx(ConstraintSet.box([-1.0], [1.0])))
    assert y[0] == pytest.approx(1.0)
    assert g_star == pytest.approx(0.09)
    y, g_star = maximize_g(GContext(ell=1.0, chars=JointCharacteristics(bR=[-0.1], cR=[[0.04]]), p=0.5, constraint=POSITIVE))
    assert y[0] == pytest.approx(0.0, abs=1e-12)
    assert g_star == pytest.approx(0.0, abs=1e-12)


def test_projected_gradient_with_atoms():
    chars = JointCharacteristics(bR=[0.0], cR=[[0.0]], atoms_x=[[-0.5], [1.0]], atoms_w=[1.0, 1.0])
    ctx = GContext(ell=1.0, chars=chars, p=0.5, constraint=ConstraintSet.full(1))

    def slope(y):
        return -0.5 / np.sqrt(1.0 - 0.5 * y) + 1.0 / np.sqrt(1.0 + y) - 0.5

    expected = brentq(slope, -0.99, 1.99)
    y, g_star = maximize_g(ctx)
    assert y[0] == pytest.approx(expected, abs=1e-7)
    assert g_star == pytest.approx(eval_g(ctx, [expected]), abs=1e-12)
    assert grad_g(ctx, y)[0] == pytest.approx(0.0, abs=1e-7)


def test_negative_exponent_boundary():
    chars = JointCharacteristics(bR=[0.0], cR=[[0.0]], atoms_x=[[-0.5]], atoms_w=[1.0])
    ctx = GContext(ell=1.0, chars=chars, p=-1.0, constraint=ConstraintSet.full(1))
    assert eval_g(ctx, [2.0]) == float("-inf")
    with pytest.raises(OutsideDomainError):
        eval_g(ctx, [2.1])
    with pytest.raises(OutsideDomainError):
        directional_G(ctx, [0.0], [2.0])


def test_finite_and_star_maximization():
    chars = JointCharacteristics(bR=[0.0], cR=[[0.0]], atoms_x=[[-1.0], [8.0]], atoms_w=[1.0, 1.0])
    ctx = GContext(ell=1.0, chars=chars, p=0.5, constraint=ConstraintSet.finite([[1.0]]))
    y, _ = maximize_g(ctx)
    assert y.tolist() == [1.0]
    y, g_star = maximize_g(merton_ctx(ConstraintSet.star([[2.0], [-3.0]])))
    assert y[0] == pytest.approx(2.0)
    assert g_star == pytest.approx(eval_g(merton_ctx(), [2.0]))


def test_g_is_concave():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        d = int(rng.integers(1, 4))
        a = rng.normal(size=(d, d))
        atoms = rng.uniform(-0.9, 2.0, size=(3, d)) / d
        chars = JointCharacteristics(
            bR=rng.normal(size=d) * 0.1, cR=a @ a.T * 0.05, atoms_x=atoms,
            atoms_xp=rng.uniform(-0.5, 0.5, size=3), atoms_w=rng.uniform(0.0, 2.0, size=3),
        )
        p = float(rng.choice([-2.0, -0.5, 0.3, 0.7]))
        ctx = GContext(ell=1.0, chars=chars, p=p, constraint=ConstraintSet.full(d))
        y1, y2 = rng.uniform(-0.4, 0.4, size=d), rng.uniform(-0.4, 0.4, size=d)
        lam = float(rng.uniform(0.0, 1.0))
        mixed = eval_g(ctx, lam * y1 + (1.0 - lam) * y2)
        assert mixed >= lam * eval_g(ctx, y1) + (1.0 - lam) * eval_g(ctx, y2) - 1e-9


def test_maximizers_agree_modulo_null_space():
    chars = JointCharacteristics(bR=[0.1, 0.1], cR=[[0.04, 0.04], [0.04, 0.04]])
    ctx = GContext(ell=1.0, chars=chars, p=0.5, constraint=ConstraintSet.full(2))
    y, g_star = maximize_g(ctx)
    assert y.sum() == pytest.approx(5.0)
    assert g_star == pytest.approx(0.25)
    shifted = y + 3.0 * null_space(chars)[:, 0]
    assert eval_g(ctx, shifted) == pytest.approx(g_star)


def test_audit_grid_respects_constraints():
    ctx = merton_ctx(ConstraintSet.box([-1.0], [2.0]))
    points = audit_grid(ctx, [2.0], points=21)
    assert len(points) >= 21
    assert all(-1.0 - 1e-12 <= y[0] <= 2.0 + 1e-12 for y in points)
    assert max(directional_G(ctx, y, [2.0]) for y in points) <= 1e-12


@pytest.mark.parametrize("psi, expected", [(-0.3, 0.0), (0.3, -0.045)])
def test_continuous_drivers_on_positive_half_line(psi, expected):
    args = (1.0, [0.0], np.eye(1), [psi], POSITIVE, 0.5)
    assert continuous_driver_F(*args) == pytest.approx(expected, abs=1e-14)
    assert cone_driver_F(*args) == pytest.approx(expected, abs=1e-14)


def random_cone(rng, d):
    if rng.random() < 0.5:
        lo = np.where(rng.random(d) < 0.5, 0.0, -np.inf)
        return ConstraintSet.box(lo, np.full(d, np.inf)), np.diag(rng.uniform(0.1, 1.0, size=d))
    sigma = np.tril(rng.normal(size=(d, d)) * 0.3, -1) + np.diag(rng.uniform(0.2, 1.0, size=d))
    return ConstraintSet.cone(rng.normal(size=(int(rng.integers(1, 4)), d))), sigma


def test_cone_driver_matches_general_driver():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d = int(rng.integers(1, 4))
        C, sigma = random_cone(rng, d)
        p = float(rng.choice([-1.5, 0.3, 0.8]))
        ell = float(rng.uniform(0.5, 2.0))
        args = (ell, rng.normal(size=d) * 0.1, sigma, rng.normal(size=d), C, p)
        assert continuous_driver_F(*args) == pytest.approx(cone_driver_F(*args), abs=1e-10)


def test_hu_driver_split_reduction():
    rng = np.random.default_rng(5)
    sigma = np.array([[0.3, 0.0]])
    for _ in range(1000):
        spec = PowerUtilitySpec(p=0.5, consumption_mode=str(rng.choice(["terminal", "intermediate"])))
        theta = np.array([rng.normal(), 0.0])
        Z = np.array([rng.normal(), 0.0])
        Z_perp = np.array([0.0, rng.normal()])
        Y = float(rng.normal())
        split = hu_driver(Y, Z, theta, sigma, POSITIVE, spec, 1.0, Z_perp)
        merged = hu_driver(Y, Z + Z_perp, theta, sigma, POSITIVE, spec, 1.0)
        assert split == pytest.approx(merged, abs=1e-10)


def test_hu_growth_bound():
    rng = np.random.default_rng(9)
    spec = PowerUtilitySpec(p=0.5, consumption_mode="intermediate")
    K = hu_growth_bound(spec, 1.0)
    assert K == pytest.approx(2.5)
    C = ConstraintSet.full(2)
    for _ in range(100):
        theta, Z, Zp = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        Y = float(rng.normal())
        value = hu_driver(Y, Z, theta, np.eye(2), C, spec, 1.0, Zp)
        scale = theta @ theta + np.exp((spec.q - 1.0) * Y) + Z @ Z + Zp @ Zp
        assert abs(value) <= K * scale


def test_random_starts_agree_modulo_null_space():
    chars = JointCharacteristics(bR=[0.1, 0.1], cR=[[0.04, 0.04], [0.04, 0.04]], atoms_x=[[-0.5, -0.5]], atoms_w=[0.2])
    ctx = GContext(ell=1.0, chars=chars, p=0.5, constraint=ConstraintSet.full(2))
    result = multistart_maximize(ctx, np.random.default_rng(17))
    assert len(result.maximizers) == 5
    assert result.spread <= 1e-8
    assert max(result.values) - min(result.values) <= 1e-9
    ys = np.array(result.maximizers)
    assert np.ptp(ys[:, 0] - ys[:, 1]) > 1e-3
    assert np.ptp(ys.sum(axis=1)) <= 1e-8


def test_start_outside_natural_constraints_is_pulled_inside():
    chars = JointCharacteristics(bR=[0.0], cR=[[0.0]], atoms_x=[[-0.5], [1.0]], atoms_w=[1.0, 1.0])
    ctx = GContext(ell=1.0, chars=chars, p=-1.0, constraint=ConstraintSet.full(1))
    y, g_star = maximize_g(ctx, start=[10.0])
    y0, g0 = maximize_g(ctx)
    assert y[0] == pytest.approx(y0[0], abs=1e-8)
    assert g_star == pytest.approx(g0, abs=1e-12)


def test_directional_G_is_finite_up_to_the_atom_boundary():
    chars = JointCharacteristics(bR=[0.1], cR=[[0.04]], atoms_x=[[-0.5]], atoms_w=[0.2])
    ctx = GContext(ell=1.0, chars=chars, p=0.5, constraint=ConstraintSet.full(1))
    assert np.isfinite(directional_G(ctx, [2.0], [0.0]))
    assert directional_G(ctx, [2.0], [0.0]) == pytest.approx(2.0 * grad_g(ctx, [0.0])[0])
    with pytest.raises(OutsideDomainError):
        directional_G(ctx, [0.0], [2.0])
