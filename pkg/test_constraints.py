import numpy as np
import pytest

from constraints import (
    ConstraintSet,
    constraint_from_dict,
    feasible_box,
    natural_constraints,
    null_space,
    representative_portfolio,
    sigma_image,
    transform_model,
)
from errors import ModelError, NotRepresentableError
from model import JointCharacteristics

NONNEG_CONE = ConstraintSet.cone([[-1.0, 0.0], [0.0, -1.0]])


def test_ball_projection():
    C = ConstraintSet.ball(2, 1.0)
    assert C.project([2.0, 0.0])[0].tolist() == pytest.approx([1.0, 0.0])
    assert C.contains([0.6, 0.8])


def test_cone_projection_and_distance():
    z = NONNEG_CONE.project([1.0, -2.0])[0]
    assert z.tolist() == pytest.approx([1.0, 0.0], abs=1e-12)
    assert NONNEG_CONE.distance_sq([1.0, -2.0]) == pytest.approx(4.0)
    assert NONNEG_CONE.is_cone and NONNEG_CONE.is_convex


def test_box_distance():
    assert ConstraintSet.box([-1.0], [1.0]).distance_sq([3.0]) == pytest.approx(4.0)


def test_polyhedron_projection():
    C = ConstraintSet.polyhedron([[1.0, 1.0]], [1.0])
    assert C.project([1.0, 1.0])[0].tolist() == pytest.approx([0.5, 0.5], abs=1e-7)


def test_finite_set_ties_and_origin():
    C = ConstraintSet.finite([[1.0], [-1.0]])
    assert C.points.shape[0] == 3
    ties = C.project([0.5])
    assert sorted(float(z[0]) for z in ties) == pytest.approx([0.0, 1.0])
    assert not C.is_convex


def test_star_projection():
    C = ConstraintSet.star([[2.0, 0.0], [0.0, 1.0]])
    assert C.project([1.0, 0.5])[0].tolist() == pytest.approx([1.0, 0.0])
    assert C.contains([0.0, 0.5]) and not C.contains([0.5, 0.5])


def test_constraint_from_dict():
    box = constraint_from_dict({"type": "box", "lo": [0.0], "hi": [None]}, 1)
    assert box.is_cone
    assert box.contains([100.0]) and not box.contains([-0.1])
    with pytest.raises(ModelError):
        constraint_from_dict({"type": "ellipse"}, 1)
    with pytest.raises(ModelError):
        constraint_from_dict({"type": "ball"}, 1)
    with pytest.raises(ModelError):
        constraint_from_dict({"type": "box", "lo": 0.5, "hi": 1.0}, 1)


def test_natural_constraints_interval():
    natural = natural_constraints(np.array([[-0.5], [1.0]]))
    lo, hi = feasible_box(ConstraintSet.full(1), natural)
    assert (lo[0], hi[0]) == pytest.approx((-1.0, 2.0))
    assert natural.contains([2.0]) and not natural.contains([2.0], strict=True)


def test_null_space_of_duplicated_asset():
    chars = JointCharacteristics(bR=[0.1, 0.1], cR=[[0.04, 0.04], [0.04, 0.04]])
    basis = null_space(chars)
    assert basis.shape == (2, 1)
    assert np.abs(basis[:, 0]).tolist() == pytest.approx([2 ** -0.5, 2 ** -0.5])
    assert basis[0, 0] == pytest.approx(-basis[1, 0])


def test_null_space_with_atom():
    chars = JointCharacteristics(bR=[0.0, 0.0], cR=np.zeros((2, 2)), atoms_x=[[1.0, 0.0]])
    basis = null_space(chars)
    assert np.abs(basis[:, 0]).tolist() == pytest.approx([0.0, 1.0])


def test_sigma_image_variants():
    assert sigma_image(np.diag([2.0]), ConstraintSet.box([0.0], [1.0])).hi.tolist() == [2.0]
    image = sigma_image(np.array([[1.0, 1.0]]), ConstraintSet.box([0.0], [np.inf]))
    assert image.kind == "image"
    assert image.distance_sq([1.0, -1.0]) == pytest.approx(2.0)
    with pytest.raises(NotRepresentableError):
        sigma_image(np.eye(2), image)


def test_representative_portfolio_and_transform():
    C = ConstraintSet.box([0.0], [1.0])
    phi = representative_portfolio(0, C, np.array([[-1.0]]))
    assert phi.tolist() == pytest.approx([0.5])
    chars = JointCharacteristics(bR=[0.1], cR=[[0.04]], atoms_x=[[-1.0]], atoms_w=[0.2])
    out = transform_model(chars, C)
    np.testing.assert_allclose(out.Phi, [[0.5]])
    assert out.chars.atoms_x[:, 0].tolist() == pytest.approx([-0.5])
    assert out.chars.cR[0, 0] == pytest.approx(0.01)
    assert out.constraint.contains([2.0]) and not out.constraint.contains([2.1])


def test_transform_of_no_trade_constraint():
    C = ConstraintSet.finite([[0.0, 0.0]])
    chars = JointCharacteristics(bR=[0.1, 0.0], cR=np.eye(2))
    out = transform_model(chars, C)
    assert not np.any(out.Phi)
    assert out.representatives[0] is None


def test_transformed_unit_vectors_are_admissible():
    C = ConstraintSet.full(2)
    atoms = np.array([[-0.5, 0.2], [0.3, -0.8]])
    chars = JointCharacteristics(bR=[0.1, 0.05], cR=np.eye(2) * 0.04, atoms_x=atoms, atoms_w=[0.1, 0.1])
    out = transform_model(chars, C)
    new_atoms = out.chars.atoms_x
    for j in range(2):
        e = np.eye(2)[j]
        assert out.constraint.contains(e)
        assert np.min(1.0 + new_atoms @ e) > 0
