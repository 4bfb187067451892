import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levirenorm.coefficients import (
    CoefficientField,
    FrozenData,
    adjoint_coefficients,
    builtin_field,
    check_ellipticity,
    coefficient_derivatives,
    constant_field,
    det_small,
    diag_sine_field,
    drift_field,
    evaluate_frozen,
    identity_field,
    inv_small,
    inverse_metric,
    register_field,
    rotated_anisotropic_field,
    symmetrise,
)
from levirenorm.errors import NonPositiveDefinite

FOUR_PI = 4 * np.pi


def test_identity_frozen():
    fr = evaluate_frozen(identity_field(2), (0.3, 0.7, 0.1))
    assert fr.detA == 1.0
    assert fr.C == pytest.approx(1 / FOUR_PI, rel=1e-15)
    assert fr.C == pytest.approx(0.0795775, abs=1e-7)


def test_diagonal_frozen():
    fr = evaluate_frozen(constant_field(np.diag([4.0, 1.0])), (0.0, 0.0, 0.0))
    assert fr.detA == 4.0
    assert fr.C == pytest.approx(0.5 / FOUR_PI, rel=1e-15)


def test_diag_sine_frozen_against_brute_force_det():
    fr = evaluate_frozen(diag_sine_field(2), (0.25, 0.6, 0.0))
    A = fr.A
    brute = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    assert brute == pytest.approx(1.5, abs=1e-15)
    assert fr.detA == pytest.approx(brute, abs=1e-15)
    assert fr.C == pytest.approx(1.5**-0.5 / FOUR_PI, rel=1e-14)


def test_frozen_inverse_identity():
    fr = evaluate_frozen(rotated_anisotropic_field(2), (0.2, 0.9, 0.0))
    assert np.abs(fr.A @ fr.A_inv - np.eye(2)).max() < 1e-10
    assert fr.detA > 0 and fr.C > 0


def test_frozen_without_time_coordinate():
    f = diag_sine_field(2)
    assert evaluate_frozen(f, (0.25, 0.5)).detA == evaluate_frozen(f, (0.25, 0.5, 0.0)).detA


def test_frozen_rejects_indefinite():
    with pytest.raises(NonPositiveDefinite):
        FrozenData.from_matrix([[1.0, 2.0], [2.0, 1.0]])


@pytest.mark.parametrize("A, zeta, expected", [
    (np.eye(2), (3.0, 4.0), 25.0),
    (np.diag([4.0, 1.0]), (2.0, 0.0), 1.0),
    # (1,1) A^{-1} (1,1) with A^{-1} = [[2,-1],[-1,2]]/3
    (np.array([[2.0, 1.0], [1.0, 2.0]]), (1.0, 1.0), 2.0 / 3.0),
])
def test_inverse_metric(A, zeta, expected):
    assert inverse_metric(FrozenData.from_matrix(A), zeta) == pytest.approx(expected, rel=1e-14)


def test_inverse_metric_zero_only_at_origin():
    fr = FrozenData.from_matrix([[2.0, 0.5], [0.5, 1.0]])
    assert inverse_metric(fr, (0.0, 0.0)) == 0.0
    assert inverse_metric(fr, (1e-3, 0.0)) > 0


def test_ellipticity_identity():
    assert check_ellipticity(identity_field(2), n=8) == (1.0, 1.0)


def test_ellipticity_diag_sine():
    lo, hi = check_ellipticity(diag_sine_field(2), n=64)
    # the lattice contains x_1 = 1/4 and 3/4 where the sine is extremal
    assert lo == pytest.approx(0.5, abs=1e-12)
    assert hi == pytest.approx(1.5, abs=1e-12)


def test_ellipticity_detects_degenerate_point():
    f = CoefficientField(2, lambda x, t: np.einsum("...,ij->...ij", np.sin(np.pi * x[..., 0]) ** 2, np.eye(2)))
    with pytest.raises(NonPositiveDefinite) as exc:
        check_ellipticity(f, n=8)
    assert exc.value.point is not None


def test_ellipticity_empty_grid():
    with pytest.raises(ValueError):
        check_ellipticity(identity_field(2), points=np.zeros((0, 3)))


def test_constant_derivatives_vanish():
    f = constant_field(np.diag([2.0, 1.0]), b=(0.5, -1.0), c=0.3)
    da, db, d2a = coefficient_derivatives(f, (0.1, 0.2, 0.0))
    assert np.all(da == 0) and np.all(db == 0) and d2a == 0
    bstar, cstar = adjoint_coefficients(f, np.array([0.1, 0.2]))
    assert np.allclose(bstar, (-0.5, 1.0)) and cstar == pytest.approx(0.3)


def test_constant_drift_adjoint():
    bstar, cstar = adjoint_coefficients(drift_field(2, b=(1.0, 0.0)), np.array([0.4, 0.4]))
    assert np.allclose(bstar, (-1.0, 0.0)) and cstar == 0.0


@pytest.mark.parametrize("x1", [0.0, 0.1, 0.3, 0.77])
def test_diag_sine_adjoint_drift(x1):
    bstar, _ = adjoint_coefficients(diag_sine_field(2), np.array([x1, 0.5]))
    assert bstar[0] == pytest.approx(2 * np.pi * np.cos(2 * np.pi * x1), abs=1e-12)
    assert bstar[1] == 0.0


def test_finite_difference_matches_closed_form():
    closed = diag_sine_field(2)
    fd = CoefficientField(2, closed.a_fn)
    x = np.array([0.13, 0.4])
    assert np.abs(fd.da(x) - closed.da(x)).max() < 1e-6
    assert abs(fd.d2a(x) - closed.d2a(x)) < 1e-3


def test_finite_difference_second_order():
    closed = diag_sine_field(2)
    x = np.array([0.13, 0.4])
    errs = []
    for h in (1e-2, 5e-3):
        fd = CoefficientField(2, closed.a_fn, h_fd=h)
        errs.append(np.abs(fd.da(x) - closed.da(x)).max())
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.1)


def test_builtin_registry():
    assert builtin_field("diag-sine", d=2).name == "diag-sine"
    with pytest.raises(KeyError):
        builtin_field("nope")
    register_field("test-constant", lambda d=2, **kw: constant_field(3 * np.eye(d), name="test-constant"))
    assert evaluate_frozen(builtin_field("test-constant", d=2), (0, 0, 0)).detA == pytest.approx(9.0)


def test_dimension_validation():
    with pytest.raises(ValueError):
        CoefficientField(4, lambda x, t: np.eye(4))


spd = st.tuples(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(0, np.pi)).map(
    lambda p: (lambda R: R @ np.diag(p[:2]) @ R.T)(
        np.array([[np.cos(p[2]), -np.sin(p[2])], [np.sin(p[2]), np.cos(p[2])]])))


@settings(max_examples=60, deadline=None)
@given(spd, st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_inverse_metric_eigenvalue_sandwich(A, zeta):
    fr = FrozenData.from_matrix(A)
    w = np.linalg.eigvalsh(fr.A)
    z2 = float(np.dot(zeta, zeta))
    q = float(inverse_metric(fr, zeta))
    assert z2 / w[-1] - 1e-9 * (1 + z2) <= q <= z2 / w[0] + 1e-9 * (1 + z2)


@settings(max_examples=60, deadline=None)
@given(spd)
def test_symmetrise_idempotent(A):
    B = A + np.array([[0.0, 1e-3], [0.0, 0.0]])
    once = FrozenData.from_matrix(B)
    twice = FrozenData.from_matrix(symmetrise(symmetrise(B)))
    assert np.array_equal(once.A, twice.A)
    assert np.abs(once.A - once.A.T).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_closed_form_det_inv_match_numpy(vals):
    M = np.array(vals).reshape(3, 3)
    A = M @ M.T + 0.5 * np.eye(3)
    assert det_small(A) == pytest.approx(np.linalg.det(A), rel=1e-9)
    assert np.allclose(inv_small(A), np.linalg.inv(A), rtol=1e-8, atol=1e-10)
