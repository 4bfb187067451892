import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from levirenorm.coefficients import (
    CoefficientField,
    constant_field,
    diag_sine_field,
    evaluate_frozen,
    identity_field,
)
from levirenorm.errors import UnsupportedGraph
from levirenorm.noise import covariant_profile, kappa, tensor_bump_profile
from levirenorm.parametrix import adjoint_gamma, build_levi
from levirenorm.renorm import (
    LADDER,
    CountertermFunction,
    counterterm_gpam_gradient,
    counterterm_gpam_noise,
    counterterm_kpz,
    counterterm_phi4,
    counterterm_phi43_sunset,
    fit_ladder,
    flat_graph_counterterm,
    graph,
    graph_frozen_integral,
    kpz_cross_term,
    kpz_log_coefficient,
    mc_variance_probe,
    reflection_cross_term,
    sunset_alpha,
)

I1 = evaluate_frozen(identity_field(1), (0.0, 0.0))
I2 = evaluate_frozen(identity_field(2), (0.0, 0.0, 0.0))
I3 = evaluate_frozen(identity_field(3), (0.0, 0.0, 0.0, 0.0))


def plateau(t):
    t = np.asarray(t, dtype=float)
    return np.where((t > 0) & (t < 0.5), 1.0, 0.0)


# g-PAM -------------------------------------------------------------------

@pytest.mark.parametrize("eps", [0.2, 0.1, 0.05])
def test_gpam_noise_plateau_closed_form(eps):
    v = counterterm_gpam_noise(eps, I2, kappa=plateau)
    exact = np.log((0.5 + 2 * eps**2) / (2 * eps**2))
    assert v.total / I2.C == pytest.approx(exact, rel=1e-12)
    assert exact == pytest.approx(2 * abs(np.log(eps)) + np.log(0.25 + eps**2), rel=1e-13)


def test_gpam_noise_halving():
    C = I2.C
    for eps in (0.1, 0.05):
        step = counterterm_gpam_noise(eps / 2, I2, kappa=plateau).total - counterterm_gpam_noise(eps, I2, kappa=plateau).total
        tail = np.log((0.5 + 2 * eps**2) / (0.5 + eps**2 / 2))
        assert step / C == pytest.approx(2 * np.log(2) - tail, rel=1e-12)
    step = counterterm_gpam_noise(0.025, I2).total - counterterm_gpam_noise(0.05, I2).total
    assert abs(step - 2 * np.log(2) * C) < 1e-3


def test_gpam_noise_scales_with_C():
    a = counterterm_gpam_noise(0.1, np.diag([4.0, 1.0])).total
    assert a == pytest.approx(0.5 * counterterm_gpam_noise(0.1, I2).total, rel=1e-14)


def test_gpam_gradient_plateau_closed_form():
    eps = 0.1
    c = 2 * eps**2
    exact = 0.5 * (2 * np.log(c + 0.5) - np.log(c) - np.log(c + 1))
    assert counterterm_gpam_gradient(eps, I2, 0, 0, kappa=plateau).total / I2.C == pytest.approx(exact, rel=1e-8)


def test_gpam_gradient_off_diagonal_vanishes():
    assert counterterm_gpam_gradient(0.1, np.diag([2.0, 1.0]), 0, 1).total == 0.0


def test_gpam_divergence_slopes():
    noise = fit_ladder(LADDER, [counterterm_gpam_noise(e, I2).total for e in LADDER])
    grad = fit_ladder(LADDER, [counterterm_gpam_gradient(e, I2, 0, 0).total for e in LADDER])
    assert noise.r2 > 0.99 and grad.r2 > 0.99
    assert noise.slope == pytest.approx(2 * I2.C, rel=0.05)
    assert noise.slope / grad.slope == pytest.approx(2.0, rel=0.05)


# phi^4 -------------------------------------------------------------------

def test_phi4_collapsed_time_mollifier():
    eps = 0.1
    oracle = integrate.quad(lambda t: kappa(t) ** 2 / (2 * eps**2 + 2 * t), 0, 1, points=[0.5], limit=200)[0]
    assert counterterm_phi4(eps, I2, phi="delta", d=2).total / I2.C == pytest.approx(oracle, rel=1e-8)


def test_phi4_d2_slope():
    fit = fit_ladder(LADDER, [counterterm_phi4(e, I2, d=2).total for e in LADDER])
    assert fit.r2 > 0.99
    assert fit.slope == pytest.approx(I2.C, rel=0.05)


def test_phi4_scales_with_C():
    for d, A in ((2, np.diag([4.0, 1.0])), (3, np.diag([4.0, 1.0, 1.0]))):
        fr = evaluate_frozen(identity_field(d), (0.0,) * (d + 1))
        assert counterterm_phi4(0.1, A, d=d).total == pytest.approx(0.5 * counterterm_phi4(0.1, fr, d=d).total, rel=1e-14)


def test_phi4_d3_inverse_law():
    # eps * value = alpha C + beta eps with beta converged; frozen: 0.9303 between eps = 0.1 and 0.05
    r = 0.1 * counterterm_phi4(0.1, I3, d=3).total / (0.05 * counterterm_phi4(0.05, I3, d=3).total)
    assert r == pytest.approx(0.9303, abs=2e-3)
    betas = [counterterm_phi4(e, I3, d=3).beta for e in (0.025, 0.0125)]
    assert betas[0] == pytest.approx(betas[1], rel=1e-3)


# sunset ------------------------------------------------------------------

def test_sunset_matches_brute_force():
    # frozen: 4-D tensor Gauss-Legendre over (r, |y|, b, w) with the spatial integral done radially
    # against the heat kernel and the time autoconvolution tabulated independently
    v = counterterm_phi43_sunset(0.1, I3)
    assert v.total / I3.C**2 == pytest.approx(0.90726, rel=0.01)


def test_sunset_log_law_and_C_squared():
    assert sunset_alpha().r2 > 0.99
    a = counterterm_phi43_sunset(0.1, np.diag([4.0, 1.0, 1.0])).total
    assert a == pytest.approx(0.25 * counterterm_phi43_sunset(0.1, I3).total, rel=1e-14)


# KPZ ---------------------------------------------------------------------

def test_kpz_scaling_and_sign():
    assert counterterm_kpz(0.1, np.array([[4.0]])).total == pytest.approx(counterterm_kpz(0.1, I1).total / 8, rel=1e-14)
    assert all(counterterm_kpz(e, I1).total > 0 for e in LADDER)


def test_kpz_inverse_law():
    # frozen: eps * value ratio 0.930 between eps = 0.1 and 0.05
    r = 0.1 * counterterm_kpz(0.1, I1).total / (0.05 * counterterm_kpz(0.05, I1).total)
    assert r == pytest.approx(0.9303, abs=2e-3)


def test_kpz_cross_term_vanishes():
    assert kpz_cross_term(diag_sine_field(1), x=0.1) < 1e-10


@pytest.mark.slow
def test_kpz_five_edge_graphs_cancel():
    fit = kpz_log_coefficient(I1)
    assert fit.cancels
    assert fit.double_cherry.slope == pytest.approx(0.01686, rel=0.05)


# graphs and schemes ------------------------------------------------------

def test_cherry_heat_graph_matches_phi4():
    g = graph_frozen_integral(graph("cherry"), 0.1, I2)
    assert g.value == pytest.approx(counterterm_phi4(0.1, I2, d=2).total, rel=1e-12)


def test_covariant_constant_field_has_no_gap():
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    fr = evaluate_frozen(constant_field(A), (0.0, 0.0, 0.0))
    g = graph_frozen_integral("cherry", 0.1, fr, scheme="covariant", field=constant_field(A), z=np.zeros(3))
    assert g.gap == 0.0
    flat = flat_graph_counterterm("cherry", 0.1, fr, covariant_profile(constant_field(A), 0.1))
    assert flat == g.frozen_value


def test_flat_tensor_bump_log_slope():
    L = (0.2, 0.1, 0.05)
    v = [flat_graph_counterterm("cherry", e, I2, tensor_bump_profile(e, 2)) for e in L]
    slopes = np.diff(v) / np.diff(np.abs(np.log(L)))
    assert np.all(slopes > 0)
    assert slopes[1] / slopes[0] == pytest.approx(1.0, abs=0.1)


def test_unknown_graph_rejected():
    with pytest.raises(UnsupportedGraph):
        graph("tadpole")
    with pytest.raises(UnsupportedGraph):
        CountertermFunction("phi4_3-sunset", field=identity_field(3), scheme="flat")


def test_reflection_cross_term_vanishes():
    st_ = build_levi(diag_sine_field(2), 32, np.array([0.02]), N=1)
    assert reflection_cross_term(st_).max() < 1e-12
    st_adj = adjoint_gamma(diag_sine_field(2), 32, np.array([0.02]), N=1)
    assert reflection_cross_term(st_adj).max() < 1e-12


# counterterm functions ---------------------------------------------------

@pytest.mark.parametrize("tag, d", [("gPAM-Xi2", 2), ("phi4_2", 2), ("phi4_3-cherry", 3), ("KPZ-cherry", 1)])
def test_counterterm_decomposition(tag, d):
    f = CountertermFunction(tag, field=diag_sine_field(d))
    v = f.evaluate((0.1,) * d, 0.0, 0.05)
    assert v.total == pytest.approx(v.divergent + v.beta, rel=1e-15, abs=1e-300)
    assert f((0.1,) * d, 0.0, 0.05) == v.total


def _agreeing_pair(A, z):
    """A constant field and one that equals it only on the hyperplane x_1 = z_1."""
    A = np.asarray(A)
    bump = lambda x, t: 1 + 0.3 * np.sin(np.pi * (x[..., 0] - z[0])) ** 2
    return constant_field(A), CoefficientField(2, lambda x, t: np.einsum("...,ij->...ij", bump(x, t), A))


spd = st.tuples(st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(-0.4, 0.4)).map(
    lambda p: np.array([[p[0], p[2]], [p[2], p[1]]]))
points = st.tuples(st.floats(0, 1), st.floats(0, 1))


@settings(max_examples=15, deadline=None)
@given(spd, points, st.sampled_from(["gPAM-Xi2", "phi4_2"]))
def test_counterterm_depends_on_frozen_data_only(A, z, tag):
    f1, f2 = _agreeing_pair(A, z)
    v1 = CountertermFunction(tag, field=f1).evaluate(z, 0.0, 0.1)
    v2 = CountertermFunction(tag, field=f2).evaluate(z, 0.0, 0.1)
    assert v1 == v2


@settings(max_examples=5, deadline=None)
@given(spd, points)
def test_flat_scheme_locality(A, z):
    f1, f2 = _agreeing_pair(A, z)
    v1 = CountertermFunction("phi4_2", field=f1, scheme="flat").evaluate(z, 0.0, 0.1)
    v2 = CountertermFunction("phi4_2", field=f2, scheme="flat").evaluate(z, 0.0, 0.1)
    assert v1 == v2


# Monte-Carlo probes ------------------------------------------------------

def test_gpam_probe_matches_quadrature():
    p = mc_variance_probe("gPAM-Xi2", 0.05, identity_field(2), n_samples=2000)
    assert np.all(np.abs(p.estimate / p.reference - 1) < 0.08)


def test_probe_standard_error_scaling():
    a = mc_variance_probe("gPAM-Xi2", 0.05, identity_field(2), n_samples=400)
    b = mc_variance_probe("gPAM-Xi2", 0.05, identity_field(2), n_samples=800)
    ratio = np.mean(a.stderr / b.stderr)
    assert ratio == pytest.approx(np.sqrt(2), rel=0.15)


def test_probe_rejects_few_samples():
    with pytest.raises(ValueError):
        mc_variance_probe("gPAM-Xi2", 0.05, identity_field(2), n_samples=50)
