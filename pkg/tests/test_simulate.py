import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levirenorm.coefficients import CoefficientField, constant_field, diag_sine_field, identity_field
from levirenorm.errors import ConfigError
from levirenorm.parametrix import build_levi, gamma_truncated, grid_points
from levirenorm.renorm import counterterm_phi4
from levirenorm.simulate import (
    EquationConfig,
    cauchy_distance,
    counterterm_grid,
    epsilon_sweep,
    initial_state,
    mollifier_comparison,
    operator_matrix,
    solve,
    step,
)

SMALL = dict(n=32, T=1 / 32, dt=1 / 1024, save_every=4)


def zero(u):
    return 0 * u


# single steps --------------------------------------------------------------

def test_constants_are_preserved():
    cfg = EquationConfig(equation="phi4_2", field=diag_sine_field(2), u0=1.0, noise=False, nonlinearity=False,
                         counterterm="off", **SMALL)
    tr = solve(cfg)
    assert np.abs(tr.u - 1).max() < 1e-13


def test_one_step_matches_scalar_ode():
    K, eps = 0.7, 0.1
    cfg = EquationConfig(equation="phi4_2", field=identity_field(2), u0=K, eps=eps, noise=False, **SMALL)
    state = step(initial_state(cfg), cfg)
    ct = counterterm_phi4(eps, identity_field(2).a(np.zeros(2)), d=2).total
    expected = K + cfg.dt * (-(K**3) + 3 * ct * K)
    assert np.abs(state.u - expected).max() < 1e-12


def test_linear_maximum_principle():
    rng = np.random.default_rng(0)
    cfg = EquationConfig(equation="phi4_2", field=diag_sine_field(2), u0=rng.uniform(-1, 1, (32, 32)),
                         noise=False, nonlinearity=False, counterterm="off", **SMALL)
    tr = solve(cfg)
    assert np.all(np.diff(tr.sup) <= 1e-14)
    assert tr.sup[-1] < tr.sup[0]


def test_negative_stencil_rejected():
    cfg = EquationConfig(equation="phi4_2", field=constant_field(np.array([[4.0, 1.5], [1.5, 1.0]])), **SMALL)
    with pytest.raises(ConfigError):
        initial_state(cfg)


def test_step_size_checked_against_reaction_rate():
    with pytest.raises(ConfigError) as exc:
        initial_state(EquationConfig(equation="phi4_2", u0=40.0, noise=False, **SMALL))
    assert exc.value.field == "dt"


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0), st.floats(-1.0, 1.0), st.floats(-0.5, 0.5))
def test_operator_annihilates_constants(a11, a22, b1, c):
    f = constant_field(np.diag([a11, a22]), b=(b1, 0.0), c=c)
    M = operator_matrix(f, 16)
    assert np.allclose(M @ np.ones(256), c, atol=1e-9)
    off = M - np.diag(M.diagonal())
    assert off.min() >= 0


# solves ------------------------------------------------------------------

def test_linear_equation_matches_kernel_propagation():
    f = diag_sine_field(2)
    T = 0.02
    errs = []
    for n, dt in ((16, 1 / 1024), (32, 1 / 4096), (64, 1 / 16384)):
        x = grid_points(2, n)
        u0 = (1 + 0.5 * np.cos(2 * np.pi * x[:, 0]) + 0.3 * np.sin(2 * np.pi * x[:, 1])).reshape(n, n)
        cfg = EquationConfig(equation="gPAM", field=f, n=n, dt=dt, T=T, eps=max(0.1, 2 / n), u0=u0, noise=False,
                             g=zero, g_prime=zero, counterterm="off")
        K = gamma_truncated(build_levi(f, n, np.array([T]), N=3), 3)
        ref = K.matrix(0) @ u0.ravel() / n**2
        err = np.abs(solve(cfg).u[-1].ravel() - ref).max()
        assert err < 6 * (dt + 1 / n**2)
        errs.append(err)
    # frozen: 0.0248, 0.0044, 0.0008
    assert errs[0] / errs[1] > 3 and errs[1] / errs[2] > 3


def test_phi4_smoke_run():
    tr = solve(EquationConfig(equation="phi4_2", n=64, T=0.25, eps=0.1, save_every=16))
    assert not tr.blowup and np.all(np.isfinite(tr.u))
    assert tr.times[-1] == pytest.approx(0.25)
    assert tr.u.shape == (len(tr.times), 64, 64)


def test_kpz_and_gpam_smoke_runs():
    kpz = solve(EquationConfig(equation="KPZ", n=256, dt=1 / 16384, T=1 / 64, eps=0.05, save_every=64))
    gpam = solve(EquationConfig(equation="gPAM", field=diag_sine_field(2), f=[[0.5, 0.0], [0.0, 0.5]], **SMALL))
    for tr in (kpz, gpam):
        assert not tr.blowup and np.all(np.isfinite(tr.u))


@pytest.mark.slow
def test_unrenormalised_sup_grows_with_log_eps():
    ladder = (0.2, 0.1, 0.05)
    sups = np.array([[solve(EquationConfig(equation="phi4_2", n=64, T=0.25, eps=e, seed=s, counterterm="off",
                                           save_every=16)).sup[-1] for s in range(10)] for e in ladder])
    # frozen means: 0.39, 0.61, 0.91
    assert np.all(np.diff(sups.mean(axis=1)) > 0)


def test_blowup_is_flagged():
    cfg = EquationConfig(equation="phi4_2", u0=1.0, guard=1.05, noise=False, nonlinearity=False,
                         counterterm={"phi": 40.0}, **SMALL)
    tr = solve(cfg)
    assert tr.blowup and tr.blowup_time is not None
    assert cauchy_distance(tr, tr, cfg.T) == np.inf


def test_trajectory_window():
    tr = solve(EquationConfig(equation="phi4_2", **SMALL))
    lo, hi = tr.times[-1] / 2, tr.times[-1]
    sel = tr.times >= lo - 1e-12
    assert np.array_equal(tr.window(lo, hi), tr.u[sel])


# determinism and locality ------------------------------------------------

def test_solve_is_deterministic():
    cfg = EquationConfig(equation="phi4_2", seed=3, **SMALL)
    assert np.array_equal(solve(cfg).u, solve(cfg).u)
    assert not np.array_equal(solve(cfg).u, solve(cfg.replace(seed=4)).u)


def test_sweep_independent_of_thread_count():
    cfg = EquationConfig(equation="gPAM", **SMALL)
    a = epsilon_sweep(cfg, (0.2, 0.15, 0.1), seeds=range(3), workers=1)
    b = epsilon_sweep(cfg, (0.2, 0.15, 0.1), seeds=range(3), workers=3)
    assert np.array_equal(a.D, b.D)


def test_zero_counterterm_without_noise_is_eps_independent():
    cfg = EquationConfig(equation="phi4_2", u0=0.5, noise=False, counterterm={"phi": 0.0}, **SMALL)
    tab = epsilon_sweep(cfg, (0.2, 0.15, 0.1), seeds=range(2))
    assert np.all(tab.D == 0)


def test_identical_schemes_have_zero_distance():
    cfg = EquationConfig(equation="gPAM", **SMALL)
    tab = mollifier_comparison(cfg, ("heat", "heat"), (0.2, 0.15, 0.1), seeds=range(2))
    assert np.all(tab.D == 0)


def test_counterterm_evaluator_is_pure():
    cfg = EquationConfig(equation="phi4_2", field=diag_sine_field(2), **SMALL)
    table = {tag: counterterm_grid(cfg, tag) for tag in ("phi",)}
    calls = []

    def same_on_grid(tag, pts, t, eps):
        calls.append(tag)
        return table[tag]

    a = solve(cfg)
    b = solve(cfg.replace(counterterm=same_on_grid))
    assert calls and np.array_equal(a.u, b.u)


def test_counterterm_off_is_zero():
    cfg = EquationConfig(equation="gPAM", counterterm="off", **SMALL)
    assert np.all(counterterm_grid(cfg, "Xi2") == 0)


# configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw, field", [
    (dict(eps=0.05, n=16), "eps"),
    (dict(dt=-1.0), "dt"),
    (dict(scheme="magic"), "scheme"),
    (dict(counterterm="sometimes"), "counterterm"),
    (dict(equation="phi4_3"), "equation"),
    (dict(field=identity_field(1)), "field"),
])
def test_config_errors_name_the_field(kw, field):
    with pytest.raises(ConfigError) as exc:
        EquationConfig(**kw)
    assert exc.value.field == field


def test_time_dependent_field_rebuilds_operator():
    f = CoefficientField(2, lambda x, t: np.einsum("...,ij->...ij", 1 + 0.5 * np.sin(2 * np.pi * (x[..., 0] + t)),
                                                   np.eye(2)))
    cfg = EquationConfig(equation="phi4_2", field=f, u0=1.0, noise=False, nonlinearity=False, counterterm="off",
                         **SMALL)
    tr = solve(cfg)
    assert np.abs(tr.u - 1).max() < 1e-13
