import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from sklearn.base import clone

from levirenorm.coefficients import constant_field, diag_sine_field, identity_field
from levirenorm.errors import UnresolvableEpsilon
from levirenorm.noise import (
    CovariantMollifier,
    FlatMollifier,
    HeatKernelMollifier,
    bump_functions,
    covariant_mollify,
    covariant_profile,
    flat_mollify,
    kappa,
    make_rho,
    noise_cells,
    phi_eps,
    phi_partition,
    phi_t,
    profile_matrix,
    sample_white_noise,
    tensor_bump_profile,
)


def _fft_conv(field, kernel):
    """Circular convolution through the FFT (kernel centred at index 0)."""
    return np.real(np.fft.ifftn(np.fft.fftn(field) * np.fft.fftn(kernel)))


def _offsets(n, d):
    y = np.fft.fftfreq(n, 1.0) * 1.0  # signed offsets k/n in [-1/2, 1/2)
    return np.stack(np.meshgrid(*[y] * d, indexing="ij"), -1)


# ---------------------------------------------------------------------------
# bump functions

def test_kappa_values():
    assert kappa(0.25) == 1.0
    assert kappa(0.5) == 1.0
    assert kappa(2.0) == 0.0
    assert kappa(-0.1) == 0.0
    assert 0 < kappa(0.75) < 1


def test_bump_functions_bundle():
    b = bump_functions(2)
    assert b.kappa is kappa and b.phi_t is phi_t
    assert b.rho.d == 2


def test_rho_normalised_on_fine_grid():
    m = 512
    h = 2.0 / m
    x = -1 + h * (np.arange(m) + 0.5)
    X, Y = np.meshgrid(x, x, indexing="ij")
    total = make_rho(2)(X**2 + Y**2).sum() * h * h
    assert total == pytest.approx(1.0, abs=1e-8)


def test_phi_t_even_and_normalised():
    s = np.random.default_rng(1).uniform(-1.5, 1.5, 100)
    assert np.array_equal(phi_t(s), phi_t(-s))
    u, w = np.polynomial.legendre.leggauss(200)
    assert np.sum(w * phi_t(u)) == pytest.approx(1.0, abs=1e-6)
    assert phi_eps(0.0, 0.1) == pytest.approx(phi_t(0.0) / 0.01)


def test_partition_of_unity():
    x = np.random.default_rng(2).uniform(-0.5, 0.5, (50, 2))
    k = np.array([(i, j) for i in range(-2, 3) for j in range(-2, 3)])
    total = sum(phi_partition(x + kk) for kk in k)
    assert np.allclose(total, 1.0, atol=1e-14)


# ---------------------------------------------------------------------------
# white noise

def test_noise_deterministic():
    a = sample_white_noise("spatial", 2, 16, seed=7)
    b = sample_white_noise("spatial", 2, 16, seed=7)
    c = sample_white_noise("spatial", 2, 16, seed=8)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_noise_subrectangle_matches_full_draw():
    full = sample_white_noise("space-time", 2, 16, seed=3, m=10, dt=0.01)
    sub = sample_white_noise("space-time", 2, 16, seed=3, m=10, dt=0.01, box=[(2, 7), (3, 9), (0, 16)])
    assert np.array_equal(sub.values, full.values[2:7, 3:9, :])
    shifted = sample_white_noise("space-time", 2, 16, seed=3, m=4, dt=0.01, k0=5)
    assert np.array_equal(shifted.values, full.values[5:9])


def test_noise_cells_independent_of_batch():
    whole = noise_cells(1, 0, 100, 50)
    assert np.array_equal(whole[10:20], noise_cells(1, 0, 110, 10))


def test_cell_pairing_variance():
    xi = sample_white_noise("spatial", 2, 100, seed=0)
    pairings = xi.values * xi.cell_volume
    assert np.var(pairings) / xi.cell_volume == pytest.approx(1.0, rel=0.05)


def test_space_time_cell_variance():
    xi = sample_white_noise("space-time", 1, 100, seed=0, m=100, dt=0.01)
    assert np.var(xi.values) * xi.cell_volume == pytest.approx(1.0, rel=0.05)


def test_disjoint_pairings_uncorrelated():
    n = 16
    f = np.zeros(n)
    g = np.zeros(n)
    f[:8] = 1.0
    g[8:] = np.sin(np.arange(8))
    draws = np.array([[xi.pair(f), xi.pair(g)] for xi in
                      (sample_white_noise("spatial", 1, n, seed=s) for s in range(10_000))])
    r = np.corrcoef(draws.T)[0, 1]
    assert abs(r) < 3 / np.sqrt(draws.shape[0])


def test_smooth_pairing_variance():
    n = 32
    x = np.arange(n) / n
    X, Y = np.meshgrid(x, x, indexing="ij")
    f = np.cos(2 * np.pi * X) + 0.5 * np.sin(2 * np.pi * Y)
    norm2 = np.sum(f**2) / n**2
    vals = [sample_white_noise("spatial", 2, n, seed=s).pair(f) for s in range(1000)]
    assert np.var(vals) == pytest.approx(norm2, rel=0.1)


def test_noise_argument_errors():
    with pytest.raises(ValueError):
        sample_white_noise("spatial", 2, 1, seed=0)
    with pytest.raises(ValueError):
        sample_white_noise("space-time", 2, 8, seed=0)
    with pytest.raises(ValueError):
        sample_white_noise("pink", 2, 8, seed=0)


# ---------------------------------------------------------------------------
# heat-kernel regularisation

@pytest.fixture(scope="module")
def heat_identity():
    return HeatKernelMollifier(0.1, field=identity_field(2)).fit(sample_white_noise("spatial", 2, 64, seed=0))


def test_heat_kernel_squared_norm(heat_identity):
    # sum_zeta Gamma(x; zeta)^2 h^2 is the variance of xi_eps(x); closed form (8 pi eps^2)^-1
    K = heat_identity.kernel_
    row = np.ones(1)
    for _, vals in K.factors:
        row = np.kron(row, vals[0][0])
    var = np.sum(row**2) / 64**2
    assert var == pytest.approx(1 / (8 * np.pi * 0.01), rel=1e-3)


def test_heat_variance_monte_carlo(heat_identity):
    pts = np.array([(i, j) for i in range(0, 64, 16) for j in range(0, 64, 16)])
    vals = []
    for s in range(2000):
        out = heat_identity.transform(sample_white_noise("spatial", 2, 64, seed=s))
        vals.append(out[pts[:, 0], pts[:, 1]])
    vals = np.array(vals)
    assert np.mean(vals**2) == pytest.approx(1 / (8 * np.pi * 0.01), rel=0.05)
    # Gaussianity of point values
    flat = vals.ravel()
    n = flat.size
    assert abs(stats.skew(flat)) < 3 * np.sqrt(6 / n)
    assert abs(stats.kurtosis(flat)) < 3 * np.sqrt(24 / n)


def test_heat_covariance_matches_kernel_overlap(heat_identity):
    K = heat_identity.kernel_
    n = 64
    src = np.arange(n**2)
    # two nearby points, translated over a coarse lattice (the field is translation invariant)
    shifts = np.array([(i, j) for i in range(0, n, 16) for j in range(0, n, 16)])
    xs = np.ravel_multi_index(((10 + shifts[:, 0]) % n, (10 + shifts[:, 1]) % n), (n, n))
    ys = np.ravel_multi_index(((13 + shifts[:, 0]) % n, (12 + shifts[:, 1]) % n), (n, n))
    exact = np.sum(K.value(0.01, 0.0, xs[0], src) * K.value(0.01, 0.0, ys[0], src)) / n**2
    prods = []
    for s in range(1000):
        out = heat_identity.transform(sample_white_noise("spatial", 2, n, seed=s)).ravel()
        prods.append(out[xs] * out[ys])
    assert np.mean(prods) == pytest.approx(exact, rel=0.05)


def test_heat_large_eps_smooths():
    xi = sample_white_noise("spatial", 2, 32, seed=1)
    small = HeatKernelMollifier(0.1, field=identity_field(2)).fit(xi).transform(xi)
    large = HeatKernelMollifier(0.45, field=identity_field(2)).fit(xi).transform(xi)

    def roughness(u):
        g = np.gradient(u, 1 / 32)
        return np.sqrt(sum(np.sum(c**2) for c in g) / np.sum(u**2))

    assert roughness(large) < 0.25 * roughness(small)


def test_heat_linearity(heat_identity):
    a = sample_white_noise("spatial", 2, 64, seed=1)
    b = sample_white_noise("spatial", 2, 64, seed=2)
    ab = sample_white_noise("spatial", 2, 64, seed=1)
    ab.values = a.values + b.values
    lhs = heat_identity.transform(ab)
    rhs = heat_identity.transform(a) + heat_identity.transform(b)
    assert np.abs(lhs - rhs).max() < 1e-12 * np.abs(lhs).max()


def test_heat_space_time_unresolvable():
    xi = sample_white_noise("space-time", 1, 32, seed=0, m=8, dt=0.01)
    with pytest.raises(UnresolvableEpsilon):
        HeatKernelMollifier(0.05, field=identity_field(1)).fit(xi).transform(xi)


def test_heat_space_time_shape():
    xi = sample_white_noise("space-time", 1, 32, seed=0, m=40, dt=0.001)
    out = HeatKernelMollifier(0.1, field=identity_field(1)).fit(xi).transform(xi)
    assert out.shape == (40, 32) and np.all(np.isfinite(out))


def test_heat_grid_mismatch(heat_identity):
    with pytest.raises(ValueError):
        heat_identity.transform(sample_white_noise("spatial", 2, 32, seed=0))


def test_transformer_api_clone():
    m = HeatKernelMollifier(0.2, field=identity_field(2))
    c = clone(m)
    assert c.get_params()["epsilon"] == 0.2
    assert not hasattr(c, "kernel_")


# ---------------------------------------------------------------------------
# covariant and flat regularisation

def test_covariant_identity_is_radial_convolution():
    n, eps = 64, 0.15
    xi = sample_white_noise("spatial", 2, n, seed=4)
    got = covariant_mollify(xi, eps, identity_field(2))
    y = _offsets(n, 2)
    ker = make_rho(2)(np.sum(y**2, -1) / eps**2) / eps**2 / n**2
    ref = _fft_conv(xi.values, ker)
    assert np.abs(got - ref).max() < 1e-10 * np.abs(ref).max()


def test_covariant_profile_ellipse_axes():
    n = 128
    prof = covariant_profile(constant_field(np.diag([4.0, 1.0])), 0.1)
    M = profile_matrix(prof, 2, n, prof.radius)
    row = M[0].toarray().reshape(n, n)
    y = _offsets(n, 2)
    m2 = np.einsum("ij,ija,ijb->ab", row, y, y) / row.sum()
    assert m2[0, 0] / m2[1, 1] == pytest.approx(4.0, rel=0.02)
    assert abs(m2[0, 1]) < 1e-12


def test_covariant_mass_one_second_order():
    prof = covariant_profile(diag_sine_field(2), 0.12)
    errs = [np.abs(np.asarray(profile_matrix(prof, 2, n, prof.radius).sum(axis=1)).ravel() - 1).max()
            for n in (64, 128)]
    assert errs[0] < 1e-3
    assert errs[0] / errs[1] > 3.5


def test_covariant_unresolvable():
    with pytest.raises(UnresolvableEpsilon):
        CovariantMollifier(0.02, field=identity_field(2)).fit(sample_white_noise("spatial", 2, 64, seed=0))


def test_flat_with_covariant_profile_is_covariant():
    f = diag_sine_field(2)
    xi = sample_white_noise("spatial", 2, 32, seed=5)
    a = covariant_mollify(xi, 0.15, f)
    b = flat_mollify(xi, covariant_profile(f, 0.15))
    assert np.array_equal(a, b)


def test_tensor_bump_separable_oracle():
    n, eps = 64, 0.1
    xi = sample_white_noise("spatial", 2, n, seed=6)
    got = flat_mollify(xi, tensor_bump_profile(eps, 2))
    y = np.fft.fftfreq(n, 1.0)
    k1 = phi_t(y / eps) / eps / n
    ref = np.real(np.fft.ifft(np.fft.fft(xi.values, axis=0) * np.fft.fft(k1)[:, None], axis=0))
    ref = np.real(np.fft.ifft(np.fft.fft(ref, axis=1) * np.fft.fft(k1)[None, :], axis=1))
    assert np.abs(got - ref).max() < 1e-10 * np.abs(ref).max()


def test_flat_pairing_converges_second_order():
    n = 256
    xi = sample_white_noise("spatial", 1, n, seed=9)
    x = np.arange(n) / n
    f = np.exp(np.cos(2 * np.pi * x))
    exact = xi.pair(f)
    ladder = [0.2, 0.1, 0.05]
    errs = [abs(np.sum(flat_mollify(xi, tensor_bump_profile(e, 1)) * f) / n - exact) for e in ladder]
    slope = np.polyfit(np.log(ladder), np.log(errs), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.3)


def test_flat_requires_profile_and_eps():
    xi = sample_white_noise("space-time", 1, 32, seed=0, m=4, dt=0.01)
    with pytest.raises(ValueError):
        FlatMollifier().fit(xi)
    m = FlatMollifier(tensor_bump_profile(0.2, 1)).fit(xi)
    with pytest.raises(ValueError):
        m.transform(xi)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 0.3))
def test_mollifiers_deterministic(seed, eps):
    xi = sample_white_noise("spatial", 2, 32, seed=seed)
    f = diag_sine_field(2)
    a = CovariantMollifier(eps, field=f).fit(xi).transform(xi)
    b = CovariantMollifier(eps, field=f).fit(xi).transform(sample_white_noise("spatial", 2, 32, seed=seed))
    assert np.array_equal(a, b)
