"""White noise on the torus and its three regularisations.

Noise values come from a counter-based generator: cell ``i`` of stream
``(seed, stream)`` is the ``i``-th Philox block, so any sub-rectangle (or
any later time slab) can be regenerated on its own and runs at different
``eps`` share the same underlying noise.

Regularisations:

* heat kernel: ``xi_eps(x, t) = int Gamma(x, t; zeta, t - eps^2) xi(zeta) dzeta``
  (space-time noise is first averaged in time with ``phi^eps``);
* covariant: the profile ``eps^-d det(A(x))^{-1/2} rho(theta^x(x - zeta) / eps^2)``
  whose anisotropy follows the diffusion matrix at the output point;
* flat: an arbitrary compactly supported two-point profile.

The three mollifiers follow the scikit-learn transformer protocol: ``fit``
prepares the discrete operator for a grid, ``transform`` applies it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import integrate, interpolate, sparse
from scipy.special import gamma as gamma_fn
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from levirenorm.coefficients import CoefficientField, identity_field, inv_small, det_small
from levirenorm.errors import UnresolvableEpsilon

__all__ = [
    "smooth_step",
    "kappa",
    "partition_1d",
    "phi_partition",
    "make_rho",
    "phi_t",
    "profile_matrix",
    "bump_functions",
    "Bumps",
    "NoiseField",
    "sample_white_noise",
    "noise_cells",
    "rho_normalisation",
    "phi_eps",
    "phi_autoconvolution",
    "time_mollify",
    "heat_mollify",
    "covariant_mollify",
    "flat_mollify",
    "HeatKernelMollifier",
    "CovariantMollifier",
    "FlatMollifier",
    "covariant_profile",
    "tensor_bump_profile",
]


# ---------------------------------------------------------------------------
# bump functions

def _psi(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = s > 0
    out[m] = np.exp(-1.0 / s[m])
    return out


def smooth_step(s):
    """C-infinity step: 0 for ``s <= 0``, 1 for ``s >= 1``, ``psi(s) + psi(1 - s) = 1``."""
    a = _psi(s)
    b = _psi(1.0 - np.asarray(s, dtype=float))
    return a / (a + b)


def kappa(t):
    """Time cut-off: 1 on ``[0, 1/2]``, smooth decay to 0 at 1, zero for ``t < 0``."""
    t = np.asarray(t, dtype=float)
    out = 1.0 - smooth_step(2.0 * t - 1.0)
    return np.where(t < 0, 0.0, out)


def partition_1d(y, inner: float = 0.45, outer: float = 0.55):
    """Even bump equal to 1 on ``|y| <= inner`` with ``sum_k chi(y + k) = 1``."""
    y = np.abs(np.asarray(y, dtype=float))
    return 1.0 - smooth_step((y - inner) / (outer - inner))


def phi_partition(x):
    """Product partition of unity on R^d; ``x`` has trailing axis ``d``."""
    x = np.asarray(x, dtype=float)
    return np.prod(partition_1d(x), axis=-1)


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r < 1
    out[m] = np.exp(-1.0 / (1.0 - r[m]))
    return out


_RHO_CONST = {}


def rho_normalisation(d: int) -> float:
    """Constant ``c`` with ``int_{R^d} c exp(-1/(1 - |x|^2)) dx = 1``."""
    if d not in _RHO_CONST:
        surface = 2 * np.pi ** (d / 2) / gamma_fn(d / 2)
        val, _ = integrate.quad(lambda r: _bump(r * r) * r ** (d - 1), 0, 1, epsabs=1e-14, epsrel=1e-13)
        _RHO_CONST[d] = 1.0 / (surface * val)
    return _RHO_CONST[d]


def make_rho(d: int) -> Callable:
    """Radial profile ``rho(r) = c exp(-1/(1 - r))`` on ``[0, 1)``, normalised in dimension ``d``."""
    c = rho_normalisation(d)

    def rho(r):
        return c * _bump(r)

    rho.d = d
    return rho


_PHI_T_CONST = None


def phi_t(s):
    """Even time bump ``c exp(-1/(1 - s^2))`` on ``(-1, 1)`` with unit integral."""
    global _PHI_T_CONST
    if _PHI_T_CONST is None:
        val, _ = integrate.quad(lambda u: _bump(u * u), -1, 1, epsabs=1e-14, epsrel=1e-13)
        _PHI_T_CONST = 1.0 / val
    s = np.asarray(s, dtype=float)
    return _PHI_T_CONST * _bump(s * s)


class Bumps(NamedTuple):
    kappa: Callable
    phi_partition: Callable
    rho: Callable
    phi_t: Callable


def bump_functions(d: int = 2) -> Bumps:
    """Default cut-offs: ``kappa``, partition ``phi``, radial ``rho`` (dimension ``d``) and time bump ``phi_t``."""
    return Bumps(kappa=kappa, phi_partition=phi_partition, rho=make_rho(d), phi_t=phi_t)


def phi_eps(t, eps, phi: Callable = phi_t):
    """``phi^eps(t) = eps^-2 phi(t / eps^2)``."""
    return phi(np.asarray(t, dtype=float) / eps**2) / eps**2


_AUTO = {}


def phi_autoconvolution(phi: Callable = phi_t, n: int = 4001, m: int = 96):
    """``Phi = phi * phi`` (supported on ``[-2, 2]``) as a cubic spline.

    Table values come from Gauss-Legendre on the overlap interval; the spline
    is cached per ``phi``.
    """
    key = (id(phi), n, m)
    if key not in _AUTO:
        x, w = np.polynomial.legendre.leggauss(m)
        r = np.linspace(-2.0, 2.0, n)
        lo = np.maximum(-1.0, r - 1.0)
        hi = np.minimum(1.0, r + 1.0)
        half = np.clip(0.5 * (hi - lo), 0.0, None)[:, None]
        s = lo[:, None] + half * (x + 1.0)
        vals = np.sum(half * w * phi(s) * phi(r[:, None] - s), axis=1)
        _AUTO[key] = (phi, interpolate.CubicSpline(r, vals))
    spline = _AUTO[key][1]

    def Phi(r):
        r = np.asarray(r, dtype=float)
        return np.where(np.abs(r) < 2.0, spline(np.clip(r, -2.0, 2.0)), 0.0)

    return Phi


# ---------------------------------------------------------------------------
# white noise

def _stream_key(seed: int, stream: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), int(stream)]).generate_state(2, np.uint64)


def noise_cells(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Standard normals for cells ``start .. start + count - 1`` of a stream.

    Cell ``i`` is Box-Muller applied to the first two words of Philox block
    ``i``, so the value of a cell never depends on which other cells are
    generated alongside it.
    """
    if count <= 0:
        return np.zeros(0)
    ctr = np.array([start, 0, 0, 0], dtype=np.uint64)
    raw = np.random.Philox(key=_stream_key(seed, stream), counter=ctr).random_raw(4 * count)
    raw = raw.reshape(count, 4)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(float) + 1.0) * 2.0**-53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(float) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2 * np.pi * u2)


@dataclass
class NoiseField:
    """One realisation of white noise on a grid.

    ``values`` holds one Gaussian per cell with variance ``1 / cell volume``
    (``1 / h^d`` spatial, ``1 / (dt h^d)`` space-time).  Spatial noise has
    shape ``(n,) * d``; space-time noise ``(m,) + (n,) * d`` with time cell
    ``k`` covering ``[t0 + k dt, t0 + (k + 1) dt)``.
    """

    kind: str
    d: int
    n: int
    values: np.ndarray
    seed: int
    stream: int = 0
    dt: Optional[float] = None
    k0: int = 0

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def cell_volume(self) -> float:
        vol = self.h**self.d
        return vol * self.dt if self.kind == "space-time" else vol

    def pair(self, f: np.ndarray) -> float:
        """``<xi, f>`` for ``f`` sampled at cell points."""
        return float(np.sum(self.values * f) * self.cell_volume)


def sample_white_noise(kind: str, d: int, n: int, seed: int, stream: int = 0, m: Optional[int] = None,
                       dt: Optional[float] = None, k0: int = 0, box=None) -> NoiseField:
    """Draw white noise; ``box`` optionally restricts to a sub-rectangle.

    ``box`` is a list of ``(lo, hi)`` index ranges, one per axis (time axis
    first for space-time noise).  Values in a sub-rectangle coincide with
    the same cells of the full draw.
    """
    if n < 2:
        raise ValueError("grid needs at least 2 cells per axis")
    if kind == "spatial":
        shape = (n,) * d
        vol = n ** (-d)
    elif kind == "space-time":
        if m is None or dt is None or m < 1:
            raise ValueError("space-time noise needs m >= 1 time cells and dt")
        shape = (m,) + (n,) * d
        vol = dt * n ** (-d)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    full_shape = shape if kind == "spatial" else (k0 + m,) + (n,) * d
    if box is None:
        box = [(0, s) for s in shape]
    box = [tuple(b) for b in box]
    sub = tuple(hi - lo for lo, hi in box)
    vals = np.empty(sub)
    # rows along the last axis are contiguous in the flat cell index
    idx = np.stack(np.meshgrid(*[np.arange(lo, hi) for lo, hi in box[:-1]], indexing="ij"), -1).reshape(-1, len(box) - 1) \
        if len(box) > 1 else np.zeros((1, 0), dtype=int)
    lo_last, hi_last = box[-1]
    flat = vals.reshape(-1, sub[-1])
    for r, prefix in enumerate(idx):
        pref = tuple(int(p) for p in prefix)
        if kind == "space-time":
            pref = (pref[0] + k0,) + pref[1:]
        start = int(np.ravel_multi_index(pref + (lo_last,), full_shape))
        flat[r] = noise_cells(seed, stream, start, hi_last - lo_last)
    return NoiseField(kind=kind, d=d, n=n, values=vals / np.sqrt(vol), seed=seed, stream=stream, dt=dt, k0=k0)


# ---------------------------------------------------------------------------
# discrete operators

def _apply_factors(factors, values: np.ndarray, d: int, n: int) -> np.ndarray:
    """Apply tensor-factor matrices (as stored in a GridKernel pair) to a grid function."""
    u = values.reshape((-1,) + (n,) * d)
    for dims, mat in factors:
        k = len(dims)
        # move the factor's axes to the end, contract, move back
        axes = [1 + i for i in dims]
        others = [a for a in range(1, d + 1) if a not in axes]
        perm = [0] + others + axes
        v = np.transpose(u, perm)
        sh = v.shape
        v = v.reshape(-1, n**k) @ mat.T
        v = v.reshape(sh)
        inv = np.argsort(perm)
        u = np.transpose(v, inv)
    return u.reshape(values.shape)


def time_mollify(values: np.ndarray, dt: float, eps: float, phi: Callable = phi_t, t_index=None, k0: int = 0):
    """``int phi^eps(t - s) xi(., s) ds`` at cell midpoints of the time axis.

    ``values`` has the time axis first; cells outside the supplied slab are
    treated as absent, so callers pass enough margin (``eps^2 / dt`` cells
    on each side).  ``t_index`` selects output time cells (default all).
    """
    m = values.shape[0]
    t_index = np.arange(m) if t_index is None else np.asarray(t_index)
    tc = (np.arange(m) + 0.5) * dt
    out = np.empty((t_index.size,) + values.shape[1:])
    flat = values.reshape(m, -1)
    for j, k in enumerate(t_index):
        w = phi_eps(tc[k] - tc, eps, phi) * dt
        nz = np.nonzero(w)[0]
        out[j] = (w[nz] @ flat[nz]).reshape(values.shape[1:])
    return out


def heat_mollify(xi: NoiseField, eps: float, kernel, phi: Callable = phi_t, t=None) -> np.ndarray:
    """Heat-kernel regularisation with ``Gamma(x, t; zeta, t - eps^2)``.

    ``kernel`` is a :class:`~levirenorm.parametrix.GridKernel` holding the
    pair ``(t, t - eps^2)`` (for autonomous coefficients the pair
    ``(eps^2, 0)``); ``t`` selects the pair, default the first stored pair
    with lag ``eps^2``.  Space-time noise is averaged in time with
    ``phi^eps`` first and the result has one slice per time cell.
    """
    if eps**2 < (xi.dt or 0.0):
        raise UnresolvableEpsilon(f"eps^2 = {eps**2:g} below the time step {xi.dt:g}")
    if t is None:
        p = int(np.argmin(np.abs(kernel.lags - eps**2)))
        if not np.isclose(kernel.lags[p], eps**2, rtol=1e-9):
            raise ValueError(f"kernel has no pair with lag eps^2 = {eps**2:g}")
    else:
        p = kernel.index(t, t - eps**2)
    facs = [(dims, v[p]) for dims, v in kernel.factors]
    h_d = xi.h**xi.d
    if xi.kind == "spatial":
        return _apply_factors(facs, xi.values, xi.d, xi.n) * h_d
    avg = time_mollify(xi.values, xi.dt, eps, phi)
    return _apply_factors(facs, avg, xi.d, xi.n) * h_d


def covariant_profile(field: CoefficientField, eps: float, rho: Optional[Callable] = None, t: float = 0.0):
    """Two-point profile ``rho^{(x, eps)}(x - zeta)`` with base point at the output ``x``."""
    d = field.d
    rho = rho or make_rho(d)

    def profile(x, zeta):
        x = np.asarray(x, float)
        zeta = np.asarray(zeta, float)
        A = field.a(x, t)
        Q = inv_small(A)
        det = det_small(A)
        y = x - zeta
        y = y - np.floor(y + 0.5)
        q = np.einsum("...i,...ij,...j->...", y, Q, y)
        return rho(q / eps**2) / (eps**d * np.sqrt(det))

    profile.radius = eps * np.sqrt(_max_eig(field, t))
    return profile


def _max_eig(field, t):
    from levirenorm.coefficients import check_ellipticity

    _, lam1 = check_ellipticity(field, n=32, n_times=4)
    return lam1 * 1.0000001


def tensor_bump_profile(eps: float, d: int, phi1: Callable = phi_t):
    """Translation-invariant product profile ``prod_i eps^-1 phi1(y_i / eps)``."""

    def profile(x, zeta):
        y = np.asarray(x, float) - np.asarray(zeta, float)
        y = y - np.floor(y + 0.5)
        return np.prod(phi1(y / eps) / eps, axis=-1)

    profile.radius = eps * np.sqrt(d)
    profile.separable = (phi1, eps)
    return profile


def profile_matrix(profile: Callable, d: int, n: int, radius: float) -> sparse.csr_matrix:
    """Sparse ``n^d x n^d`` matrix ``M[i, j] = profile(x_i, x_j) h^d`` over offsets within ``radius``."""
    h = 1.0 / n
    r = int(np.ceil(radius / h))
    if 2 * r + 1 > n:
        raise UnresolvableEpsilon("profile support wraps around the torus")
    offs = np.array(np.meshgrid(*[np.arange(-r, r + 1)] * d, indexing="ij")).reshape(d, -1).T
    offs = offs[np.sum((offs * h) ** 2, axis=1) <= (radius + h * np.sqrt(d)) ** 2]
    idx = np.arange(n**d)
    mi = np.array(np.unravel_index(idx, (n,) * d)).T
    x = mi * h
    rows, cols, vals = [], [], []
    for o in offs:
        src = (mi - o) % n
        w = profile(x, x - o * h) * h**d
        keep = w != 0
        rows.append(idx[keep])
        cols.append(np.ravel_multi_index(tuple(src[keep].T), (n,) * d))
        vals.append(w[keep])
    M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n**d, n**d))
    return M


def _apply_sparse(M, xi: NoiseField, eps: float, phi: Callable) -> np.ndarray:
    if xi.kind == "spatial":
        return (M @ xi.values.ravel()).reshape(xi.values.shape)
    avg = time_mollify(xi.values, xi.dt, eps, phi)
    flat = avg.reshape(avg.shape[0], -1)
    return (M @ flat.T).T.reshape(avg.shape)


def covariant_mollify(xi: NoiseField, eps: float, field: CoefficientField, rho: Optional[Callable] = None,
                      phi: Callable = phi_t) -> np.ndarray:
    """Covariant regularisation (see :class:`CovariantMollifier`)."""
    return CovariantMollifier(eps, field=field, rho=rho, phi=phi).fit(xi).transform(xi)


def flat_mollify(xi: NoiseField, profile: Callable, eps: Optional[float] = None, phi: Callable = phi_t,
                 radius: Optional[float] = None) -> np.ndarray:
    """``int rho_eps(x, zeta) xi(zeta) dzeta`` for a two-point profile with compact support."""
    return FlatMollifier(profile, eps=eps, phi=phi, radius=radius).fit(xi).transform(xi)


# ---------------------------------------------------------------------------
# estimators

def _grid_of(X):
    if isinstance(X, NoiseField):
        return X.d, X.n
    if isinstance(X, tuple) and len(X) == 2:
        return int(X[0]), int(X[1])
    raise TypeError("fit expects a NoiseField or a (d, n) tuple")


class HeatKernelMollifier(TransformerMixin, BaseEstimator):
    """Heat-kernel regularisation of white noise.

    Parameters
    ----------
    epsilon : float
        Regularisation scale; the spatial kernel is ``Gamma`` at lag ``epsilon**2``.
    field : CoefficientField, optional
        Operator coefficients (identity if omitted).
    n_layers : int
        Levi truncation depth.
    quad : Quadrature, optional
        Levi quadrature settings.
    phi : callable
        Time bump for space-time noise.
    kernel : GridKernel, optional
        Precomputed kernel holding lag ``epsilon**2``; skips the Levi build.
    """

    def __init__(self, epsilon=0.1, field=None, n_layers=2, quad=None, phi=phi_t, kernel=None):
        self.epsilon = epsilon
        self.field = field
        self.n_layers = n_layers
        self.quad = quad
        self.phi = phi
        self.kernel = kernel

    def fit(self, X, y=None):
        from levirenorm.parametrix import build_levi, gamma_truncated

        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        d, n = _grid_of(X)
        if self.kernel is not None:
            self.kernel_ = self.kernel
        else:
            fld = self.field or identity_field(d)
            st = build_levi(fld, n, np.array([self.epsilon**2]), N=self.n_layers, quad=self.quad)
            self.kernel_ = gamma_truncated(st, self.n_layers)
        self.grid_ = (d, n)
        return self

    def transform(self, X):
        check_is_fitted(self, "kernel_")
        if (X.d, X.n) != self.grid_:
            raise ValueError(f"noise grid {(X.d, X.n)} differs from fitted grid {self.grid_}")
        return heat_mollify(X, self.epsilon, self.kernel_, self.phi)


class CovariantMollifier(TransformerMixin, BaseEstimator):
    """Covariant regularisation ``eps^-d det(A(x))^{-1/2} rho(theta^x(x - zeta) / eps^2)``.

    ``fit`` assembles the sparse matrix of the profile on the noise grid
    (the anisotropy is read from ``field`` at each output point).
    """

    def __init__(self, epsilon=0.1, field=None, rho=None, phi=phi_t, t=0.0):
        self.epsilon = epsilon
        self.field = field
        self.rho = rho
        self.phi = phi
        self.t = t

    def fit(self, X, y=None):
        d, n = _grid_of(X)
        if self.epsilon < 2.0 / n:
            raise UnresolvableEpsilon(f"eps = {self.epsilon:g} below two grid cells")
        fld = self.field or identity_field(d)
        prof = covariant_profile(fld, self.epsilon, self.rho, self.t)
        self.matrix_ = profile_matrix(prof, d, n, prof.radius)
        self.grid_ = (d, n)
        return self

    def transform(self, X):
        check_is_fitted(self, "matrix_")
        if (X.d, X.n) != self.grid_:
            raise ValueError(f"noise grid {(X.d, X.n)} differs from fitted grid {self.grid_}")
        return _apply_sparse(self.matrix_, X, self.epsilon, self.phi)


class FlatMollifier(TransformerMixin, BaseEstimator):
    """Regularisation by an arbitrary two-point profile ``rho_eps(x, zeta)``.

    ``profile(x, zeta)`` must vanish for ``|x - zeta| > radius`` (taken from
    ``profile.radius`` when not given).  ``eps`` only sets the time
    averaging of space-time noise.
    """

    def __init__(self, profile=None, eps=None, phi=phi_t, radius=None):
        self.profile = profile
        self.eps = eps
        self.phi = phi
        self.radius = radius

    def fit(self, X, y=None):
        if self.profile is None:
            raise ValueError("a two-point profile is required")
        d, n = _grid_of(X)
        radius = self.radius if self.radius is not None else getattr(self.profile, "radius", None)
        if radius is None:
            raise ValueError("profile support radius unknown")
        self.matrix_ = profile_matrix(self.profile, d, n, radius)
        self.grid_ = (d, n)
        return self

    def transform(self, X):
        check_is_fitted(self, "matrix_")
        if X.kind == "space-time" and self.eps is None:
            raise ValueError("space-time noise needs eps for the time average")
        return _apply_sparse(self.matrix_, X, self.eps or 1.0, self.phi)
