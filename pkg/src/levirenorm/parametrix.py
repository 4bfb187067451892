"""Fundamental solutions by the Levi parametrix method.

The frozen-coefficient Gaussian ``Z`` (coefficients frozen at the source
point) is corrected by the layers

    (LZ)_1 = LZ,   (LZ)_{nu+1} = int int LZ(x, t; eta, s) (LZ)_nu(eta, s; zeta, tau),
    Z_nu = int int Z(x, t; eta, s) (LZ)_nu(eta, s; zeta, tau),

and ``Gamma_N = sum_{nu <= N} Z_nu``.  Space integrals use the periodic
trapezoid rule on the grid; time integrals use Gauss-Legendre nodes mapped
by a smoothstep so both endpoint singularities ``(s - tau)^{-1/2}`` and
``(t - s)^{-1/2}`` are absorbed.  The nested integrals are evaluated
recursively, so layer ``nu`` costs ``n_time**nu`` matrix products per
output time pair.

Fields whose diffusion matrix is diagonal and depends on ``x_1`` only
(``CoefficientField.x1_reduction``) factorise exactly: every layer is a
one-dimensional layer times constant-coefficient Gaussians in the remaining
coordinates.  :class:`GridKernel` stores such tensor factors separately,
which is what makes ``n = 128`` in two dimensions affordable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from levirenorm.coefficients import (
    CoefficientField,
    FrozenData,
    adjoint_field,
    check_ellipticity,
    det_small,
    inv_small,
)
from levirenorm.errors import QuadratureBudgetExceeded, TimeOrder

__all__ = [
    "grid_points",
    "periodic_displacement",
    "image_count",
    "frozen_gaussian",
    "apply_L_to_Z",
    "kernel_matrices",
    "GridKernel",
    "Quadrature",
    "LeviState",
    "levi_state",
    "levi_convolve",
    "build_levi",
    "gamma_truncated",
    "fit_layer_bounds",
    "composition_residual",
    "composition_order",
    "adjoint_gamma",
    "adjoint_mismatch",
    "adjoint_budget",
    "gradient_split_Z0",
    "reflection_split_Z1",
    "truncate_periodic_kernel",
    "lambda_sensitivity",
    "periodic_gaussian_1d",
]

# Image sums stop once the next image is below exp(-IMAGE_EXPONENT).
IMAGE_EXPONENT = 40.0


# ---------------------------------------------------------------------------
# grids and periodisation

def grid_points(d: int, n: int) -> np.ndarray:
    """Torus grid ``{0, 1/n, ..., (n-1)/n}^d`` flattened in C order, shape ``(n**d, d)``."""
    axes = [np.arange(n) / n] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def periodic_displacement(y: np.ndarray) -> np.ndarray:
    """Nearest-image representative of ``y`` in ``[-1/2, 1/2)``."""
    return y - np.floor(y + 0.5)


def image_count(a_max: float, lag: float) -> int:
    """Images per side needed so the omitted Gaussian images are below e^-40.

    With the displacement in ``[-1/2, 1/2)`` the first omitted image sits at
    distance at least ``K + 1/2``; we need ``(K + 1/2)^2 / (4 a lag) >= 40``.
    """
    return max(0, int(np.ceil(np.sqrt(4 * IMAGE_EXPONENT * a_max * lag) - 0.5)))


def _image_offsets(d: int, K: int) -> np.ndarray:
    r = range(-K, K + 1)
    return np.array(list(itertools.product(r, repeat=d)), dtype=float)


def _check_order(t, tau):
    if not t > tau:
        raise TimeOrder(f"target time {t} must exceed source time {tau}")


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    return x


def frozen_gaussian(frozen: FrozenData, x, t, zeta, tau, images: str = "adaptive") -> np.ndarray:
    """``C t^{-d/2} exp(-theta(x - zeta) / (4 (t - tau)))`` on the torus.

    ``images="nearest"`` uses only the nearest periodic image of the
    displacement; ``"adaptive"`` sums images until they fall below e^-40.
    ``x`` and ``zeta`` have trailing axis ``d`` and broadcast.
    """
    _check_order(t, tau)
    d = frozen.d
    lag = float(t - tau)
    y0 = periodic_displacement(_as_points(x, d) - _as_points(zeta, d))
    if images == "nearest":
        offs = np.zeros((1, d))
    else:
        amax = float(np.linalg.eigvalsh(frozen.A)[-1])
        offs = _image_offsets(d, image_count(amax, lag))
    out = np.zeros(y0.shape[:-1])
    for m in offs:
        y = y0 + m
        q = np.einsum("...i,ij,...j->...", y, frozen.A_inv, y)
        out += np.exp(-q / (4 * lag))
    return out * frozen.C * lag ** (-d / 2)


def periodic_gaussian_1d(a: float, lag: float, n: int) -> np.ndarray:
    """``n x n`` matrix of the periodised 1-D heat kernel of ``d_t - a d_x^2``."""
    x = np.arange(n) / n
    y0 = periodic_displacement(x[:, None] - x[None, :])
    K = image_count(a, lag)
    out = np.zeros((n, n))
    for m in range(-K, K + 1):
        out += np.exp(-((y0 + m) ** 2) / (4 * a * lag))
    return out / np.sqrt(4 * np.pi * a * lag)


# ---------------------------------------------------------------------------
# kernel evaluation

def _source_data(field: CoefficientField, xs, s):
    A = field.a(xs, s)
    Q = inv_small(A)
    det = det_small(A)
    C = (4 * np.pi) ** (-field.d / 2) / np.sqrt(det)
    amax = float(np.linalg.eigvalsh(A)[..., -1].max())
    return A, Q, C, amax


def kernel_matrices(field: CoefficientField, xt, t, xs, s, want=("Z",), images: str = "adaptive") -> dict:
    """Matrices ``M[i, j] = K(xt_i, t; xs_j, s)`` for the frozen Gaussian family.

    ``want`` selects from ``"Z"``, ``"LZ"`` (the operator applied in the
    target variable with the source-frozen Gaussian), ``"dZ"`` (target
    gradient, extra trailing axis) and ``"d2Z"`` (target Hessian).
    """
    _check_order(t, s)
    d = field.d
    xt = np.asarray(xt, float).reshape(-1, d)
    xs = np.asarray(xs, float).reshape(-1, d)
    lag = float(t - s)
    A, Q, C, amax = _source_data(field, xs, s)
    K = 0 if images == "nearest" else image_count(amax, lag)
    y0 = periodic_displacement(xt[:, None, :] - xs[None, :, :])
    nt, ns = y0.shape[:2]
    out = {}
    if "Z" in want:
        out["Z"] = np.zeros((nt, ns))
    if "LZ" in want:
        out["LZ"] = np.zeros((nt, ns))
        at = field.a(xt, t)
        dA = at[:, None, :, :] - A[None, :, :, :]
        trace_dAQ = np.einsum("tsij,sij->ts", dA, Q)
        bt = field.b(xt, t) if field.has_drift else None
        ct = field.c(xt, t) if field.has_potential else None
        if not field.has_drift and not field.has_potential and not np.any(dA):
            want = tuple(w for w in want if w != "LZ")
    if "dZ" in want:
        out["dZ"] = np.zeros((nt, ns, d))
    if "d2Z" in want:
        out["d2Z"] = np.zeros((nt, ns, d, d))
    pref = C[None, :] * lag ** (-d / 2)
    for m in _image_offsets(d, K):
        y = y0 + m
        Qy = np.einsum("sij,tsj->tsi", Q, y)
        g = pref * np.exp(-np.einsum("tsi,tsi->ts", y, Qy) / (4 * lag))
        if "Z" in out:
            out["Z"] += g
        if "LZ" in want:
            lz = (np.einsum("tsij,tsi,tsj->ts", dA, Qy, Qy) / (4 * lag**2) - trace_dAQ / (2 * lag))
            if bt is not None:
                lz = lz - np.einsum("ti,tsi->ts", bt, Qy) / (2 * lag)
            if ct is not None:
                lz = lz + ct[:, None]
            out["LZ"] += lz * g
        if "dZ" in want:
            out["dZ"] += -Qy / (2 * lag) * g[..., None]
        if "d2Z" in want:
            out["d2Z"] += (
                Qy[..., :, None] * Qy[..., None, :] / (4 * lag**2) - Q[None] / (2 * lag)
            ) * g[..., None, None]
    return out


def apply_L_to_Z(field: CoefficientField, zeta, tau, x, t) -> np.ndarray:
    """``LZ(x, t; zeta, tau)`` with ``L`` acting on the target variable.

    ``LZ = sum (a_ij(x,t) - a_ij(zeta,tau)) d_i d_j Z + sum b_i(x,t) d_i Z + c(x,t) Z``
    where ``Z`` is frozen at the source.  Vectorised over points ``x``.
    """
    x = np.asarray(x, float).reshape(-1, field.d)
    zeta = np.asarray(zeta, float).reshape(1, field.d)
    m = kernel_matrices(field, x, t, zeta, tau, want=("LZ",))
    return m["LZ"][:, 0]


# ---------------------------------------------------------------------------
# grid kernels

@dataclass
class GridKernel:
    """Two-point kernel on ``(n^d grid) x (n^d grid)`` for a list of time pairs.

    ``pairs[p] = (t, tau)`` with ``t > tau``; the kernel is zero whenever
    ``t <= tau`` and nothing on the diagonal ``t = tau`` is stored.  The
    values are a tensor product over ``factors``: each factor is
    ``(dims, values)`` with ``values`` of shape ``(P, n**k, n**k)`` for the
    ``k = len(dims)`` spatial coordinates it covers.  A kernel with a single
    factor covering every coordinate is stored densely.
    """

    d: int
    n: int
    pairs: np.ndarray
    factors: list
    policy: str = "diagonal-excluded"
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.atleast_2d(np.asarray(self.pairs, dtype=float))
        if np.any(self.pairs[:, 0] <= self.pairs[:, 1]):
            raise TimeOrder("stored pairs must satisfy t > tau")
        dims = sorted(i for dd, _ in self.factors for i in dd)
        if dims != list(range(self.d)):
            raise ValueError("factors must cover each coordinate exactly once")
        self.factors = sorted(self.factors, key=lambda f: f[0][0])

    @property
    def npairs(self) -> int:
        return self.pairs.shape[0]

    @property
    def lags(self) -> np.ndarray:
        return self.pairs[:, 0] - self.pairs[:, 1]

    def index(self, t, tau) -> int:
        hit = np.nonzero(np.isclose(self.pairs[:, 0], t, atol=1e-12) & np.isclose(self.pairs[:, 1], tau, atol=1e-12))[0]
        if hit.size == 0:
            raise KeyError(f"pair ({t}, {tau}) not stored")
        return int(hit[0])

    def matrix(self, p: int) -> np.ndarray:
        """Dense ``n^d x n^d`` matrix for pair ``p`` (only for small grids)."""
        out = np.ones((1, 1))
        for _, v in self.factors:
            out = np.kron(out, v[p])
        return out

    def value(self, t, tau, xi, zi) -> np.ndarray:
        """Entries at flat grid indices ``xi`` (targets) and ``zi`` (sources); zero if ``t <= tau``."""
        xi = np.asarray(xi)
        zi = np.asarray(zi)
        if t <= tau:
            return np.zeros(np.broadcast_shapes(xi.shape, zi.shape))
        p = self.index(t, tau)
        xm = np.unravel_index(xi, (self.n,) * self.d)
        zm = np.unravel_index(zi, (self.n,) * self.d)
        out = 1.0
        for dims, v in self.factors:
            k = len(dims)
            xf = np.ravel_multi_index(tuple(xm[i] for i in dims), (self.n,) * k)
            zf = np.ravel_multi_index(tuple(zm[i] for i in dims), (self.n,) * k)
            out = out * v[p][xf, zf]
        return out

    def sup(self, p: Optional[int] = None) -> float:
        ps = range(self.npairs) if p is None else [p]
        return max(float(np.prod([np.abs(v[q]).max() for _, v in self.factors])) for q in ps)

    def min(self, p: int) -> float:
        # min of a tensor product: extremes of the factor ranges
        cands = np.ones(1)
        for _, v in self.factors:
            ends = np.array([v[p].min(), v[p].max()])
            cands = (cands[:, None] * ends[None, :]).ravel()
        return float(cands.min())

    def scaled(self, c: float) -> "GridKernel":
        facs = list(self.factors)
        dims, v = facs[0]
        facs[0] = (dims, v * c)
        return replace(self, factors=facs, meta=dict(self.meta))

    def same_tail(self, other: "GridKernel") -> bool:
        """True when all factors except the first coincide."""
        if len(self.factors) != len(other.factors):
            return False
        return all(
            d1 == d2 and (v1 is v2 or np.array_equal(v1, v2))
            for (d1, v1), (d2, v2) in zip(self.factors[1:], other.factors[1:])
        )

    def __add__(self, other: "GridKernel") -> "GridKernel":
        if not np.array_equal(self.pairs, other.pairs):
            raise ValueError("kernels live on different time pairs")
        if self.same_tail(other) and self.factors[0][0] == other.factors[0][0]:
            dims, v = self.factors[0]
            facs = [(dims, v + other.factors[0][1])] + list(self.factors[1:])
            return replace(self, factors=facs, meta=dict(self.meta))
        if self.n ** self.d > 4096:
            raise ValueError("adding kernels with different tensor structure needs a dense grid")
        vals = np.stack([self.matrix(p) + other.matrix(p) for p in range(self.npairs)])
        return replace(self, factors=[(tuple(range(self.d)), vals)], meta=dict(self.meta))

    def max_abs_diff(self, other: "GridKernel", p: int, q: Optional[int] = None) -> float:
        """``sup |self(pair p) - other(pair q)|`` over all grid entries, chunked."""
        q = p if q is None else q
        return _tensor_diff_sup([v[p] for _, v in self.factors], [v[q] for _, v in other.factors],
                                [dd for dd, _ in self.factors], [dd for dd, _ in other.factors], self.d, self.n)

    def to_file(self, path, extra: Optional[dict] = None) -> None:
        from levirenorm.io import write_array

        header = {"kind": "grid-kernel", "d": self.d, "n": self.n, "policy": self.policy,
                  "pairs": self.pairs.tolist(), "factor_dims": [list(dd) for dd, _ in self.factors]}
        header.update({k: v for k, v in self.meta.items() if isinstance(v, (int, float, str))})
        if extra:
            header.update(extra)
        arrays = np.concatenate([v.ravel() for _, v in self.factors])
        write_array(path, arrays, header)

    @classmethod
    def from_file(cls, path) -> "GridKernel":
        from levirenorm.io import read_array

        data, header = read_array(path)
        d, n = int(header["d"]), int(header["n"])
        pairs = np.asarray(header["pairs"], float)
        P = pairs.shape[0]
        facs, off = [], 0
        for dims in header["factor_dims"]:
            size = P * n ** (2 * len(dims))
            facs.append((tuple(dims), data[off:off + size].reshape(P, n ** len(dims), n ** len(dims))))
            off += size
        meta = {k: v for k, v in header.items() if k not in ("kind", "d", "n", "policy", "pairs", "factor_dims")}
        return cls(d=d, n=n, pairs=pairs, factors=facs, policy=header["policy"], meta=meta)


def _expand(mats, dims_list, d, n):
    """Tensor-product array with axes ``(x_1..x_d, z_1..z_d)`` from factors (small grids only)."""
    out = np.ones((1,) * (2 * d))
    for m, dims in zip(mats, dims_list):
        k = len(dims)
        arr = m.reshape((n,) * (2 * k))
        shape = [1] * (2 * d)
        for j, i in enumerate(dims):
            shape[i] = n
            shape[d + i] = n
        out = out * arr.reshape(shape)
    return out


def _tensor_diff_sup(m1, m2, dims1, dims2, d, n) -> float:
    if len(m1) == 1 and len(m2) == 1:
        return float(np.abs(m1[0] - m2[0]).max())
    if dims1 == dims2:
        # chunk over rows of the first factor
        best = 0.0
        rest1 = m1[1:]
        rest2 = m2[1:]
        r1 = np.ones((1, 1))
        r2 = np.ones((1, 1))
        for a in rest1:
            r1 = np.kron(r1, a)
        for a in rest2:
            r2 = np.kron(r2, a)
        if r1.size > 2**22:
            raise ValueError("tail factors too large for chunked comparison")
        for i in range(m1[0].shape[0]):
            blk = m1[0][i][:, None, None] * r1[None] - m2[0][i][:, None, None] * r2[None]
            best = max(best, float(np.abs(blk).max()))
        return best
    if n ** d > 4096:
        raise ValueError("kernels with different tensor structure need a small grid")
    return float(np.abs(_expand(m1, dims1, d, n) - _expand(m2, dims2, d, n)).max())


# ---------------------------------------------------------------------------
# Levi iteration

@dataclass(frozen=True)
class Quadrature:
    """Quadrature knobs for the nested Levi integrals.

    ``n_time`` Gauss-Legendre nodes per time integral; ``refine`` spatial
    refinement of the internal integration grid relative to the output
    grid; the time integral skips ``cutoff * h^2 / lambda_min`` at both
    ends, where a Gaussian of that width is no longer resolved by the
    trapezoid rule (the skipped slabs contribute ``O(h^2)``).
    """

    n_time: int = 16
    refine: int = 1
    cutoff: float = 0.1
    max_products: int = 200_000

    def nodes(self, lo: float, hi: float):
        u, w = np.polynomial.legendre.leggauss(self.n_time)
        u = 0.5 * (u + 1)
        w = 0.5 * w
        s = u * u * (3 - 2 * u)
        ds = 6 * u * (1 - u)
        return lo + (hi - lo) * s, (hi - lo) * w * ds


@dataclass
class LeviState:
    """Layers of the Levi iteration on a fixed set of output time pairs."""

    field: CoefficientField
    n: int
    pairs: np.ndarray
    quad: Quadrature
    active: CoefficientField
    rest: tuple
    Z: list = dc_field(default_factory=list)
    LZ: list = dc_field(default_factory=list)
    products: int = 0

    @property
    def d(self) -> int:
        return self.field.d

    @property
    def n_fine(self) -> int:
        return self.n * self.quad.refine

    @property
    def h_fine(self) -> float:
        return 1.0 / self.n_fine

    @property
    def delta(self) -> float:
        lam0 = getattr(self, "_lam0", None)
        if lam0 is None:
            lam0, _ = check_ellipticity(self.active, n=32, n_times=8)
            self._lam0 = lam0
        return self.quad.cutoff * self.h_fine**2 / lam0

    def _grids(self):
        k = self.active.d
        fine = grid_points(k, self.n_fine)
        if self.quad.refine == 1:
            out_idx = np.arange(self.n ** k)
        else:
            mi = np.stack(np.meshgrid(*[np.arange(0, self.n_fine, self.quad.refine)] * k, indexing="ij"), -1)
            out_idx = np.ravel_multi_index(tuple(mi.reshape(-1, k).T), (self.n_fine,) * k)
        return fine, out_idx

    # matrix builders on the active coordinates
    def _mat(self, kind, t, s, rows, cols):
        fine, _ = self._grids_cached()
        return kernel_matrices(self.active, fine[rows], t, fine[cols], s, want=(kind,)).get(kind)

    def _grids_cached(self):
        g = getattr(self, "_grid_cache", None)
        if g is None:
            g = self._grids()
            self._grid_cache = g
        return g

    def _count(self, k=1):
        self.products += k
        if self.products > self.quad.max_products:
            raise QuadratureBudgetExceeded(
                f"more than {self.quad.max_products} matrix products requested")

    def lz_layer(self, nu: int, t: float, tau: float, rows: str = "fine") -> np.ndarray:
        """``(LZ)_nu(eta, t; zeta, tau)`` with ``eta`` on the fine grid (or output grid) and ``zeta`` on the output grid."""
        fine, out = self._grids_cached()
        r = slice(None) if rows == "fine" else out
        hk = self.h_fine ** self.active.d
        if nu == 1:
            m = self._mat("LZ", t, tau, r, out)
            return np.zeros((fine[r].shape[0], out.size)) if m is None else m
        acc = np.zeros((fine[r].shape[0], out.size))
        lo, hi = tau + self.delta, t - self.delta
        if hi <= lo:
            return acc
        for s, w in zip(*self.quad.nodes(lo, hi)):
            left = self._mat("LZ", t, s, r, slice(None))
            if left is None:
                continue
            right = self.lz_layer(nu - 1, s, tau)
            self._count()
            acc += w * hk * (left @ right)
        return acc

    def z_layer(self, nu: int, t: float, tau: float) -> np.ndarray:
        """``Z_nu`` on output x output grid of the active coordinates."""
        fine, out = self._grids_cached()
        if nu == 0:
            return self._mat("Z", t, tau, out, out)
        hk = self.h_fine ** self.active.d
        acc = np.zeros((out.size, out.size))
        lo, hi = tau + self.delta, t - self.delta
        if hi <= lo:
            return acc
        for s, w in zip(*self.quad.nodes(lo, hi)):
            right = self.lz_layer(nu, s, tau)
            if not np.any(right):
                continue
            left = self._mat("Z", t, s, out, slice(None))
            self._count()
            acc += w * hk * (left @ right)
        return acc

    def _rest_factors(self):
        cache = getattr(self, "_rest_cache", None)
        if cache is None:
            k = self.active.d
            cache = []
            for j, aj in enumerate(self.rest):
                g = np.stack([periodic_gaussian_1d(aj, lag, self.n) for lag in self.pairs[:, 0] - self.pairs[:, 1]])
                cache.append(((k + j,), g))
            self._rest_cache = cache
        return cache

    def wrap(self, active_vals: np.ndarray, tag: str, nu: int) -> GridKernel:
        facs = [(tuple(range(self.active.d)), active_vals)] + list(self._rest_factors())
        return GridKernel(d=self.d, n=self.n, pairs=self.pairs, factors=facs,
                          meta={"field": self.field.name, "layer": f"{tag}{nu}"})


def _split_field(field: CoefficientField, factorise: bool):
    if factorise and field.x1_reduction is not None:
        f1, rest = field.x1_reduction
        return f1, tuple(rest)
    return field, ()


def levi_state(field: CoefficientField, n: int, pairs, quad: Optional[Quadrature] = None,
               factorise: bool = True) -> LeviState:
    """Initial state holding ``Z_0`` and ``(LZ)_1`` on the output pairs.

    ``pairs`` is an array of ``(t, tau)``; a 1-D array is read as lags with
    ``tau = 0``.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim == 1:
        pairs = np.stack([pairs, np.zeros_like(pairs)], axis=1)
    if np.any(pairs[:, 0] <= pairs[:, 1]):
        raise TimeOrder("every pair needs t > tau")
    active, rest = _split_field(field, factorise)
    if active.d > 1 and n ** active.d > 4096:
        raise QuadratureBudgetExceeded(
            f"dense {active.d}-d kernels with n={n} need {n ** (2 * active.d)} entries per pair")
    st = LeviState(field=field, n=n, pairs=pairs, quad=quad or Quadrature(), active=active, rest=rest)
    z0 = np.stack([st.z_layer(0, t, tau) for t, tau in pairs])
    lz1 = np.stack([st.lz_layer(1, t, tau, rows="out") for t, tau in pairs])
    st.Z.append(st.wrap(z0, "Z", 0))
    st.LZ.append(None)
    st.LZ.append(st.wrap(lz1, "LZ", 1))
    return st


def levi_convolve(state: LeviState, nu: int):
    """Compute ``Z_nu`` and ``(LZ)_{nu+1}`` on the output pairs and append them.

    Returns the pair ``(LZ_{nu+1}, Z_nu)`` as :class:`GridKernel` values.
    """
    if nu < 1 or len(state.LZ) <= nu:
        raise ValueError(f"layer (LZ)_{nu} not available")
    if len(state.Z) == nu:
        z = np.stack([state.z_layer(nu, t, tau) for t, tau in state.pairs])
        state.Z.append(state.wrap(z, "Z", nu))
    if len(state.LZ) == nu + 1:
        lz = np.stack([state.lz_layer(nu + 1, t, tau, rows="out") for t, tau in state.pairs])
        state.LZ.append(state.wrap(lz, "LZ", nu + 1))
    return state.LZ[nu + 1], state.Z[nu]


def build_levi(field: CoefficientField, n: int, pairs, N: int = 2, quad: Optional[Quadrature] = None,
               factorise: bool = True, with_lz: bool = False) -> LeviState:
    """Levi layers ``Z_0..Z_N`` on the output pairs.

    ``with_lz`` also stores ``(LZ)_{N+1}``; otherwise only the ``Z`` layers
    are computed past ``(LZ)_1``, which saves one nesting level.
    """
    st = levi_state(field, n, pairs, quad, factorise)
    for nu in range(1, N + 1):
        if with_lz or nu < N:
            levi_convolve(st, nu)
        else:
            z = np.stack([st.z_layer(nu, t, tau) for t, tau in st.pairs])
            st.Z.append(st.wrap(z, "Z", nu))
    return st


def fit_layer_bounds(state: LeviState, layers: Optional[Sequence[int]] = None, min_lag: float = 0.0,
                     rate: str = "full"):
    """Least-squares fit of ``M_nu Gamma(nu) ~ H0 H^nu``.

    ``M_nu = max over stored lags of sup|Z_nu| (t - tau)^{d/2 - nu}`` for
    ``rate="full"``; ``rate="half"`` uses ``(t - tau)^{d/2 - nu/2}``, the
    growth actually seen on the grid when every layer gains only half a
    power of the lag (Lipschitz-type coefficients resolved at grid scale).
    Returns ``(H0, H, normalised)`` where ``normalised[nu]`` is
    ``M_nu Gamma(nu) / H^nu``.
    """
    if rate not in ("full", "half"):
        raise ValueError(f"unknown rate {rate!r}")
    layers = list(range(1, len(state.Z))) if layers is None else list(layers)
    d = state.d
    M = []
    for nu in layers:
        power = nu if rate == "full" else nu / 2
        vals = [state.Z[nu].sup(p) * lag ** (d / 2 - power)
                for p, lag in enumerate(state.Z[nu].lags) if lag >= min_lag]
        M.append(max(vals))
    M = np.asarray(M)
    y = np.log(M * gamma_fn(np.asarray(layers, float)))
    slope, intercept = np.polyfit(np.asarray(layers, float), y, 1)
    H0, H = float(np.exp(intercept)), float(np.exp(slope))
    normalised = {nu: float(m * gamma_fn(nu) / H**nu) for nu, m in zip(layers, M)}
    return H0, H, normalised


def gamma_truncated(state: LeviState, N: Optional[int] = None, tail_fit: Optional[tuple] = None) -> GridKernel:
    """``Gamma_N = sum_{nu <= N} Z_nu`` with a tail estimate in ``meta``.

    The tail estimate sums the fitted layer bound
    ``H0 H^nu (t - tau)^{nu - d/2} / Gamma(nu)`` over ``nu > N`` at the
    largest stored lag; ``tail_fit`` may supply ``(H0, H)``, otherwise they
    are fitted from the available layers (needs ``N >= 2``).
    """
    N = len(state.Z) - 1 if N is None else N
    if N > len(state.Z) - 1:
        raise ValueError(f"only {len(state.Z) - 1} layers available")
    out = state.Z[0]
    for nu in range(1, N + 1):
        out = out + state.Z[nu]
    meta = dict(out.meta, N=N, layer="Gamma")
    if tail_fit is None and N >= 2:
        if all(state.Z[nu].sup() > 0 for nu in range(1, N + 1)):
            tail_fit = fit_layer_bounds(state, range(1, N + 1))[:2]
        else:
            tail_fit = (0.0, 0.0)
    if tail_fit is not None:
        H0, H = tail_fit
        lag = float(state.pairs[:, 0].max() - state.pairs[:, 1].min())
        d = state.d
        tail = sum(H0 * H**nu * lag ** (nu - d / 2) / gamma_fn(nu) for nu in range(N + 1, N + 40))
        meta.update(tail_estimate=float(tail), H0=float(H0), H=float(H))
    out.meta = meta
    return out


# ---------------------------------------------------------------------------
# identities

def composition_residual(kernel: GridKernel, t: float, sigma: float, tau: float) -> float:
    """``sup |Gamma(t, tau) - sum_y Gamma(t, sigma) Gamma(sigma, tau) h^d| / sup Gamma(t, tau)``."""
    if not t > sigma > tau:
        raise TimeOrder("need t > sigma > tau")
    p = kernel.index(t, tau)
    p1 = kernel.index(t, sigma)
    p2 = kernel.index(sigma, tau)
    comp = []
    for dims, v in kernel.factors:
        hk = kernel.n ** (-len(dims))
        comp.append(v[p1] @ v[p2] * hk)
    own = [v[p] for _, v in kernel.factors]
    dims = [dd for dd, _ in kernel.factors]
    diff = _tensor_diff_sup(own, comp, dims, dims, kernel.d, kernel.n)
    return diff / kernel.sup(p)


def composition_order(field: CoefficientField, ns: Sequence[int], pairs, t: float, sigma: float, tau: float,
                      N: int = 0) -> tuple:
    """Composition residuals on successively finer grids and the observed order in ``dx``.

    Returns ``(residuals, orders)`` with ``orders[k] = log(r_k / r_{k+1}) / log(n_{k+1} / n_k)``.
    The periodic trapezoid rule is spectrally accurate for Gaussians, so on
    constant coefficients the order is far above two until round-off.
    """
    res = np.array([composition_residual(gamma_truncated(build_levi(field, n, pairs, N=N), N), t, sigma, tau)
                    for n in ns])
    ns = np.asarray(ns, float)
    orders = np.log(res[:-1] / res[1:]) / np.log(ns[1:] / ns[:-1])
    return res, orders


def adjoint_gamma(field: CoefficientField, n: int, pairs, N: int = 2, quad: Optional[Quadrature] = None,
                  factorise: bool = True) -> LeviState:
    """Levi layers of the adjoint kernel, built by time reversal.

    ``Gamma*(x, t; zeta, tau)`` for ``t < tau`` equals ``Gamma'(x, -t; zeta, -tau)``
    where ``Gamma'`` is the forward kernel of ``d_s - a' d^2 - b* d - c*``
    with all coefficients read at time ``-s``.  The returned state stores
    the forward pairs ``(-tau_fwd, -t_fwd)`` for each forward pair
    ``(t_fwd, tau_fwd)``, i.e. ``state.Z[nu]`` at pair ``p`` holds
    ``Z*_nu(x, tau_fwd; zeta, t_fwd)``.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim == 1:
        pairs = np.stack([pairs, np.zeros_like(pairs)], axis=1)
    rev = np.stack([-pairs[:, 1], -pairs[:, 0]], axis=1)
    return build_levi(adjoint_field(field), n, rev, N=N, quad=quad, factorise=factorise)


def adjoint_mismatch(gamma: GridKernel, gamma_adj: GridKernel) -> np.ndarray:
    """Per pair ``sup |Gamma(zeta, t; x, tau) - Gamma*(x, tau; zeta, t)| / sup Gamma``.

    ``gamma_adj`` must come from :func:`adjoint_gamma` on the same pairs,
    so that transposing the forward matrices lines the arguments up.
    """
    out = []
    for p in range(gamma.npairs):
        fwd_t = [v[p].T for _, v in gamma.factors]
        adj = [v[p] for _, v in gamma_adj.factors]
        dims = [dd for dd, _ in gamma.factors]
        out.append(_tensor_diff_sup(fwd_t, adj, dims, [dd for dd, _ in gamma_adj.factors], gamma.d, gamma.n)
                   / gamma.sup(p))
    return np.asarray(out)


def adjoint_budget(gamma: GridKernel, gamma_adj: GridKernel, quadrature_floor: float = 5e-3) -> np.ndarray:
    """Per-pair error budget for :func:`adjoint_mismatch`.

    Both truncated series miss their fitted tails (``meta["tail_estimate"]``,
    from :func:`gamma_truncated`); relative to ``sup Gamma`` at each pair and
    plus a quadrature floor this bounds what the mismatch can reach before
    the identity itself is violated.
    """
    tail = gamma.meta.get("tail_estimate", 0.0) + gamma_adj.meta.get("tail_estimate", 0.0)
    return np.array([tail / gamma.sup(p) + quadrature_floor for p in range(gamma.npairs)])


def _paired_offsets(d: int, K: int):
    """Image offsets as ``(m, -m)`` pairs plus the origin, so odd sums cancel exactly."""
    offs = _image_offsets(d, K)
    half = [m for m in offs if tuple(m) > (0.0,) * d]
    return [np.zeros(d)] + half


def _zstar_terms(field: CoefficientField, eta, tau, x, t):
    """Adjoint frozen kernel ``Z0*(eta, tau; x, t)`` (frozen at ``(x, t)``), its odd
    gradient part and the part where the derivative falls on the frozen coefficients."""
    d = field.d
    A = field.a(x, t)
    dA = field.da(x, t)
    Q = inv_small(A)
    dQ = -np.einsum("ij,kjl,lm->kim", Q, dA, Q)
    dlogC = -0.5 * np.einsum("ij,kji->k", Q, dA)
    C = (4 * np.pi) ** (-d / 2) / np.sqrt(det_small(A))
    lag = t - tau
    y0 = periodic_displacement(eta - x[None, :])
    val = np.zeros(eta.shape[0])
    lead = np.zeros(eta.shape)
    rem = np.zeros(eta.shape)

    def terms(y):
        g = C * lag ** (-d / 2) * np.exp(-np.einsum("ki,ij,kj->k", y, Q, y) / (4 * lag))
        r = dlogC[None, :] - np.einsum("mi,kij,mj->mk", y, dQ, y) / (4 * lag)
        return g, (y @ Q.T) / (2 * lag) * g[:, None], r * g[:, None]

    for m in _paired_offsets(d, image_count(float(np.linalg.eigvalsh(A)[-1]), lag)):
        g, ld, r = terms(y0 + m)
        if np.any(m):
            g2, ld2, r2 = terms(y0 - m)
            g, ld, r = g + g2, ld + ld2, r + r2
        val += g
        lead += ld
        rem += r
    return val, lead, rem


def gradient_split_Z0(field: CoefficientField, eta, tau, x, t, h: float = 1e-6):
    """Split of the ``x``-gradient of the adjoint frozen kernel.

    ``Z0*(eta, tau; x, t) = C(x, t) (t - tau)^{-d/2} exp(-theta^{(x,t)}(eta - x) / (4 (t - tau)))``
    for ``tau < t``.  Its gradient in ``x`` is ``Z_{0;i} + R*_{0,i}`` with the
    odd leading part ``Z_{0;i} = sum_l a^{il}(x, t) (eta - x)_l / (2 (t - tau)) Z0*``
    (differentiating the displacement only); ``R*_{0,i}`` collects the
    derivatives falling on ``C`` and ``A^{-1}`` and vanishes for constant ``A``.

    Returns ``(Z_{0;i}, R*_{0,i}, grad)``, each of shape ``(m, d)``; ``grad``
    is a central finite difference in ``x`` for checking the split.
    """
    _check_order(t, tau)
    d = field.d
    eta = _as_points(eta, d).reshape(-1, d)
    x = np.asarray(x, float).reshape(d)
    _, lead, rem = _zstar_terms(field, eta, tau, x, t)
    grad = np.zeros(eta.shape)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        grad[:, i] = (_zstar_terms(field, eta, tau, x + e, t)[0] - _zstar_terms(field, eta, tau, x - e, t)[0]) / (2 * h)
    return lead, rem, grad


def reflection_split_Z1(state: LeviState, p: int = 0):
    """Split ``Z_1 = Zbar_1 + R_1`` at stored pair ``p``.

    ``Zbar_1`` keeps the first-order Taylor coefficients of the operator
    at the source:

        Zbar^{ij}(x) = sum_k d_k a_ij(zeta) C(zeta) int int w(x - eta, t - s) (eta - zeta)_k d_i d_j Z(eta, s; zeta, tau)
        Zbar^{i}(x)  = b_i(zeta) C(zeta) int int w(x - eta, t - s) d_i Z(eta, s; zeta, tau)

    with ``w`` the Gaussian frozen at the source.  Returns dense matrices
    ``(Zbar_1, R_1)`` over the active coordinates.
    """
    if len(state.Z) < 2:
        raise ValueError("Z_1 not computed")
    fld = state.active
    k = fld.d
    fine, out = state._grids_cached()
    t, tau = state.pairs[p]
    hk = state.h_fine ** k
    srcs = fine[out]
    A = fld.a(srcs, tau)
    Q = inv_small(A)
    C = (4 * np.pi) ** (-k / 2) / np.sqrt(det_small(A))
    da = fld.da(srcs, tau)
    bz = fld.b(srcs, tau)
    zbar = np.zeros((out.size, out.size))
    lo, hi = tau + state.delta, t - state.delta
    nodes = zip(*state.quad.nodes(lo, hi)) if hi > lo else ()
    for s, w in nodes:
        # inner: odd integrand (eta - zeta)_k d_i d_j Z + b_i d_i Z, image by image
        ilag = s - tau
        y_in = periodic_displacement(fine[:, None, :] - srcs[None, :, :])
        term = np.zeros((fine.shape[0], out.size))
        Ki = image_count(float(np.linalg.eigvalsh(A)[:, -1].max()), ilag)
        for m in _image_offsets(k, Ki):
            yy = y_in + m
            Qy = np.einsum("jab,ejb->eja", Q, yy)
            g = C[None, :] * ilag ** (-k / 2) * np.exp(-np.einsum("eja,eja->ej", yy, Qy) / (4 * ilag))
            d2 = (Qy[..., :, None] * Qy[..., None, :] / (4 * ilag**2) - Q[None] / (2 * ilag)) * g[..., None, None]
            d1 = -Qy / (2 * ilag) * g[..., None]
            term += np.einsum("jkab,ejab,ejk->ej", da, d2, yy) + np.einsum("ja,eja->ej", bz, d1)
        # outer Gaussian frozen at each source zeta: w(x - eta, t - s) C(zeta)
        lag = t - s
        K = image_count(float(np.linalg.eigvalsh(A)[:, -1].max()), lag)
        y_out = periodic_displacement(srcs[:, None, :] - fine[None, :, :])  # x - eta, x on output grid
        outer = np.zeros((out.size, fine.shape[0], out.size))
        for m in _image_offsets(k, K):
            yy = y_out + m
            mono = (yy[..., :, None] * yy[..., None, :]).reshape(yy.shape[0], yy.shape[1], k * k)
            q = mono @ Q.reshape(-1, k * k).T
            outer += np.exp(-q / (4 * lag))
        outer *= C[None, None, :] * lag ** (-k / 2)
        zbar += w * hk * np.einsum("xej,ej->xj", outer, term)
    z1 = state.Z[1].factors[0][1][p]
    return zbar, z1 - zbar


def reflection_defect(zbar: np.ndarray, n: int, d: int) -> float:
    """``max |Zbar(R_zeta x) + Zbar(x)| / sup |Zbar|`` with ``R_zeta x = 2 zeta - x`` on the grid."""
    idx = np.arange(n ** d)
    mi = np.array(np.unravel_index(idx, (n,) * d))
    worst = 0.0
    for j in range(n ** d):
        zj = mi[:, j][:, None]
        refl = np.ravel_multi_index(tuple((2 * zj - mi) % n), (n,) * d)
        worst = max(worst, float(np.abs(zbar[refl, j] + zbar[idx, j]).max()))
    return worst / float(np.abs(zbar).max())


def truncate_periodic_kernel(gamma_whole: Callable, kappa: Callable, phi: Callable, d: int):
    """Periodised, time-truncated kernel ``K = kappa(t - s) sum_k phi(x - zeta - k) Gamma(x; zeta + k)``.

    ``gamma_whole(y, lag)`` evaluates a whole-space kernel at displacement
    ``y`` (shape ``(..., d)``) and lag ``t - s > 0``; ``phi`` is the
    partition-of-unity bump and ``kappa`` the time cut-off.  Returns a
    callable ``K(x, t, zeta, s)`` vanishing for ``t <= s``.
    """
    offs = _image_offsets(d, 1)

    def K(x, t, zeta, s):
        x = np.asarray(x, float)
        zeta = np.asarray(zeta, float)
        lag = np.asarray(t - s, float)
        y = x - zeta
        total = np.zeros(np.broadcast_shapes(y.shape[:-1], lag.shape))
        pos = lag > 0
        safe = np.where(pos, lag, 1.0)
        for m in offs:
            yy = y - m
            total = total + phi(yy) * gamma_whole(yy, safe)
        return np.where(pos, kappa(np.where(pos, lag, 0.0)) * total, 0.0)

    return K


def lambda_sensitivity(family: Callable[[float], CoefficientField], lam0: float, deltas, n: int, pairs,
                       N: int = 2, quad: Optional[Quadrature] = None):
    """Central finite-difference derivative of ``Gamma^lambda`` in ``lambda``.

    Returns ``(derivs, sup_gamma)`` where ``derivs[k]`` is the sup-norm of
    ``(Gamma^{lam0 + delta_k} - Gamma^{lam0 - delta_k}) / (2 delta_k)`` and
    ``sup_gamma`` the sup of ``Gamma^{lam0}``.  ``kernels`` holds the
    derivative kernels for envelope checks.
    """
    base = gamma_truncated(build_levi(family(lam0), n, pairs, N, quad), N)
    derivs, kernels = [], []
    for dl in deltas:
        gp = gamma_truncated(build_levi(family(lam0 + dl), n, pairs, N, quad), N)
        gm = gamma_truncated(build_levi(family(lam0 - dl), n, pairs, N, quad), N)
        if gp.same_tail(gm):
            dims, v = gp.factors[0]
            dk = replace(gp, factors=[(dims, (v - gm.factors[0][1]) / (2 * dl))] + list(gp.factors[1:]))
        else:
            dk = gp + gm.scaled(-1.0)
            dk = dk.scaled(1 / (2 * dl))
        kernels.append(dk)
        derivs.append(dk.sup())
    return np.asarray(derivs), base.sup(), kernels, base
