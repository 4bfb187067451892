"""Renormalisation functions for the four model equations.

Every counterterm is a local function of the diffusion matrix at the
evaluation point: frozen coefficients turn each kernel into a Gaussian, the
spatial integrals are done in closed form and only low-dimensional time
integrals remain. Each evaluator returns ``(total, divergent, beta)`` with
``beta = total - divergent`` by definition.

Schemes:

* ``"heat"``: noise regularised by the heat kernel at lag ``eps^2`` (space-time
  noise is additionally averaged in time with ``phi^eps``);
* ``"covariant"``: spatial profile following ``A`` at the output point;
* ``"flat"``: any compactly supported two-point profile.

The heat scheme covers all tags. Covariant and flat profiles are handled for
the one-loop shapes: frozen profiles in free space on a local patch, the
variable covariant profile through its periodic grid difference to the
frozen one.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.special import roots_legendre

from levirenorm.coefficients import (
    CoefficientField,
    FrozenData,
    evaluate_frozen,
    identity_field,
)
from levirenorm.errors import UnsupportedGraph
from levirenorm.noise import kappa as default_kappa, phi_autoconvolution, phi_t

__all__ = [
    "LADDER",
    "EQUATION_TAGS",
    "SCHEMES",
    "CountertermValue",
    "CountertermFunction",
    "LadderFit",
    "GraphSpec",
    "GRAPH_MENU",
    "graph",
    "cherry_time_integral",
    "alpha_phi",
    "counterterm_gpam_noise",
    "counterterm_gpam_gradient",
    "counterterm_phi4",
    "counterterm_phi43_sunset",
    "sunset_alpha",
    "counterterm_kpz",
    "fit_ladder",
    "periodic_cherry_integral",
    "graph_frozen_integral",
    "flat_graph_counterterm",
    "mc_variance_probe",
    "reflection_cross_term",
    "kpz_cross_term",
    "kpz_log_coefficient",
    "KPZLogFit",
    "GraphIntegral",
    "ProbeTable",
]

LADDER = (0.2, 0.1, 0.05, 0.025)
EQUATION_TAGS = ("gPAM-Xi2", "gPAM-d2", "phi4_2", "phi4_3-cherry", "phi4_3-sunset", "KPZ-cherry", "KPZ-log")
SCHEMES = ("heat", "covariant", "flat")


class CountertermValue(NamedTuple):
    total: float
    divergent: float
    beta: float


def _value(total, divergent) -> CountertermValue:
    return CountertermValue(float(total), float(divergent), float(total - divergent))


def _check_eps(eps):
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 1/2), got {eps}")


# ---------------------------------------------------------------------------
# quadrature helpers

@lru_cache(maxsize=None)
def _gl(m: int):
    x, w = roots_legendre(m)
    return x, w


def _panel_nodes(edges, m: int = 16):
    """Composite Gauss-Legendre nodes and weights on consecutive ``edges``."""
    edges = np.asarray(edges, dtype=float)
    x, w = _gl(m)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    return (lo + half * (x + 1.0)).ravel(), (half * w).ravel()


def _graded_edges(lo: float, hi: float, scale: float, breaks=(), wmax: float = 0.125) -> np.ndarray:
    """Panel edges from ``lo`` to ``hi`` doubling in width from ``scale`` up to ``wmax``."""
    pts = [lo]
    w = min(scale, wmax)
    while pts[-1] + w < hi:
        pts.append(pts[-1] + w)
        w = min(2.0 * w, wmax)
    pts.append(hi)
    pts = np.union1d(pts, [b for b in breaks if lo < b < hi])
    return pts


def _pairwise_sum_integral(f: Callable, kappa: Callable, eps: float, m: int = 16) -> float:
    """``int int f(s + s') kappa(s) kappa(s') ds ds'`` over ``(0, 1)^2``.

    Reduced to ``int f(u) K2(u) du`` with ``K2 = kappa * kappa``; the inner
    integral is split at ``1/2`` and ``u - 1/2`` so piecewise kappas are exact.
    """
    ue = _graded_edges(0.0, 2.0, eps**2 / 4, breaks=(0.5, 1.0, 1.5))
    u, wu = _panel_nodes(ue, m)
    k2 = np.zeros_like(u)
    x, w = _gl(m)
    for i, ui in enumerate(u):
        lo, hi = max(0.0, ui - 1.0), min(ui, 1.0)
        cuts = np.union1d([lo, hi], [c for c in (0.5, ui - 0.5) if lo < c < hi])
        s, ws = _panel_nodes(cuts, m)
        k2[i] = np.sum(ws * kappa(s) * kappa(ui - s))
    return float(np.sum(wu * f(u) * k2))


def cherry_time_integral(eps: float, power: float, kappa: Callable = default_kappa, phi=phi_t,
                         m: int = 24) -> float:
    """``int int (phi^eps)^{*2}(tau - tau') (2 eps^2 + tau + tau')^{-power} kappa(tau) kappa(tau')``.

    In the coordinates ``u = tau + tau'``, ``v = tau - tau'`` the ``v``-range is
    clipped to ``|v| <= min(u, 2 eps^2)`` (where both cut-offs are active), so
    the only singular direction is ``u``, handled by a graded panel rule.
    ``phi="delta"`` collapses the time mollifier, giving
    ``int (2 eps^2 + 2 tau)^{-power} kappa(tau)^2 dtau``.
    """
    e2 = eps**2
    if isinstance(phi, str) and phi == "delta":
        te = _graded_edges(0.0, 1.0, e2 / 4, breaks=(0.5,))
        t, wt = _panel_nodes(te, m)
        return float(np.sum(wt * (2 * e2 + 2 * t) ** (-power) * kappa(t) ** 2))
    tau, taup, wt = _cherry_nodes(eps, kappa, phi, m)
    return float(np.sum(wt * (2 * e2 + tau + taup) ** (-power)))


def _cherry_nodes(eps: float, kappa: Callable = default_kappa, phi=phi_t, m: int = 24):
    """Nodes ``(tau, tau')`` and weights for ``int int Phi_eps(tau - tau') kappa kappa g(tau, tau')``."""
    e2 = eps**2
    Phi = phi_autoconvolution(phi)
    ue = _graded_edges(0.0, 2.0, e2 / 4, breaks=(2 * e2, 1.0))
    u, wu = _panel_nodes(ue, m)
    x, w = _panel_nodes(np.linspace(-1.0, 1.0, 9), m)
    vmax = np.minimum(u, 2 * e2)
    v = vmax[:, None] * x[None, :]
    tau = 0.5 * (u[:, None] + v)
    taup = 0.5 * (u[:, None] - v)
    wt = 0.5 * wu[:, None] * vmax[:, None] * w[None, :] * Phi(v / e2) / e2 * kappa(tau) * kappa(taup)
    keep = wt != 0
    return tau[keep], taup[keep], wt[keep]


def alpha_phi(phi=phi_t) -> float:
    """``alpha(phi) = int Phi(r) (2 + |r|)^{-1/2} dr`` with ``Phi = phi * phi``.

    Obtained from the d=3 cherry integral by the substitution
    ``(tau, tau') -> (eps^2 tau, eps^2 tau')``; it is the coefficient of
    ``1/eps``.
    """
    if isinstance(phi, str) and phi == "delta":
        return 2**-0.5
    Phi = phi_autoconvolution(phi)
    r, w = _panel_nodes(np.linspace(-2, 2, 9), 32)
    return float(np.sum(w * Phi(r) * (2 + np.abs(r)) ** -0.5))


# ---------------------------------------------------------------------------
# heat-kernel counterterms

def _frozen(frozen) -> FrozenData:
    if isinstance(frozen, FrozenData):
        return frozen
    return FrozenData.from_matrix(np.atleast_2d(np.asarray(frozen, dtype=float)))


def counterterm_gpam_noise(eps: float, frozen, kappa: Callable = default_kappa) -> CountertermValue:
    """g-PAM ``<Xi 2>`` constant ``C int (tau + 2 eps^2)^{-1} kappa(tau) dtau`` (d=2).

    Divergent part ``2 C |log eps|``.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    if fr.A.shape[0] != 2:
        raise ValueError("g-PAM counterterms are defined for d = 2")
    e2 = eps**2
    pts = [p for p in (2 * e2, 0.5) if p < 1]
    val, _ = integrate.quad(lambda t: kappa(t) / (t + 2 * e2), 0.0, 1.0, points=pts, limit=200,
                            epsabs=1e-13, epsrel=1e-12)
    return _value(fr.C * val, 2 * fr.C * abs(np.log(eps)))


def counterterm_gpam_gradient(eps: float, frozen, i: int, j: int,
                              kappa: Callable = default_kappa) -> CountertermValue:
    """g-PAM ``<d^2>`` constant ``a^{ij} C / 2 int int (2 eps^2 + s + s')^{-2} kappa kappa`` (d=2).

    Divergent part ``a^{ij} C |log eps|``.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    if fr.A.shape[0] != 2:
        raise ValueError("g-PAM counterterms are defined for d = 2")
    aij = fr.A_inv[i, j]
    if aij == 0.0:
        return CountertermValue(0.0, 0.0, 0.0)
    e2 = eps**2
    J = _pairwise_sum_integral(lambda u: (2 * e2 + u) ** -2.0, kappa, eps)
    return _value(0.5 * aij * fr.C * J, aij * fr.C * abs(np.log(eps)))


def counterterm_phi4(eps: float, frozen, kappa: Callable = default_kappa, phi=phi_t,
                     d: Optional[int] = None) -> CountertermValue:
    """Wick constant of ``phi^4_d``: ``C int int (phi^eps)^{*2} (2 eps^2 + tau + tau')^{-d/2} kappa kappa``.

    Divergent part ``C |log eps|`` for d=2 and ``C alpha(phi) / eps`` for d=3.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    d = fr.A.shape[0] if d is None else d
    if d not in (2, 3):
        raise ValueError("phi^4 counterterms are implemented for d = 2, 3")
    J = cherry_time_integral(eps, d / 2, kappa, phi)
    div = abs(np.log(eps)) if d == 2 else alpha_phi(phi) / eps
    return _value(fr.C * J, fr.C * div)


def counterterm_kpz(eps: float, frozen, phi=phi_t, kappa: Callable = default_kappa) -> CountertermValue:
    """KPZ ``<2>`` constant from the pairing of two ``Z*_{0;1}`` kernels (d=1).

    The ``eta``-integral of two differentiated Gaussians at lags ``s, s'`` is
    ``(C / (2a)) (s + s')^{-3/2}``, so the constant is
    ``a^{-3/2} (4 pi)^{-1/2} / 2 * J_{3/2}(eps)`` with ``J`` the cherry time
    integral. Divergent part ``a^{-3/2} alpha / eps`` with
    ``alpha = alpha(phi) / (2 sqrt(4 pi))``.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    if fr.A.shape[0] != 1:
        raise ValueError("KPZ counterterm is defined for d = 1")
    a = float(fr.A[0, 0])
    pref = fr.C / (2 * a)
    J = cherry_time_integral(eps, 1.5, kappa, phi)
    return _value(pref * J, pref * alpha_phi(phi) / eps)


# ---------------------------------------------------------------------------
# phi^4_3 sunset

def _sunset_reduced(eps: float, kappa: Callable, phi, m: int = 12, m_w: int = 12) -> float:
    """``S / C^2`` for the sunset.

    With ``r`` the kernel lag and ``(a_i, b_i)`` the lags of the two
    covariance factors,

        S / C^2 = int dr kappa(r) prod_i [int da_i db_i Phi_eps(r + b_i - a_i) kappa(a_i) kappa(b_i)]
                  (s_1 s_2 + r (s_1 + s_2))^{-3/2},   s_i = a_i + b_i + 2 eps^2,

    the bracket being the three-Gaussian product identity. For fixed ``r``
    each covariance factor only enters through the density ``h_r(s)`` of
    ``s_i``, so the five-fold integral becomes ``r`` times a double integral
    in ``(s_1, s_2)``.
    """
    e2 = eps**2
    Phi = phi_autoconvolution(phi)
    r, wr = _panel_nodes(_graded_edges(0.0, 1.0, e2 / 4, breaks=(0.5,)), m)
    xq, wq_ref = _panel_nodes(np.linspace(-1, 1, 9), m_w)
    total = 0.0
    for rk, wrk in zip(r, wr):
        breaks = (rk, rk + 2 * e2, rk + 4 * e2, 2 * e2 + abs(rk - 2 * e2))
        s, ws = _panel_nodes(_graded_edges(2 * e2, 2.0 + 4 * e2, e2 / 4, breaks=breaks), m)
        # density of s: b = (s - r - eps^2 w - 2 eps^2) / 2 >= 0 and a = b + r + eps^2 w >= 0
        # bound w; the Jacobian of (a, b) -> (w, s) is 1/2
        wlo = np.maximum(-2.0, (2 * e2 - s - rk) / e2)
        whi = np.minimum(2.0, (s - rk - 2 * e2) / e2)
        half = np.clip(0.5 * (whi - wlo), 0.0, None)
        w = wlo[:, None] + half[:, None] * (xq[None, :] + 1.0)
        b = 0.5 * (s[:, None] - rk - e2 * w - 2 * e2)
        a = b + rk + e2 * w
        h = 0.5 * half * np.sum(wq_ref * Phi(w) * kappa(b) * kappa(a), axis=1)
        g = ws * h
        nz = g != 0
        s, g = s[nz], g[nz]
        F = (s[:, None] * s[None, :] + rk * (s[:, None] + s[None, :])) ** -1.5
        total += wrk * kappa(rk) * (g @ F @ g)
    return float(total)


@lru_cache(maxsize=None)
def _sunset_cached(eps: float, kappa: Callable, phi) -> float:
    return _sunset_reduced(eps, kappa, phi)


def sunset_alpha(kappa: Callable = default_kappa, phi=phi_t, ladder: Sequence[float] = LADDER) -> "LadderFit":
    """Fit ``S / C^2 = alpha |log eps| + beta`` over the ladder (the coefficient is A-independent)."""
    vals = [_sunset_cached(float(e), kappa, phi) for e in ladder]
    return fit_ladder(ladder, vals, "log")


def counterterm_phi43_sunset(eps: float, frozen, kappa: Callable = default_kappa, phi=phi_t,
                             ladder: Sequence[float] = LADDER) -> CountertermValue:
    """``phi^4_3`` sunset constant ``C^2 (alpha |log eps| + beta_eps)`` (d=3).

    ``alpha`` is fitted once over ``ladder`` with unit frozen constant.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    if fr.A.shape[0] != 3:
        raise ValueError("the sunset is a d = 3 graph")
    S = _sunset_cached(float(eps), kappa, phi)
    alpha = sunset_alpha(kappa, phi, ladder).slope
    return _value(fr.C**2 * S, fr.C**2 * alpha * abs(np.log(eps)))


# ---------------------------------------------------------------------------
# ladder fits

class LadderFit(NamedTuple):
    slope: float
    intercept: float
    r2: float
    coordinate: str


def fit_ladder(eps: Sequence[float], values: Sequence[float], coordinate: str = "log") -> LadderFit:
    """Least-squares line of ``values`` against ``|log eps|`` or ``1/eps``."""
    eps = np.asarray(eps, dtype=float)
    x = np.abs(np.log(eps)) if coordinate == "log" else 1.0 / eps
    res = stats.linregress(x, np.asarray(values, dtype=float))
    return LadderFit(float(res.slope), float(res.intercept), float(res.rvalue**2), coordinate)


# ---------------------------------------------------------------------------
# graphs

@dataclass(frozen=True)
class GraphSpec:
    """A pairing diagram.

    ``kernel_edges`` are ``(later, earlier)`` vertex pairs carrying the
    (truncated) kernel, ``noise`` maps each noise vertex to the two vertices
    its mollifier edges attach to. ``gradient`` marks every kernel edge as a
    spatial derivative of the kernel in its later variable (KPZ convention).
    ``noise_kind`` is ``"space-time"`` or ``"spatial"``.
    """

    name: str
    root: str
    kernel_edges: Tuple[Tuple[str, str], ...]
    noise: Tuple[Tuple[str, Tuple[str, str]], ...]
    gradient: bool = False
    noise_kind: str = "space-time"

    def __post_init__(self):
        children = [c for _, c in self.kernel_edges]
        if len(set(children)) != len(children) or self.root in children:
            raise UnsupportedGraph(f"{self.name}: kernel edges must form a tree hanging from the root")
        reach = {self.root}
        pending = list(self.kernel_edges)
        while pending:
            progressed = False
            for e in list(pending):
                if e[0] in reach:
                    reach.add(e[1])
                    pending.remove(e)
                    progressed = True
            if not progressed:
                raise UnsupportedGraph(f"{self.name}: kernel edges not connected to the root")
        for v, (a, b) in self.noise:
            if a not in reach or b not in reach or v in reach:
                raise UnsupportedGraph(f"{self.name}: noise vertex {v} must pair two tree vertices")
        if self.noise_kind not in ("space-time", "spatial"):
            raise UnsupportedGraph(f"unknown noise kind {self.noise_kind!r}")

    @property
    def vertices(self) -> Tuple[str, ...]:
        """Non-root tree vertices in a parent-before-child order."""
        return tuple(c for _, c in self.kernel_edges)

    @property
    def loops(self) -> int:
        return len(self.noise)

    def parent_edge(self) -> Dict[str, int]:
        return {c: k for k, (_, c) in enumerate(self.kernel_edges)}

    def path(self, v: str) -> np.ndarray:
        """Indicator of kernel edges on the path root -> ``v``."""
        out = np.zeros(len(self.kernel_edges))
        pe = self.parent_edge()
        while v != self.root:
            k = pe[v]
            out[k] = 1.0
            v = self.kernel_edges[k][0]
        return out

    def with_options(self, gradient: Optional[bool] = None, noise_kind: Optional[str] = None) -> "GraphSpec":
        return GraphSpec(self.name, self.root, self.kernel_edges, self.noise,
                         self.gradient if gradient is None else gradient,
                         self.noise_kind if noise_kind is None else noise_kind)


GRAPH_MENU: Dict[str, GraphSpec] = {
    # root - kernel - x1, noise paired between root and x1 (g-PAM Xi2)
    "noise-loop": GraphSpec("noise-loop", "o", (("o", "x1"),), (("v", ("o", "x1")),), noise_kind="spatial"),
    # two kernels from the root, their leaves paired (Wick square)
    "cherry": GraphSpec("cherry", "o", (("o", "l"), ("o", "r")), (("v", ("l", "r")),)),
    # three kernels from the root, the third splitting again; leaves paired across
    "sunset": GraphSpec("sunset", "o", (("o", "l"), ("o", "r"), ("o", "t"), ("t", "tl"), ("t", "tr")),
                        (("v1", ("tl", "l")), ("v2", ("tr", "r")))),
    # cherry whose left branch carries one more kernel
    "cherry-chain": GraphSpec("cherry-chain", "o", (("o", "l"), ("o", "r"), ("l", "tl")),
                              (("v", ("r", "tl")),)),
    # chain root - m, m - r, m - t, t - tl, t - tr; the root itself is paired
    "sunset-offroot": GraphSpec("sunset-offroot", "o",
                                (("o", "m"), ("m", "r"), ("m", "t"), ("t", "tl"), ("t", "tr")),
                                (("v1", ("tl", "o")), ("v2", ("tr", "r")))),
    # two two-level branches, inner leaves and outer leaves paired
    "double-cherry": GraphSpec("double-cherry", "o",
                               (("o", "l"), ("o", "r"), ("l", "ll"), ("r", "rr"), ("r", "mr"), ("l", "ml")),
                               (("v1", ("ml", "mr")), ("v2", ("ll", "rr")))),
}


def graph(name: str, gradient: bool = False, noise_kind: Optional[str] = None) -> GraphSpec:
    """Menu graph by name; raises :class:`UnsupportedGraph` for unknown shapes."""
    if isinstance(name, GraphSpec):
        return name
    if name not in GRAPH_MENU:
        raise UnsupportedGraph(f"graph {name!r} is not in the menu {sorted(GRAPH_MENU)}")
    return GRAPH_MENU[name].with_options(gradient=gradient, noise_kind=noise_kind)


def _menu_check(G: GraphSpec):
    ref = GRAPH_MENU.get(G.name)
    if ref is None or (ref.kernel_edges, ref.noise) != (G.kernel_edges, G.noise):
        raise UnsupportedGraph(f"graph {G.name!r} is not in the menu")


def _spatial_factor(G: GraphSpec, fr: FrozenData, lags: np.ndarray, eps: float) -> np.ndarray:
    """Spatial integral of the graph for kernel lags ``lags`` (shape ``(N, n_kernel)``).

    Every edge is a frozen Gaussian: kernel edges at their lag, collapsed
    noise pairs at ``2 eps^2``. Integrating all non-root positions gives
    ``C^loops U^{-d/2}`` with ``U = det(reduced Laplacian(1/s)) prod_e s_e``
    (the Kirchhoff polynomial). Gradient edges (d=1 only) multiply by the
    Wick sum of their linear forms under that Gaussian.
    """
    d = fr.A.shape[0]
    verts = G.vertices
    idx = {v: i for i, v in enumerate(verts)}
    nV = len(verts)
    N = lags.shape[0]
    edges = [(a, b) for a, b in G.kernel_edges] + [pair for _, pair in G.noise]
    s_all = np.concatenate([lags, np.full((N, len(G.noise)), 2 * eps**2)], axis=1)
    inc = np.zeros((len(edges), nV))
    for k, (a, b) in enumerate(edges):
        if a != G.root:
            inc[k, idx[a]] += 1.0
        if b != G.root:
            inc[k, idx[b]] -= 1.0
    with np.errstate(divide="ignore"):
        wts = 1.0 / s_all
    L = np.einsum("ke,nk,kf->nef", inc, wts, inc)
    sign, logdet = np.linalg.slogdet(L)
    logU = logdet + np.sum(np.log(s_all), axis=1)
    val = fr.C ** G.loops * np.exp(-0.5 * d * logU)
    if not G.gradient:
        return val
    if d != 1:
        raise UnsupportedGraph("gradient edges are implemented for d = 1")
    a = float(fr.A[0, 0])
    # positions have precision L / (2a); derivative in the later variable of edge k gives
    # -(x_later - x_earlier) / (2 a s_k)
    cov = 2 * a * np.linalg.inv(L)
    nk = len(G.kernel_edges)
    forms = -inc[:nk][None, :, :] / (2 * a * lags[:, :, None])
    Cf = np.einsum("nke,nef,nlf->nkl", forms, cov, forms)
    return val * _wick(Cf)


def _wick(Cf: np.ndarray) -> np.ndarray:
    """Isserlis sum over perfect matchings of the index set, batched over the leading axis."""
    m = Cf.shape[-1]
    if m % 2:
        return np.zeros(Cf.shape[0])

    def matchings(items):
        if not items:
            yield []
            return
        first, rest = items[0], items[1:]
        for k in range(len(rest)):
            for tail in matchings(rest[:k] + rest[k + 1:]):
                yield [(first, rest[k])] + tail

    total = np.zeros(Cf.shape[0])
    for mt in matchings(list(range(m))):
        term = np.ones(Cf.shape[0])
        for i, j in mt:
            term = term * Cf[:, i, j]
        total += term
    return total


def _time_constraints(G: GraphSpec):
    """Matrix ``M`` with ``t_a - t_b = M @ lags`` for each noise pair (vertex times are minus path sums)."""
    M = np.array([G.path(b) - G.path(a) for _, (a, b) in G.noise]).reshape(len(G.noise), len(G.kernel_edges))
    return M


def _pivot_columns(M: np.ndarray):
    """Columns of ``M`` forming an invertible square block (greedy elimination)."""
    rows, cols = M.shape
    chosen = []
    for j in range(cols):
        trial = chosen + [j]
        if np.linalg.matrix_rank(M[:, trial]) == len(trial):
            chosen = trial
        if len(chosen) == rows:
            break
    if len(chosen) != rows:
        raise UnsupportedGraph("noise pairs impose dependent time constraints")
    return chosen


class GraphIntegral(NamedTuple):
    value: float
    stderr: float
    frozen_value: float
    gap: float
    method: str


def _heat_graph(G: GraphSpec, eps: float, fr: FrozenData, kappa: Callable, phi, n_qmc: int, seed: int):
    e2 = eps**2
    nk = len(G.kernel_edges)
    if G.noise_kind == "spatial" and nk == 1:
        t, wt = _panel_nodes(_graded_edges(0.0, 1.0, e2 / 4, breaks=(0.5,)), 24)
        val = np.sum(wt * kappa(t) * _spatial_factor(G, fr, t[:, None], eps))
        return float(val), 0.0, "quadrature"
    if G.noise_kind == "space-time" and nk == 2 and G.loops == 1:
        tau, taup, wt = _cherry_nodes(eps, kappa, phi)
        # the constraint pairs the two leaves; time order of the pair is symmetric
        val = np.sum(wt * _spatial_factor(G, fr, np.stack([tau, taup], axis=1), eps))
        return float(val), 0.0, "quadrature"
    return _qmc_graph(G, eps, fr, kappa, phi, n_qmc, seed)


def _qmc_graph(G: GraphSpec, eps: float, fr: FrozenData, kappa: Callable, phi, n_qmc: int, seed: int,
               n_rep: int = 8):
    """Randomised quasi-Monte Carlo over the time variables.

    Free lags use the logarithmic map ``l = eps^2 ((1 + eps^-2)^U - 1)``;
    for space-time noise one lag per noise pair is eliminated through
    ``t_a - t_b = eps^2 w`` with ``w`` drawn from ``Phi = phi * phi`` by
    inverse CDF. Returns the mean over ``n_rep`` scrambles and its standard error.
    """
    e2 = eps**2
    nk = len(G.kernel_edges)
    spacetime = G.noise_kind == "space-time"
    if spacetime:
        M = _time_constraints(G)
        piv = _pivot_columns(M)
        free = [j for j in range(nk) if j not in piv]
        Mp_inv = np.linalg.inv(M[:, piv])
        jac = 1.0 / abs(np.linalg.det(M[:, piv]))
        Phi = phi_autoconvolution(phi)
        wg = np.linspace(-2, 2, 4001)
        cdf = integrate.cumulative_trapezoid(Phi(wg), wg, initial=0.0)
        cdf /= cdf[-1]
    else:
        free, piv = list(range(nk)), []
    dim = len(free) + (len(piv) if spacetime else 0)
    L = np.log1p(1.0 / e2)
    reps = []
    for r in range(n_rep):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        U = stats.qmc.Sobol(dim, scramble=True, rng=rng).random(n_qmc)
        U = np.clip(U, 1e-15, 1 - 1e-15)
        lags = np.zeros((n_qmc, nk))
        lf = e2 * np.expm1(U[:, : len(free)] * L)
        lags[:, free] = lf
        weight = np.prod((lf + e2) * L * kappa(lf), axis=1)
        if spacetime:
            w = np.interp(U[:, len(free):], cdf, wg)
            rhs = e2 * w - lags[:, free] @ M[:, free].T
            lp = rhs @ Mp_inv.T
            lags[:, piv] = lp
            ok = np.all(lp > 0, axis=1)
            weight = weight * jac * np.where(ok, np.prod(kappa(np.where(lp > 0, lp, 0.0)), axis=1), 0.0)
            lags[~ok] = 1.0
        vals = weight * _spatial_factor(G, fr, lags, eps)
        reps.append(np.mean(vals))
    reps = np.asarray(reps)
    return float(reps.mean()), float(reps.std(ddof=1) / np.sqrt(n_rep)), "qmc"


# ---------------------------------------------------------------------------
# one-loop graphs with compact mollifier profiles
#
# Both one-loop shapes pair the mollifier autocorrelation
# rho~(y) = int rho(x* + y + w, x* + w... ) against a frozen Gaussian:
# cherry -> F(tau + tau'), noise-loop -> F(l), with F(s) = <rho~, G_s>.
# Frozen (translation-invariant) profiles are evaluated in free space on a
# local patch.  A variable profile only changes I through the difference of
# its periodic grid value and that of the frozen profile.

def _time_pairing(G: GraphSpec, eps: float, kappa: Callable, phi, F: Callable) -> float:
    if G.name == "cherry":
        tau, taup, wt = _cherry_nodes(eps, kappa, phi)
        return float(np.sum(wt * F(tau + taup)))
    if G.name == "noise-loop":
        t, wt = _panel_nodes(_graded_edges(0.0, 1.0, eps**2 / 4, breaks=(0.5,)), 24)
        return float(np.sum(wt * kappa(t) * F(t)))
    raise UnsupportedGraph(f"compact mollifier profiles are implemented for one-loop graphs, not {G.name!r}")


def _log_spline(nodes: np.ndarray, vals: np.ndarray) -> Callable:
    """Cubic spline in ``log s`` through ``vals``, constant outside ``nodes``."""
    from scipy.interpolate import CubicSpline

    spl = CubicSpline(np.log(nodes), vals, axis=0)
    return lambda s: spl(np.log(np.clip(s, nodes[0], nodes[-1])))


def _lag_nodes(n: int, n_s: int) -> np.ndarray:
    return np.geomspace(1.0 / (20 * n**2), 2.0, n_s)


def _lattice_mass(fr: FrozenData, h: float, s: np.ndarray, kmax: int = 3) -> np.ndarray:
    """``sum_{y in hZ^d} G_s(y) h^d`` by Poisson summation."""
    d = fr.d
    k = np.arange(-kmax, kmax + 1)
    K = np.stack(np.meshgrid(*[k] * d, indexing="ij"), axis=-1).reshape(-1, d)
    q = np.einsum("ki,ij,kj->k", K, fr.A, K)
    return np.exp(-4 * np.pi**2 * np.outer(s, q) / h**2).sum(axis=1)


def _free_one_loop(G: GraphSpec, eps: float, fr: FrozenData, profile: Callable, n: int, centre,
                   radius: float, kappa: Callable, phi, n_s: int = 96) -> float:
    """Free-space value for a translation-invariant ``profile`` sampled around ``centre``."""
    from scipy import signal

    d = fr.d
    h = 1.0 / n
    r = int(np.ceil(radius / h)) + 1
    w = np.arange(-r, r + 1) * h
    W = np.stack(np.meshgrid(*[w] * d, indexing="ij"), axis=-1)
    c = np.asarray(centre, dtype=float)
    prof = profile(c + W, np.broadcast_to(c, W.shape))
    auto = signal.fftconvolve(prof, prof[(slice(None, None, -1),) * d], mode="full") * h**d
    y = np.arange(-2 * r, 2 * r + 1) * h
    Y = np.stack(np.meshgrid(*[y] * d, indexing="ij"), axis=-1)
    q = np.einsum("...i,ij,...j->...", Y, fr.A_inv, Y).ravel()
    keep = auto.ravel() != 0
    q, a = q[keep], auto.ravel()[keep]
    nodes = _lag_nodes(n, n_s)
    F = np.array([fr.C * s ** (-d / 2) * np.dot(a, np.exp(-q / (4 * s))) * h**d for s in nodes])
    F /= _lattice_mass(fr, h, nodes)
    return _time_pairing(G, eps, kappa, phi, _log_spline(nodes, F))


def _grid_gaussians(fr: FrozenData, n: int, centre_index, lags: np.ndarray) -> np.ndarray:
    """Periodic frozen Gaussians centred at a grid point with unit discrete mass, shape ``(len(lags), n^d)``.

    Small lags sum a few real-space images, large lags use the Fourier series
    of the periodised Gaussian.
    """
    from levirenorm.parametrix import frozen_gaussian, grid_points, image_count

    d = fr.d
    pts = grid_points(d, n)
    centre = np.asarray(centre_index) / n
    k = np.fft.fftfreq(n, 1.0 / n)
    K = np.stack(np.meshgrid(*[k] * d, indexing="ij"), axis=-1)
    quad = np.einsum("...i,ij,...j->...", K, fr.A, K)
    amax = float(np.linalg.eigvalsh(fr.A)[-1])
    out = np.empty((len(lags), n**d))
    for i, s in enumerate(lags):
        if image_count(amax, s) <= 2:
            g = frozen_gaussian(fr, pts, s, centre, 0.0)
        else:
            g = np.fft.ifftn(np.exp(-4 * np.pi**2 * s * quad)).real
            g = np.roll(g, tuple(int(c) for c in centre_index), axis=tuple(range(d))).ravel()
        out[i] = g / g.sum()
    return out * n**d


def _periodic_one_loop(G: GraphSpec, eps: float, fr: FrozenData, profile: Callable, n: int, x_index,
                       radius: float, kappa: Callable, phi, n_s: int = 96) -> float:
    """Torus value for an arbitrary two-point ``profile`` through ``H_s = M^T g_s``."""
    from levirenorm.noise import profile_matrix

    d = fr.d
    hd = 1.0 / n**d
    M = profile_matrix(profile, d, n, radius)
    nodes = _lag_nodes(n, n_s)
    g = _grid_gaussians(fr, n, x_index, nodes)
    H = (M.T @ g.T).T
    if G.name == "cherry":
        gram = H @ H.T * hd
        tau, taup, wt = _cherry_nodes(eps, kappa, phi)
        B1 = _log_spline(nodes, np.eye(n_s))(tau)
        B2 = _log_spline(nodes, np.eye(n_s))(taup)
        return float(np.sum(wt[:, None] * (B1 @ gram) * B2))
    if G.name == "noise-loop":
        flat_x = int(np.ravel_multi_index(tuple(int(c) for c in x_index), (n,) * d))
        row = M[flat_x].toarray().ravel() / hd
        return _time_pairing(G, eps, kappa, phi, _log_spline(nodes, H @ row * hd))
    raise UnsupportedGraph(f"compact mollifier profiles are implemented for one-loop graphs, not {G.name!r}")


def _grid_index(z, n: int, d: int):
    x = np.asarray(z, dtype=float)[:d]
    return tuple(int(round(c * n)) % n for c in x)


def graph_frozen_integral(G, eps: float, frozen=None, scheme: str = "heat", field: Optional[CoefficientField] = None,
                          z=None, n: int = 128, kappa: Callable = default_kappa, phi=phi_t, rho=None,
                          n_qmc: int = 2**14, seed: int = 0) -> GraphIntegral:
    """Frozen-coefficient graph integral at ``z_star``.

    Kernel edges are ``C(z*) w^{(z*)}``. For ``scheme="heat"`` mollifier
    edges are heat kernels at lag ``eps^2`` and ``value`` is the frozen
    integral. For ``scheme="covariant"`` (needs ``field`` and ``z``)
    ``frozen_value`` uses the profile frozen at ``z*``, ``value`` the true
    covariant profile following ``A(x)``, and ``gap = |value - frozen_value|``.
    The covariant scheme is grid based (``n`` points per axis) and limited
    to the one-loop graphs.
    """
    G = graph(G) if isinstance(G, str) else G
    _menu_check(G)
    _check_eps(eps)
    if frozen is None:
        if field is None or z is None:
            raise ValueError("need frozen data or a field and a point")
        frozen = evaluate_frozen(field, z)
    fr = _frozen(frozen)
    if scheme == "heat":
        val, err, method = _heat_graph(G, eps, fr, kappa, phi, n_qmc, seed)
        return GraphIntegral(val, err, val, 0.0, method)
    if scheme == "covariant":
        from levirenorm.coefficients import constant_field
        from levirenorm.noise import covariant_profile

        if field is None or z is None:
            raise ValueError("the covariant scheme needs the field and the point")
        d = fr.d
        t = float(z[d]) if len(z) > d else 0.0
        idx = _grid_index(z, n, d)
        true_prof = covariant_profile(field, eps, rho, t)
        frozen_prof = covariant_profile(constant_field(fr.A), eps, rho, t)
        I0 = flat_graph_counterterm(G, eps, fr, frozen_prof, n, idx, kappa, phi)
        per = _periodic_one_loop(G, eps, fr, true_prof, n, idx, true_prof.radius, kappa, phi)
        per0 = _periodic_one_loop(G, eps, fr, frozen_prof, n, idx, frozen_prof.radius, kappa, phi)
        I = I0 + (per - per0)
        return GraphIntegral(I, 0.0, I0, abs(per - per0), "grid")
    raise ValueError(f"scheme must be 'heat' or 'covariant' here, got {scheme!r}; use flat_graph_counterterm")


def flat_graph_counterterm(G, eps: float, frozen, profile: Callable, n: int = 128, x_index=None,
                           kappa: Callable = default_kappa, phi=phi_t, radius: Optional[float] = None) -> float:
    """``I~_eps,G(A(z*))``: kernel edges frozen at ``frozen``, mollifier edges the profile ``rho_eps``.

    ``profile(x, zeta)`` must be translation invariant with support radius
    ``radius`` (default ``profile.radius``); it is sampled around the grid
    point ``x_index`` at spacing ``1/n``. The coefficient field enters only
    through ``frozen``.
    """
    G = graph(G) if isinstance(G, str) else G
    _menu_check(G)
    _check_eps(eps)
    fr = _frozen(frozen)
    d = fr.d
    radius = getattr(profile, "radius", None) if radius is None else radius
    if radius is None:
        raise ValueError("profile needs a support radius")
    idx = (0,) * d if x_index is None else tuple(int(c) for c in x_index)
    return _free_one_loop(G, eps, fr, profile, n, np.asarray(idx) / n, radius, kappa, phi)


# ---------------------------------------------------------------------------
# torus reference values and Monte-Carlo probes

def _periodic_heat_trace(fr: FrozenData, s: np.ndarray) -> np.ndarray:
    """``sum_m G_s(m)`` over integer images ``m``: the frozen Gaussian on the unit torus at zero displacement."""
    from levirenorm.parametrix import image_count, _image_offsets

    s = np.atleast_1d(np.asarray(s, dtype=float))
    amax = float(np.linalg.eigvalsh(fr.A)[-1])
    offs = _image_offsets(fr.d, image_count(amax, float(s.max())))
    q = np.einsum("ki,ij,kj->k", offs, fr.A_inv, offs)
    return fr.C * s ** (-fr.d / 2) * np.exp(-np.outer(1.0 / (4 * s), q)).sum(axis=1)


def periodic_cherry_integral(eps: float, frozen, graph_name: str = "cherry", kappa: Callable = default_kappa,
                             phi=phi_t) -> float:
    """Heat-scheme one-loop value with the frozen Gaussian periodised over the torus.

    This is the exact expectation sampled by :func:`mc_variance_probe` for
    constant coefficients: ``"cherry"`` gives ``E[Psi^2]`` for space-time
    noise, ``"noise-loop"`` gives ``E[xi_eps Psi]`` for spatial noise.
    """
    _check_eps(eps)
    fr = _frozen(frozen)
    e2 = eps**2
    if graph_name == "cherry":
        tau, taup, wt = _cherry_nodes(eps, kappa, phi)
        return float(np.sum(wt * _periodic_heat_trace(fr, tau + taup + 2 * e2)))
    if graph_name == "noise-loop":
        t, wt = _panel_nodes(_graded_edges(0.0, 1.0, e2 / 4, breaks=(2 * e2, 0.5)), 16)
        return float(np.sum(wt * kappa(t) * _periodic_heat_trace(fr, t + 2 * e2)))
    raise UnsupportedGraph(f"no torus reference for {graph_name!r}")


class ProbeTable(NamedTuple):
    """Per-probe-point Monte-Carlo second moments.

    ``points`` has shape ``(P, d)``; ``estimate`` and ``stderr`` have shape
    ``(P,)``; ``C`` holds ``C(x, t)`` at the points and ``reference`` the
    quadrature value of the same expectation (``nan`` when unavailable).
    """

    points: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    C: np.ndarray
    reference: np.ndarray
    n_samples: int
    eps: float
    tag: str


def _spectral_symbol(A: np.ndarray, n: int) -> np.ndarray:
    d = A.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    K = np.stack(np.meshgrid(*[k] * d, indexing="ij"), axis=-1)
    return 4 * np.pi**2 * np.einsum("...i,ij,...j->...", K, A, K)


def _spectral_apply(lam: np.ndarray, lag: float, W: np.ndarray) -> np.ndarray:
    d = lam.ndim
    axes = tuple(range(-d, 0))
    return np.fft.ifftn(np.exp(-lag * lam) * np.fft.fftn(W, axes=axes), axes=axes).real


def _probe_lags(eps: float, m: int = 8):
    e2 = eps**2
    return _panel_nodes(_graded_edges(0.0, 1.0, e2 / 4, breaks=(2 * e2, 0.5)), m)


def _low_mask(n: int, d: int, kmax: int = 1) -> np.ndarray:
    k = np.abs(np.fft.fftfreq(n, 1.0 / n))
    K = np.stack(np.meshgrid(*[k] * d, indexing="ij"), axis=0)
    return np.all(K <= kmax, axis=0)


def _white(seed: int, stream: int, b0: int, B: int, n: int, d: int) -> np.ndarray:
    """Unit-variance cell values for samples ``b0 .. b0 + B - 1``."""
    from levirenorm.noise import noise_cells

    return noise_cells(seed, stream, b0 * n**d, B * n**d).reshape((B,) + (n,) * d)


def _spectral_probe(a_hat: np.ndarray, b_hat: np.ndarray, n: int, n_samples: int, seed: int, stream: int,
                    batch: int, control: bool) -> np.ndarray:
    """Samples of ``f(x) g(x)`` with ``f^ = a^ W^``, ``g^ = b^ W^`` for grid white noise ``W``.

    With ``control`` the product of the ``|k|_inf <= 1`` parts is replaced by
    its exact mean, an unbiased control variate for the torus-scale modes.
    """
    d = a_hat.ndim
    axes = tuple(range(-d, 0))
    low = _low_mask(n, d)
    mean_low = float(np.sum((a_hat * b_hat)[low]))
    out = np.empty((n_samples,) + (n,) * d)
    for b0 in range(0, n_samples, batch):
        B = min(batch, n_samples - b0)
        What = np.fft.fftn(_white(seed, stream, b0, B, n, d) * np.sqrt(n**d), axes=axes)
        f = np.fft.ifftn(a_hat * What, axes=axes).real
        g = np.fft.ifftn(b_hat * What, axes=axes).real
        val = f * g
        if control:
            fl = np.fft.ifftn(np.where(low, a_hat * What, 0), axes=axes).real
            gl = np.fft.ifftn(np.where(low, b_hat * What, 0), axes=axes).real
            val = val - fl * gl + mean_low
        out[b0:b0 + B] = val
    return out


def _spectral_ready(field: CoefficientField) -> bool:
    return field.constant and field.b_fn is None and field.c_fn is None


def _gpam_probe(field: CoefficientField, eps: float, n: int, n_samples: int, seed: int, batch: int, control: bool):
    """Samples of ``xi_eps(x) Psi(x)``, ``xi_eps = Gamma_{eps^2} xi``, ``Psi = int kappa(s) Gamma_s xi_eps ds``."""
    from levirenorm.noise import _apply_factors

    d = field.d
    t, wt = _probe_lags(eps)
    wt = wt * default_kappa(t)
    lags = np.concatenate([[eps**2], t + eps**2])
    if _spectral_ready(field):
        lam = _spectral_symbol(field.a(np.zeros(d), 0.0), n)
        a_hat = np.exp(-eps**2 * lam)
        b_hat = np.tensordot(wt, np.exp(-np.multiply.outer(lags[1:], lam)), axes=1)
        return _spectral_probe(a_hat, b_hat, n, n_samples, seed, 0, batch, control)
    if field.x1_reduction is None:
        raise UnsupportedGraph("Monte-Carlo probes need constant or x1-reducible coefficients")
    from levirenorm.parametrix import build_levi, gamma_truncated

    K = gamma_truncated(build_levi(field, n, lags, N=2))
    hd = n ** (-d)
    apply = lambda j, W: _apply_factors([(dd, v[j]) for dd, v in K.factors], W, d, n) * hd
    out = np.empty((n_samples,) + (n,) * d)
    for b0 in range(0, n_samples, batch):
        B = min(batch, n_samples - b0)
        W = _white(seed, 0, b0, B, n, d) * np.sqrt(n**d)
        xi = apply(0, W)
        psi = sum(w * apply(j + 1, W) for j, w in enumerate(wt))
        out[b0:b0 + B] = xi * psi
    return out


def _phi42_probe(field: CoefficientField, eps: float, n: int, n_samples: int, seed: int, batch: int, phi,
                 control: bool):
    """Samples of ``Psi(x)^2`` for the propagated space-time noise, drawn exactly in law mode by mode."""
    if not _spectral_ready(field):
        raise UnsupportedGraph("the space-time probe is implemented for constant coefficients")
    d = field.d
    lam = _spectral_symbol(field.a(np.zeros(d), 0.0), n)
    tau, taup, wt = _cherry_nodes(eps, default_kappa, phi)
    s = tau + taup + 2 * eps**2
    uniq, inv = np.unique(np.round(lam.ravel(), 9), return_inverse=True)
    var = np.zeros_like(uniq)
    for c0 in range(0, uniq.size, 256):
        var[c0:c0 + 256] = np.exp(-np.outer(uniq[c0:c0 + 256], s)) @ wt
    amp = np.sqrt(np.clip(var[inv], 0.0, None)).reshape(lam.shape)
    return _spectral_probe(amp, amp, n, n_samples, seed, 1, batch, control)


def mc_variance_probe(tag: str, eps: float, field: CoefficientField, scheme: str = "heat", n_samples: int = 2000,
                      points=None, n: int = 64, seed: int = 0, t: float = 0.0, pool: str = "x1",
                      phi=phi_t, batch: int = 100, control: bool = True) -> ProbeTable:
    """Monte-Carlo second moment of the mollified and propagated noise at probe points.

    ``tag="gPAM-Xi2"`` samples ``E[xi_eps(x) Psi(x)]`` with spatial noise,
    ``tag="phi4_2"`` samples ``E[Psi(x)^2]`` with space-time noise, where
    ``Psi = int kappa(s) Gamma_s xi_eps ds`` and ``xi_eps`` is heat-kernel
    mollified. ``points`` are grid indices (shape ``(P, d)``, default 16
    points along the first axis). With ``pool="x1"`` and a field that only
    varies in ``x_1`` every estimate averages the grid line through the
    point, which leaves its mean unchanged; ``pool=None`` uses the point
    alone. For constant coefficients the noise is propagated spectrally and
    ``control`` swaps the ``|k|_inf <= 1`` Fourier part of each sample for
    its exact mean, which removes the torus-scale variance without bias.
    Standard errors are across samples.
    """
    if scheme != "heat":
        raise ValueError("Monte-Carlo probes use the heat-kernel scheme")
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    _check_eps(eps)
    from levirenorm.errors import UnresolvableEpsilon

    if eps < 2.0 / n:
        raise UnresolvableEpsilon(f"eps = {eps:g} is not resolved by n = {n}")
    d = field.d
    if points is None:
        points = np.zeros((16, d), dtype=int)
        points[:, 0] = np.arange(16) * n // 16
    points = np.atleast_2d(np.asarray(points, dtype=int)) % n
    if tag == "gPAM-Xi2":
        samples = _gpam_probe(field, eps, n, n_samples, seed, batch, control)
        ref_graph = "noise-loop"
    elif tag == "phi4_2":
        samples = _phi42_probe(field, eps, n, n_samples, seed, batch, phi, control)
        ref_graph = "cherry"
    else:
        raise ValueError(f"no probe for {tag!r}")
    poolable = pool == "x1" and (field.constant or field.x1_reduction is not None)
    est, err, C, ref = [], [], [], []
    for p in points:
        if poolable:
            v = samples[(slice(None), int(p[0])) + (slice(None),) * (d - 1)].reshape(n_samples, -1).mean(axis=1)
        else:
            v = samples[(slice(None),) + tuple(int(c) for c in p)]
        est.append(v.mean())
        err.append(v.std(ddof=1) / np.sqrt(n_samples))
        fz = evaluate_frozen(field, tuple(p / n) + (t,))
        C.append(fz.C)
        ref.append(periodic_cherry_integral(eps, fz, ref_graph, phi=phi) if field.constant else np.nan)
    return ProbeTable(points / n, np.array(est), np.array(err), np.array(C), np.array(ref), n_samples, eps, tag)


# ---------------------------------------------------------------------------
# cancellation checks

def reflection_cross_term(state, p: int = 0, lags: Optional[Sequence[float]] = None) -> np.ndarray:
    """Normalised cross term ``|sum_eta Z0(eta; zeta) Zbar_1(eta; zeta)| / sum_eta |Z0 Zbar_1|``.

    ``Z0`` is the Gaussian frozen at the source ``zeta`` (even about it) and
    ``Zbar_1`` the reflection-odd part of ``Z_1`` at stored pair ``p`` from a
    Levi state (pass the adjoint state for the adjoint kernels).  Returns
    the worst value over sources for each ``Z0`` lag in ``lags`` (default:
    the pair lag and twice it).
    """
    from levirenorm.parametrix import kernel_matrices, reflection_split_Z1

    zbar, _ = reflection_split_Z1(state, p)
    fine, out = state._grids_cached()
    srcs = fine[out]
    lag_p = float(state.pairs[p][0] - state.pairs[p][1])
    lags = (lag_p, 2 * lag_p) if lags is None else lags
    res = []
    for lag in lags:
        Z0 = kernel_matrices(state.active, srcs, float(lag), srcs, 0.0)["Z"]
        prod = Z0 * zbar
        res.append(float(np.max(np.abs(prod.sum(axis=0)) / np.abs(prod).sum(axis=0))))
    return np.array(res)


def kpz_cross_term(field: CoefficientField, x: float = 0.0, t: float = 0.0, lags=(0.01, 0.05, 0.2),
                   n: int = 256) -> float:
    """Worst normalised cross term ``|sum_eta Z_{0;1}(eta, s) R_{0,1}(eta, s')| / sum |...|`` over lag pairs.

    ``Z_{0;1}`` is the odd leading part of the ``x``-gradient of the adjoint
    frozen kernel and ``R_{0,1}`` the even remainder; ``eta`` runs over a
    grid symmetric about ``x``.
    """
    from levirenorm.parametrix import gradient_split_Z0

    if field.d != 1:
        raise ValueError("the KPZ cross term lives in d = 1")
    eta = (x + np.arange(n) / n)[:, None]
    parts = {s: gradient_split_Z0(field, eta, t - s, np.array([x]), t) for s in lags}
    worst = 0.0
    for s in lags:
        for sp in lags:
            prod = parts[s][0][:, 0] * parts[sp][1][:, 0]
            worst = max(worst, abs(prod.sum()) / np.abs(prod).sum())
    return worst


# ---------------------------------------------------------------------------
# KPZ logarithmic pair

class KPZLogFit(NamedTuple):
    """Ladder fit of the KPZ logarithmic pair.

    ``combined`` is ``I(sunset) + 4 I(sunset-offroot)`` on the ladder with
    every kernel edge differentiated; ``fit`` regresses it on ``|log eps|``
    and ``coefficient = fit.slope * a^4``. ``cancels`` flags a combined slope
    below ``rtol`` times the separate slopes (soft check). The double cherry,
    the only menu shape carrying six differentiated edges, is fitted
    alongside as ``double_cherry``.
    """

    eps: np.ndarray
    values: Dict[str, np.ndarray]
    combined: np.ndarray
    fit: LadderFit
    coefficient: float
    cancels: bool
    double_cherry: LadderFit


KPZ_LOG_WEIGHTS = {"sunset": 1.0, "sunset-offroot": 4.0}


def kpz_log_coefficient(frozen, ladder: Sequence[float] = LADDER, kappa: Callable = default_kappa, phi=phi_t,
                        n_qmc: int = 2**14, seed: int = 0, rtol: float = 0.1) -> KPZLogFit:
    """Fit the logarithmic KPZ coefficient from the two five-edge graphs (d=1)."""
    fr = _frozen(frozen)
    if fr.d != 1:
        raise ValueError("KPZ lives in d = 1")
    eps = np.asarray(ladder, dtype=float)
    values = {}
    for name in list(KPZ_LOG_WEIGHTS) + ["double-cherry"]:
        G = graph(name, gradient=True)
        values[name] = np.array([graph_frozen_integral(G, e, fr, kappa=kappa, phi=phi, n_qmc=n_qmc, seed=seed).value
                                 for e in eps])
    combined = sum(w * values[k] for k, w in KPZ_LOG_WEIGHTS.items())
    fit = fit_ladder(eps, combined, "log") if np.any(combined) else LadderFit(0.0, 0.0, float("nan"), "log")
    scale = sum(abs(w * fit_ladder(eps, values[k], "log").slope) if np.any(values[k]) else 0.0
                for k, w in KPZ_LOG_WEIGHTS.items())
    cancels = abs(fit.slope) <= rtol * scale + 1e-12
    a = float(fr.A[0, 0])
    return KPZLogFit(eps, values, combined, fit, fit.slope * a**4, bool(cancels),
                     fit_ladder(eps, values["double-cherry"], "log"))


# ---------------------------------------------------------------------------
# counterterm functions

_INVERSE_TAGS = ("phi4_3-cherry", "KPZ-cherry")
_ONE_LOOP_TAGS = {"gPAM-Xi2": ("noise-loop", 2.0), "phi4_2": ("cherry", 1.0)}


@dataclass
class CountertermFunction:
    """Counterterm ``(x, t, eps) -> value`` for one equation tag and scheme.

    ``evaluate`` returns ``(total, divergent, beta)``; the divergent part
    depends only on ``eps`` and the frozen data at ``(x, t)``. The heat
    scheme covers every tag; ``"covariant"`` and ``"flat"`` cover the
    one-loop tags ``gPAM-Xi2`` and ``phi4_2`` with ``profile(eps, d)``
    building the flat profile (default tensor bump) and ``n`` the sampling
    grid.
    """

    tag: str
    field: CoefficientField = dc_field(default_factory=lambda: identity_field(2))
    scheme: str = "heat"
    kappa: Callable = default_kappa
    phi: Callable = phi_t
    ij: Tuple[int, int] = (0, 0)
    profile: Optional[Callable] = None
    n: int = 128
    ladder_eps: Sequence[float] = LADDER

    def __post_init__(self):
        if self.tag not in EQUATION_TAGS:
            raise ValueError(f"unknown equation tag {self.tag!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme != "heat" and self.tag not in _ONE_LOOP_TAGS:
            raise UnsupportedGraph(f"{self.tag} is only available in the heat scheme")
        self._kpz_log = {}

    @property
    def coordinate(self) -> str:
        return "inverse" if self.tag in _INVERSE_TAGS else "log"

    def frozen(self, x, t: float = 0.0) -> FrozenData:
        return evaluate_frozen(self.field, tuple(np.atleast_1d(np.asarray(x, dtype=float))) + (float(t),))

    def evaluate(self, x, t: float, eps: float) -> CountertermValue:
        _check_eps(eps)
        fr = self.frozen(x, t)
        if self.scheme != "heat":
            return self._one_loop(fr, x, t, eps)
        tag = self.tag
        if tag == "gPAM-Xi2":
            return counterterm_gpam_noise(eps, fr, self.kappa)
        if tag == "gPAM-d2":
            return counterterm_gpam_gradient(eps, fr, *self.ij, kappa=self.kappa)
        if tag == "phi4_2":
            return counterterm_phi4(eps, fr, self.kappa, self.phi, d=2)
        if tag == "phi4_3-cherry":
            return counterterm_phi4(eps, fr, self.kappa, self.phi, d=3)
        if tag == "phi4_3-sunset":
            return counterterm_phi43_sunset(eps, fr, self.kappa, self.phi, self.ladder_eps)
        if tag == "KPZ-cherry":
            return counterterm_kpz(eps, fr, self.phi, self.kappa)
        key = float(fr.A[0, 0])
        if key not in self._kpz_log:
            self._kpz_log[key] = kpz_log_coefficient(fr, self.ladder_eps, self.kappa, self.phi)
        lf = self._kpz_log[key]
        G = graph("sunset", gradient=True)
        G2 = graph("sunset-offroot", gradient=True)
        total = sum(w * graph_frozen_integral(g, eps, fr, kappa=self.kappa, phi=self.phi).value
                    for g, w in ((G, KPZ_LOG_WEIGHTS["sunset"]), (G2, KPZ_LOG_WEIGHTS["sunset-offroot"])))
        return _value(total, lf.fit.slope * abs(np.log(eps)))

    def _one_loop(self, fr: FrozenData, x, t: float, eps: float) -> CountertermValue:
        from levirenorm.noise import tensor_bump_profile

        name, mult = _ONE_LOOP_TAGS[self.tag]
        if fr.d != 2:
            raise ValueError("the one-loop tags live in d = 2")
        idx = _grid_index(np.atleast_1d(x), self.n, fr.d)
        if self.scheme == "covariant":
            from levirenorm.coefficients import constant_field
            from levirenorm.noise import covariant_profile

            # the frozen_value of graph_frozen_integral, without the grid gap
            prof = covariant_profile(constant_field(fr.A), eps, None, t)
        else:
            prof = (self.profile or tensor_bump_profile)(eps, fr.d)
        total = flat_graph_counterterm(name, eps, fr, prof, self.n, idx, self.kappa, self.phi)
        return _value(total, mult * fr.C * abs(np.log(eps)))

    def __call__(self, x, t: float, eps: float) -> float:
        return self.evaluate(x, t, eps).total

    def divergent(self, x, t: float, eps: float) -> float:
        return self.evaluate(x, t, eps).divergent

    def beta(self, x, t: float, eps: float) -> float:
        return self.evaluate(x, t, eps).beta

    def ladder(self, x, t: float = 0.0, eps: Optional[Sequence[float]] = None):
        """Values on an eps-ladder and their fit against the divergence coordinate."""
        eps = self.ladder_eps if eps is None else eps
        vals = [self.evaluate(x, t, e) for e in eps]
        return vals, fit_ladder(eps, [v.total for v in vals], self.coordinate)
