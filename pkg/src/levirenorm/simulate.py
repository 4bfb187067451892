"""Desk-scale solvers for the renormalised g-PAM, phi^4_2 and KPZ equations.

One step is semi-implicit: the variable-coefficient operator ``L`` is taken
backward in time on a finite-difference stencil, the nonlinearity, the
counterterms and the noise explicitly at the old time level.  The same
white-noise cells are reused for every ``eps`` and every scheme, so
trajectories at different regularisations are coupled pathwise.
"""

from __future__ import annotations

import dataclasses
import time as _time
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from levirenorm.coefficients import CoefficientField, identity_field
from levirenorm.errors import BlowUp, ConfigError, SolveFailure
from levirenorm.noise import (
    CovariantMollifier,
    FlatMollifier,
    HeatKernelMollifier,
    NoiseField,
    phi_t,
    sample_white_noise,
    tensor_bump_profile,
)

__all__ = [
    "EQUATIONS",
    "EquationConfig",
    "SimState",
    "Trajectory",
    "CauchyTable",
    "ComparisonTable",
    "operator_matrix",
    "stability_bound",
    "counterterm_grid",
    "initial_state",
    "step",
    "solve",
    "cauchy_distance",
    "epsilon_sweep",
    "mollifier_comparison",
]

EQUATIONS = ("gPAM", "phi4_2", "KPZ")
_DIMENSION = {"gPAM": 2, "phi4_2": 2, "KPZ": 1}

# Noise time cells are indexed from this many seconds before t = 0, so the
# time average of the noise near t = 0 uses the same cells for every eps < 1/2.
_NOISE_LEAD = 0.25


@dataclass
class EquationConfig:
    """Everything that determines one solve.

    ``counterterm`` is ``"on"`` (renormalisation functions from
    :mod:`levirenorm.renorm` for the chosen scheme), ``"off"``, a dict of
    custom constants ``alpha`` (keys ``"Xi2"``, ``"d2"``, ``"phi"``,
    ``"kpz"``, ``"kpz_log"``; each multiplies the local prefactor of its
    term) or a callable ``(tag, points, t, eps) -> values`` on grid points.

    g-PAM uses ``g(u) = g0 + g1 u`` and ``f_ij(u) = f[i][j]`` unless the
    callables ``g``, ``g_prime`` and ``f_fn`` are given.
    """

    equation: str = "phi4_2"
    field: Optional[CoefficientField] = None
    n: int = 64
    dt: float = 1.0 / 1024
    T: float = 0.25
    eps: float = 0.1
    scheme: str = "heat"
    counterterm: Union[str, dict, Callable] = "on"
    seed: int = 0
    u0: Union[float, np.ndarray] = 0.0
    noise: bool = True
    g0: float = 1.0
    g1: float = 1.0
    f: Optional[Sequence[Sequence[float]]] = None
    g: Optional[Callable] = None
    g_prime: Optional[Callable] = None
    f_fn: Optional[Callable] = None
    nonlinearity: bool = True
    guard: float = 1e6
    save_every: int = 1
    phi: Callable = phi_t
    profile: Optional[Callable] = None
    n_layers: int = 2

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ConfigError(f"unknown equation {self.equation!r}; choose from {EQUATIONS}", "equation")
        if self.field is None:
            self.field = identity_field(_DIMENSION[self.equation])
        if self.field.d != _DIMENSION[self.equation]:
            raise ConfigError(f"{self.equation} needs d = {_DIMENSION[self.equation]}", "field")
        for name in ("dt", "T", "eps", "guard"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", name)
        if self.eps >= 0.5:
            raise ConfigError("must lie in (0, 1/2)", "eps")
        if self.n < 8:
            raise ConfigError("need at least 8 grid points per axis", "n")
        if self.save_every < 1:
            raise ConfigError("must be >= 1", "save_every")
        if self.scheme not in ("heat", "covariant", "flat"):
            raise ConfigError(f"unknown scheme {self.scheme!r}", "scheme")
        if isinstance(self.counterterm, str) and self.counterterm not in ("on", "off"):
            raise ConfigError("must be 'on', 'off', a dict of constants or a callable", "counterterm")
        if self.eps < 2.0 / self.n:
            raise ConfigError(f"eps = {self.eps:g} is below two grid cells", "eps")
        if self.equation != "gPAM" and self.eps**2 < self.dt:
            raise ConfigError(f"eps^2 = {self.eps**2:g} below dt = {self.dt:g}", "dt")

    @property
    def d(self) -> int:
        return self.field.d

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def replace(self, **kw) -> "EquationConfig":
        return dataclasses.replace(self, **kw)

    def snapshot(self) -> dict:
        """Plain-data description (callables by name) for manifests."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, CoefficientField):
                v = {"name": v.name, "params": dict(v.params), "d": v.d}
            elif isinstance(v, np.ndarray):
                v = {"array_shape": list(v.shape)}
            elif callable(v):
                v = getattr(v, "__name__", repr(v))
            out[f.name] = v
        return out


# ---------------------------------------------------------------------------
# discrete operator

def _grid(d: int, n: int) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(n)] * d, indexing="ij"), -1).reshape(-1, d)
    return idx


def operator_matrix(field: CoefficientField, n: int, t: float = 0.0) -> sparse.csr_matrix:
    """Sparse ``L = sum a_ij d_i d_j + sum b_i d_i + c`` on the periodic grid.

    Mixed derivatives use the positive-type seven-point form (diagonal
    neighbours along the sign of ``a_ij``), drifts central differences.
    """
    d = field.d
    h = 1.0 / n
    mi = _grid(d, n)
    x = mi * h
    N = n**d
    A = field.a(x, t)
    B = field.b(x, t) if field.has_drift else np.zeros((N, d))
    c = field.c(x, t) if field.has_potential else np.zeros(N)
    rows, cols, vals = [], [], []
    centre = c.astype(float).copy()

    def add(offset, w):
        j = np.ravel_multi_index(tuple(((mi + offset) % n).T), (n,) * d)
        rows.append(np.arange(N))
        cols.append(j)
        vals.append(w)

    for i in range(d):
        e = np.zeros(d, dtype=int)
        e[i] = 1
        axis = A[:, i, i] / h**2
        for j in range(d):
            if j != i:
                axis = axis - np.abs(A[:, i, j]) / h**2
        add(e, axis + B[:, i] / (2 * h))
        add(-e, axis - B[:, i] / (2 * h))
        centre -= 2 * axis
    for i in range(d):
        for j in range(i + 1, d):
            ei = np.zeros(d, dtype=int)
            ej = np.zeros(d, dtype=int)
            ei[i], ej[j] = 1, 1
            aij = A[:, i, j]
            pos, neg = np.clip(aij, 0, None) / h**2, np.clip(-aij, 0, None) / h**2
            add(ei + ej, pos)
            add(-ei - ej, pos)
            add(ei - ej, neg)
            add(-ei + ej, neg)
            centre -= 2 * (pos + neg)
    rows.append(np.arange(N))
    cols.append(np.arange(N))
    vals.append(centre)
    M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    M.sum_duplicates()
    return M


def _check_max_principle(M: sparse.csr_matrix):
    off = M - sparse.diags(M.diagonal())
    if off.nnz and off.data.min() < -1e-12:
        raise ConfigError("stencil has negative off-diagonal weights; refine the grid or reduce the "
                          "off-diagonal diffusion / drift", "n")


# ---------------------------------------------------------------------------
# noise

_KERNELS: Dict[tuple, tuple] = {}


def _heat_kernel(field: CoefficientField, n: int, eps: float, n_layers: int):
    key = (id(field), n, float(eps), n_layers)
    hit = _KERNELS.get(key)
    if hit is not None and hit[0] is field:
        return hit[1]
    from levirenorm.parametrix import build_levi, gamma_truncated

    K = gamma_truncated(build_levi(field, n, np.array([eps**2]), N=n_layers), n_layers)
    _KERNELS[key] = (field, K)
    return K


def _mollifier(cfg: EquationConfig):
    if cfg.scheme == "heat":
        return HeatKernelMollifier(cfg.eps, field=cfg.field, phi=cfg.phi,
                                   kernel=_heat_kernel(cfg.field, cfg.n, cfg.eps, cfg.n_layers))
    if cfg.scheme == "covariant":
        return CovariantMollifier(cfg.eps, field=cfg.field, phi=cfg.phi)
    profile = (cfg.profile or tensor_bump_profile)(cfg.eps, cfg.d)
    return FlatMollifier(profile, eps=cfg.eps, phi=cfg.phi)


def _noise_slab(cfg: EquationConfig) -> Tuple[NoiseField, int]:
    """Space-time noise around ``[0, T]`` and the slab index of the first step."""
    lead = int(np.ceil(_NOISE_LEAD / cfg.dt)) + 1
    margin = int(np.ceil(cfg.eps**2 / cfg.dt)) + 1
    full = sample_white_noise("space-time", cfg.d, cfg.n, cfg.seed, stream=1, m=cfg.n_steps + 2 * margin,
                              dt=cfg.dt, k0=lead - margin)
    return full, margin


def mollified_noise(cfg: EquationConfig) -> np.ndarray:
    """``xi_eps`` on the grid: one slice for spatial noise, one slice per step for space-time noise."""
    if cfg.equation == "gPAM":
        xi = sample_white_noise("spatial", cfg.d, cfg.n, cfg.seed, stream=0)
        return _mollifier(cfg).fit(xi).transform(xi)
    xi, margin = _noise_slab(cfg)
    out = _mollifier(cfg).fit(xi).transform(xi)
    return out[margin:margin + cfg.n_steps]


# ---------------------------------------------------------------------------
# counterterms

_CT_CACHE: Dict[tuple, float] = {}


def _a_key(A: np.ndarray) -> tuple:
    return tuple(np.round(np.asarray(A, dtype=float).ravel(), 12))


def _renorm_value(tag: str, scheme: str, eps: float, A: np.ndarray, cfg: EquationConfig) -> float:
    """Counterterm at frozen matrix ``A``; memoised since it depends on nothing else."""
    from levirenorm import renorm
    from levirenorm.coefficients import FrozenData, constant_field

    key = (tag, scheme, float(eps), _a_key(A), id(cfg.phi), id(cfg.profile))
    if key in _CT_CACHE:
        return _CT_CACHE[key]
    fr = FrozenData.from_matrix(A)
    if tag == "Xi2":
        if scheme == "heat":
            v = renorm.counterterm_gpam_noise(eps, fr).total
        else:
            v = renorm.CountertermFunction("gPAM-Xi2", constant_field(A), scheme=scheme, phi=cfg.phi,
                                           profile=cfg.profile, n=cfg.n)(np.zeros(2), 0.0, eps)
    elif tag.startswith("d2"):
        if scheme != "heat":
            from levirenorm.errors import UnsupportedGraph

            raise UnsupportedGraph("the gradient counterterm is available in the heat scheme only")
        i, j = int(tag[3]), int(tag[5])
        v = renorm.counterterm_gpam_gradient(eps, fr, i, j).total
    elif tag == "phi":
        if scheme == "heat":
            v = renorm.counterterm_phi4(eps, fr, phi=cfg.phi, d=2).total
        else:
            v = renorm.CountertermFunction("phi4_2", constant_field(A), scheme=scheme, phi=cfg.phi,
                                           profile=cfg.profile, n=cfg.n)(np.zeros(2), 0.0, eps)
    elif tag == "kpz":
        if scheme != "heat":
            from levirenorm.errors import UnsupportedGraph

            raise UnsupportedGraph("KPZ counterterms are available in the heat scheme only")
        v = renorm.counterterm_kpz(eps, fr, phi=cfg.phi).total
    elif tag == "kpz_log":
        # the combined log pair scales like a^-4; evaluate it once at a = 1
        base = (tag, scheme, float(eps), "unit", id(cfg.phi))
        if base not in _CT_CACHE:
            cf = renorm.CountertermFunction("KPZ-log", constant_field(np.eye(1)), phi=cfg.phi)
            _CT_CACHE[base] = cf(np.zeros(1), 0.0, eps)
        v = _CT_CACHE[base] * float(A[0, 0]) ** -4
    else:
        raise ValueError(tag)
    _CT_CACHE[key] = float(v)
    return float(v)


def _prefactor(tag: str, A: np.ndarray) -> float:
    d = A.shape[0]
    C = (4 * np.pi) ** (-d / 2) / np.sqrt(np.linalg.det(A))
    if tag in ("Xi2", "phi"):
        return C
    if tag.startswith("d2"):
        return C * np.linalg.inv(A)[int(tag[3]), int(tag[5])]
    if tag == "kpz":
        return float(A[0, 0]) ** -1.5
    if tag == "kpz_log":
        return float(A[0, 0]) ** -4
    raise ValueError(tag)


def counterterm_grid(cfg: EquationConfig, tag: str, t: float = 0.0) -> np.ndarray:
    """Counterterm ``tag`` at every grid point at time ``t`` (flat array).

    Tags: ``"Xi2"``, ``"d2_i_j"`` (g-PAM), ``"phi"`` (phi^4_2), ``"kpz"``,
    ``"kpz_log"`` (KPZ). For the renormalisation functions this returns
    the total including the local prefactor (``C``, ``C a^{ij}``,
    ``a^{-3/2}`` or ``a^{-4}``).
    """
    pts = _grid(cfg.d, cfg.n) / cfg.n
    N = pts.shape[0]
    mode = cfg.counterterm
    if isinstance(mode, str) and mode == "off":
        return np.zeros(N)
    if callable(mode):
        return np.asarray(mode(tag, pts, t, cfg.eps), dtype=float).reshape(N)
    A = cfg.field.a(pts, t)
    keys = [_a_key(a) for a in A]
    uniq = {}
    for k, a in zip(keys, A):
        if k not in uniq:
            if isinstance(mode, dict):
                alpha = float(mode.get(tag.split("_")[0] if tag.startswith("d2") else tag, 0.0))
                uniq[k] = alpha * _prefactor(tag, a)
            else:
                uniq[k] = _renorm_value(tag, cfg.scheme, cfg.eps, a, cfg)
    return np.array([uniq[k] for k in keys])


def _ct_tags(cfg: EquationConfig) -> List[str]:
    if cfg.equation == "phi4_2":
        return ["phi"]
    if cfg.equation == "KPZ":
        return ["kpz", "kpz_log"]
    tags = ["Xi2"]
    F = _f_matrix(cfg)
    if cfg.f_fn is not None or (F is not None and np.any(F)):
        tags += [f"d2_{i}_{j}" for i in range(2) for j in range(2)]
    return tags


def _f_matrix(cfg):
    return None if cfg.f is None else np.asarray(cfg.f, dtype=float).reshape(2, 2)


# ---------------------------------------------------------------------------
# stepping

@dataclass
class SimState:
    """Solver state at one time level (``u`` flat over the grid)."""

    u: np.ndarray
    t: float
    k: int
    noise: np.ndarray
    counterterms: Dict[str, np.ndarray]
    solver: object
    matrix: sparse.csr_matrix


def stability_bound(cfg: EquationConfig, counterterms: Optional[Dict[str, np.ndarray]] = None,
                    u_scale: Optional[float] = None) -> float:
    """Largest ``dt`` for which the explicit linear reaction terms stay contractive.

    The implicit part is unconditionally stable; the explicit part needs
    ``dt * rate <= 1`` with ``rate`` the largest linear growth rate
    (``3 alpha C`` for phi^4_2, ``alpha C g1^2`` for g-PAM, plus the cubic
    term at the initial amplitude).
    """
    cts = counterterms if counterterms is not None else {t: counterterm_grid(cfg, t) for t in _ct_tags(cfg)}
    u_scale = float(np.max(np.abs(cfg.u0))) if u_scale is None else u_scale
    rate = 0.0
    if cfg.equation == "phi4_2":
        rate = 3 * float(np.max(np.abs(cts["phi"]))) + (3 * u_scale**2 if cfg.nonlinearity else 0.0)
    elif cfg.equation == "gPAM":
        rate = float(np.max(np.abs(cts["Xi2"]))) * abs(cfg.g1) ** 2
    return np.inf if rate == 0 else 1.0 / rate


def _solver(M: sparse.csr_matrix, dt: float):
    N = M.shape[0]
    lu = splinalg.splu((sparse.identity(N, format="csc") - dt * M).tocsc())
    return lu


def initial_state(cfg: EquationConfig) -> SimState:
    """Assemble the operator, noise and counterterms and check the step size."""
    M = operator_matrix(cfg.field, cfg.n, 0.0)
    _check_max_principle(M)
    cts = {t: counterterm_grid(cfg, t) for t in _ct_tags(cfg)}
    bound = stability_bound(cfg, cts)
    if cfg.dt > bound:
        raise ConfigError(f"dt = {cfg.dt:g} exceeds the explicit stability bound {bound:g}", "dt")
    N = cfg.n**cfg.d
    u = np.broadcast_to(np.asarray(cfg.u0, dtype=float), (cfg.n,) * cfg.d).reshape(N).copy()
    if cfg.noise:
        xi = mollified_noise(cfg)
        noise = xi.reshape(xi.shape[0], N) if cfg.equation != "gPAM" else xi.reshape(N)
    else:
        noise = np.zeros(N) if cfg.equation == "gPAM" else np.zeros((cfg.n_steps, N))
    return SimState(u=u, t=0.0, k=0, noise=noise, counterterms=cts, solver=_solver(M, cfg.dt), matrix=M)


def _central_gradient(u: np.ndarray, d: int, n: int) -> List[np.ndarray]:
    U = u.reshape((n,) * d)
    return [((np.roll(U, -1, axis=i) - np.roll(U, 1, axis=i)) * (n / 2.0)).ravel() for i in range(d)]


def _reaction(cfg: EquationConfig, state: SimState) -> np.ndarray:
    u = state.u
    cts = state.counterterms
    if cfg.equation == "phi4_2":
        out = 3 * cts["phi"] * u
        if cfg.nonlinearity:
            out = out - u**3
        return out + state.noise[state.k]
    if cfg.equation == "KPZ":
        out = -cts["kpz"] - cts["kpz_log"] + state.noise[state.k]
        if cfg.nonlinearity:
            out = out + _central_gradient(u, 1, cfg.n)[0] ** 2
        return out
    g = cfg.g(u) if cfg.g is not None else cfg.g0 + cfg.g1 * u
    gp = cfg.g_prime(u) if cfg.g_prime is not None else np.full_like(u, cfg.g1)
    out = g * (state.noise - cts["Xi2"] * gp)
    if cfg.nonlinearity and len(cts) > 1:
        grad = _central_gradient(u, 2, cfg.n)
        F = _f_matrix(cfg)
        for i in range(2):
            for j in range(2):
                fij = cfg.f_fn(i, j, u) if cfg.f_fn is not None else F[i, j]
                out = out + fij * (grad[i] * grad[j] - cts[f"d2_{i}_{j}"] * g**2)
    return out


def step(state: SimState, cfg: EquationConfig) -> SimState:
    """Advance one time step; raises :class:`BlowUp` past the guard."""
    if not np.all(np.isfinite(state.u)):
        raise SolveFailure(f"non-finite state at t = {state.t:g}")
    t_new = state.t + cfg.dt
    solver, M = state.solver, state.matrix
    if cfg.field.time_dependent:
        M = operator_matrix(cfg.field, cfg.n, t_new)
        _check_max_principle(M)
        solver = _solver(M, cfg.dt)
    rhs = state.u + cfg.dt * _reaction(cfg, state)
    u = solver.solve(rhs)
    if not np.all(np.isfinite(u)):
        raise SolveFailure(f"linear solve returned non-finite values at t = {t_new:g}")
    if np.max(np.abs(u)) > cfg.guard:
        raise BlowUp(f"sup|u| exceeded {cfg.guard:g} at t = {t_new:g}")
    return dataclasses.replace(state, u=u, t=t_new, k=state.k + 1, solver=solver, matrix=M)


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    """Saved states ``u[k]`` at ``times[k]`` with per-save diagnostics."""

    times: np.ndarray
    u: np.ndarray
    sup: np.ndarray
    energy: np.ndarray
    blowup: bool = False
    blowup_time: Optional[float] = None
    wall_time: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def window(self, lo: float, hi: float) -> np.ndarray:
        sel = (self.times >= lo - 1e-12) & (self.times <= hi + 1e-12)
        return self.u[sel]


def solve(cfg: EquationConfig) -> Trajectory:
    """Integrate to ``T`` or until the blow-up guard trips (flagged, not raised)."""
    t0 = _time.perf_counter()
    state = initial_state(cfg)
    hd = cfg.h**cfg.d
    times, us = [0.0], [state.u.copy()]
    blow, t_blow = False, None
    for k in range(cfg.n_steps):
        try:
            state = step(state, cfg)
        except BlowUp:
            blow, t_blow = True, state.t + cfg.dt
            break
        if (k + 1) % cfg.save_every == 0 or k + 1 == cfg.n_steps:
            times.append(state.t)
            us.append(state.u.copy())
    U = np.array(us).reshape((len(us),) + (cfg.n,) * cfg.d)
    return Trajectory(
        times=np.array(times), u=U, sup=np.abs(U).reshape(len(us), -1).max(axis=1),
        energy=0.5 * (U.reshape(len(us), -1) ** 2).sum(axis=1) * hd, blowup=blow, blowup_time=t_blow,
        wall_time=_time.perf_counter() - t0, meta=cfg.snapshot())


def _smooth(U: np.ndarray, d: int, scale: float) -> np.ndarray:
    """Periodic heat smoothing ``exp(scale^2 Laplacian)`` over the trailing ``d`` axes."""
    n = U.shape[-1]
    k = np.fft.fftfreq(n, 1.0 / n)
    K2 = sum(np.meshgrid(*[k**2] * d, indexing="ij"))
    axes = tuple(range(-d, 0))
    return np.fft.ifftn(np.fft.fftn(U, axes=axes) * np.exp(-4 * np.pi**2 * scale**2 * K2), axes=axes).real


def cauchy_distance(a: Trajectory, b: Trajectory, T: float, norm: str = "sup", scale: float = 0.1) -> float:
    """``max_{t in [T/2, T]} ||u_a - u_b||`` over saved times.

    ``norm="sup"`` is the grid sup-norm; ``norm="smooth"`` applies the
    periodic heat semigroup at length ``scale`` to the difference first, a
    fixed-scale test-function norm suited to distribution-valued limits.
    A blown-up trajectory gives ``inf``.
    """
    if a.blowup or b.blowup:
        return float("inf")
    ua, ub = a.window(T / 2, T), b.window(T / 2, T)
    diff = ua - ub
    if norm == "smooth":
        diff = _smooth(diff, diff.ndim - 1, scale)
    elif norm != "sup":
        raise ValueError(f"unknown norm {norm!r}")
    return float(np.max(np.abs(diff)))


@dataclass
class CauchyTable:
    """``D[s, k] = dist(u_{eps_k}, u_{eps_{k+1}})`` per seed ``s``; success when the last two decrease."""

    eps: np.ndarray
    seeds: np.ndarray
    D: np.ndarray
    norm: str

    @property
    def success(self) -> np.ndarray:
        return self.D[:, -1] < self.D[:, -2]

    @property
    def n_success(self) -> int:
        return int(np.sum(self.success))

    def rows(self) -> List[dict]:
        out = []
        for s, seed in enumerate(self.seeds):
            for k in range(self.D.shape[1]):
                out.append({"seed": int(seed), "eps_coarse": float(self.eps[k]), "eps_fine": float(self.eps[k + 1]),
                            "distance": float(self.D[s, k]), "norm": self.norm,
                            "decreasing": bool(self.success[s])})
        return out


def _run_many(cfgs: Sequence[EquationConfig], workers: int) -> List[Trajectory]:
    if workers <= 1:
        return [solve(c) for c in cfgs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(solve, cfgs))


def epsilon_sweep(cfg: EquationConfig, ladder: Sequence[float], seeds: Optional[Sequence[int]] = None,
                  norm: str = "sup", scale: float = 0.1, workers: int = 1) -> CauchyTable:
    """Coupled-noise Cauchy table along ``ladder`` (same seed on every rung)."""
    ladder = np.asarray(ladder, dtype=float)
    if ladder.size < 3:
        raise ConfigError("need at least three rungs", "eps_ladder")
    seeds = np.asarray([cfg.seed] if seeds is None else seeds, dtype=int)
    D = np.zeros((seeds.size, ladder.size - 1))
    for s, seed in enumerate(seeds):
        trajs = _run_many([cfg.replace(eps=float(e), seed=int(seed)) for e in ladder], workers)
        for k in range(ladder.size - 1):
            D[s, k] = cauchy_distance(trajs[k], trajs[k + 1], cfg.T, norm, scale)
    return CauchyTable(ladder, seeds, D, norm)


@dataclass
class ComparisonTable:
    """``D[s, k]`` distance between two schemes at ``eps_k`` for seed ``s``; success when strictly decreasing."""

    eps: np.ndarray
    seeds: np.ndarray
    schemes: Tuple[str, str]
    D: np.ndarray
    norm: str

    @property
    def success(self) -> np.ndarray:
        return np.all(np.diff(self.D, axis=1) < 0, axis=1)

    @property
    def n_success(self) -> int:
        return int(np.sum(self.success))

    def rows(self) -> List[dict]:
        return [{"seed": int(seed), "eps": float(e), "scheme_a": self.schemes[0], "scheme_b": self.schemes[1],
                 "distance": float(self.D[s, k]), "norm": self.norm, "decreasing": bool(self.success[s])}
                for s, seed in enumerate(self.seeds) for k, e in enumerate(self.eps)]


def mollifier_comparison(cfg: EquationConfig, schemes: Sequence[str] = ("heat", "covariant"),
                         ladder: Sequence[float] = (0.2, 0.1, 0.05), seeds: Optional[Sequence[int]] = None,
                         norm: str = "sup", scale: float = 0.1, counterterms: Optional[Sequence] = None,
                         workers: int = 1) -> ComparisonTable:
    """Distance between trajectories of two schemes on the same noise along ``ladder``.

    Each scheme uses its own counterterm unless ``counterterms`` overrides
    the pair (e.g. to pair the covariant scheme with the heat-kernel
    counterterm as a negative control).
    """
    if len(schemes) != 2:
        raise ConfigError("compare exactly two schemes", "schemes")
    ladder = np.asarray(ladder, dtype=float)
    seeds = np.asarray([cfg.seed] if seeds is None else seeds, dtype=int)
    cts = counterterms or (cfg.counterterm, cfg.counterterm)
    D = np.zeros((seeds.size, ladder.size))
    for s, seed in enumerate(seeds):
        for k, e in enumerate(ladder):
            a, b = _run_many([cfg.replace(eps=float(e), seed=int(seed), scheme=sc, counterterm=ct)
                              for sc, ct in zip(schemes, cts)], workers)
            D[s, k] = cauchy_distance(a, b, cfg.T, norm, scale)
    return ComparisonTable(ladder, seeds, (schemes[0], schemes[1]), D, norm)
