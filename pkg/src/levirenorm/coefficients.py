"""Variable-coefficient parabolic operators on the space-time torus.

The operator is ``L = d_t - sum a_ij d_i d_j - sum b_i d_i - c`` with ``a``
uniformly elliptic and every coefficient 1-periodic in each spatial
coordinate.  A :class:`CoefficientField` bundles vectorised evaluators for
``a``, ``b`` and ``c`` (plus optional closed-form derivatives) and
:func:`evaluate_frozen` returns the data of the constant-coefficient
operator obtained by freezing ``a`` at one space-time point.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional

import numpy as np

from levirenorm.errors import NonPositiveDefinite

__all__ = [
    "CoefficientField",
    "FrozenData",
    "evaluate_frozen",
    "inverse_metric",
    "check_ellipticity",
    "coefficient_derivatives",
    "adjoint_coefficients",
    "adjoint_field",
    "constant_field",
    "identity_field",
    "diag_sine_field",
    "rotated_anisotropic_field",
    "checkerboard_smooth_field",
    "drift_field",
    "time_sine_field",
    "symmetrise",
    "det_small",
    "inv_small",
    "builtin_field",
    "BUILTIN_FIELDS",
    "register_field",
]

ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

H_FD = 1e-4


def symmetrise(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def det_small(a: np.ndarray) -> np.ndarray:
    """Closed-form determinant of a stack of d x d matrices, d <= 3."""
    d = a.shape[-1]
    if d == 1:
        return a[..., 0, 0].copy()
    if d == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    if d == 3:
        return (
            a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
        )
    raise ValueError(f"dimension {d} not supported")


def inv_small(a: np.ndarray) -> np.ndarray:
    """Cofactor inverse of a stack of d x d matrices, d <= 3."""
    d = a.shape[-1]
    det = det_small(a)
    out = np.empty_like(a, dtype=float)
    if d == 1:
        out[..., 0, 0] = 1.0 / a[..., 0, 0]
        return out
    if d == 2:
        out[..., 0, 0] = a[..., 1, 1]
        out[..., 1, 1] = a[..., 0, 0]
        out[..., 0, 1] = -a[..., 0, 1]
        out[..., 1, 0] = -a[..., 1, 0]
        return out / det[..., None, None]
    if d == 3:
        for i in range(3):
            for j in range(3):
                r = [k for k in range(3) if k != j]
                c = [k for k in range(3) if k != i]
                minor = (
                    a[..., r[0], c[0]] * a[..., r[1], c[1]]
                    - a[..., r[0], c[1]] * a[..., r[1], c[0]]
                )
                out[..., i, j] = (-1) ** (i + j) * minor
        return out / det[..., None, None]
    raise ValueError(f"dimension {d} not supported")


@dataclass(frozen=True)
class CoefficientField:
    """Coefficients ``a``, ``b``, ``c`` of a parabolic operator on T^d x R.

    Each evaluator takes ``x`` with shape ``(..., d)`` and ``t`` broadcastable
    against ``x[..., 0]`` and returns arrays of shape ``(..., d, d)``,
    ``(..., d)`` and ``(...)`` respectively.  ``b`` and ``c`` may be omitted
    (zero).  Optional closed forms: ``da[..., k, i, j] = d_k a_ij``,
    ``db[..., i, j] = d_j b_i`` and ``d2a = sum_ij d_i d_j a_ij``; missing
    ones fall back to periodic central differences with step ``h_fd``.

    ``x1_reduction`` marks fields whose diffusion matrix is diagonal, varies
    only with ``x_1`` and whose drift/potential live on the first coordinate.
    It holds the one-dimensional field acting on ``x_1`` and the constant
    diagonal entries for the remaining coordinates; kernels of such fields
    factorise exactly.
    """

    d: int
    a_fn: ArrayFn
    b_fn: Optional[ArrayFn] = None
    c_fn: Optional[ArrayFn] = None
    da_fn: Optional[ArrayFn] = None
    db_fn: Optional[ArrayFn] = None
    d2a_fn: Optional[ArrayFn] = None
    name: str = "custom"
    params: dict = dc_field(default_factory=dict)
    time_dependent: bool = False
    constant: bool = False
    h_fd: float = H_FD
    x1_reduction: Optional[tuple] = None

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")

    # -- raw evaluation -------------------------------------------------
    def _prep(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.d:
            x = x.reshape(*x.shape, 1) if self.d == 1 else x
        if x.shape[-1] != self.d:
            raise ValueError(f"expected trailing dimension {self.d}, got {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        return x, t

    def a(self, x, t=0.0) -> np.ndarray:
        """Symmetrised diffusion matrix at ``(x, t)``."""
        x, t = self._prep(x, t)
        a = np.asarray(self.a_fn(x, t), dtype=float)
        a = np.broadcast_to(a, x.shape[:-1] + (self.d, self.d))
        return symmetrise(a)

    def asymmetry(self, x, t=0.0) -> float:
        x, t = self._prep(x, t)
        a = np.asarray(self.a_fn(x, t), dtype=float)
        return float(np.max(np.abs(a - np.swapaxes(a, -1, -2))))

    def b(self, x, t=0.0) -> np.ndarray:
        x, t = self._prep(x, t)
        if self.b_fn is None:
            return np.zeros(x.shape)
        return np.broadcast_to(np.asarray(self.b_fn(x, t), dtype=float), x.shape).copy()

    def c(self, x, t=0.0) -> np.ndarray:
        x, t = self._prep(x, t)
        if self.c_fn is None:
            return np.zeros(x.shape[:-1])
        return np.broadcast_to(
            np.asarray(self.c_fn(x, t), dtype=float), x.shape[:-1]
        ).copy()

    @property
    def has_drift(self) -> bool:
        return self.b_fn is not None

    @property
    def has_potential(self) -> bool:
        return self.c_fn is not None

    # -- derivatives ----------------------------------------------------
    def _fd(self, fn, x, t):
        h = self.h_fd
        out = []
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = h
            out.append((fn(x + e, t) - fn(x - e, t)) / (2 * h))
        return out

    def da(self, x, t=0.0) -> np.ndarray:
        """``out[..., k, i, j] = d_k a_ij``."""
        x, t = self._prep(x, t)
        if self.da_fn is not None:
            return np.broadcast_to(
                np.asarray(self.da_fn(x, t), dtype=float),
                x.shape[:-1] + (self.d,) * 3,
            ).copy()
        parts = self._fd(self.a, x, t)
        return np.stack(parts, axis=-3)

    def db(self, x, t=0.0) -> np.ndarray:
        """``out[..., i, j] = d_j b_i``."""
        x, t = self._prep(x, t)
        if self.b_fn is None:
            return np.zeros(x.shape[:-1] + (self.d, self.d))
        if self.db_fn is not None:
            return np.broadcast_to(
                np.asarray(self.db_fn(x, t), dtype=float),
                x.shape[:-1] + (self.d, self.d),
            ).copy()
        parts = self._fd(self.b, x, t)
        return np.stack(parts, axis=-1)

    def d2a(self, x, t=0.0) -> np.ndarray:
        """``sum_ij d_i d_j a_ij``."""
        x, t = self._prep(x, t)
        if self.d2a_fn is not None:
            return np.broadcast_to(
                np.asarray(self.d2a_fn(x, t), dtype=float), x.shape[:-1]
            ).copy()
        h = self.h_fd
        total = np.zeros(x.shape[:-1])
        for i in range(self.d):
            for j in range(self.d):
                ei = np.zeros(self.d)
                ej = np.zeros(self.d)
                ei[i] = h
                ej[j] = h
                if i == j:
                    total += (
                        self.a(x + ei, t)[..., i, i]
                        - 2 * self.a(x, t)[..., i, i]
                        + self.a(x - ei, t)[..., i, i]
                    ) / h**2
                else:
                    total += (
                        self.a(x + ei + ej, t)[..., i, j]
                        - self.a(x + ei - ej, t)[..., i, j]
                        - self.a(x - ei + ej, t)[..., i, j]
                        + self.a(x - ei - ej, t)[..., i, j]
                    ) / (4 * h**2)
        return total

    def with_params(self, **kw) -> "CoefficientField":
        return builtin_field(self.name, d=self.d, **{**self.params, **kw})


@dataclass(frozen=True)
class FrozenData:
    """Constant-coefficient data of ``a`` frozen at the point ``z``."""

    z: tuple
    A: np.ndarray
    A_inv: np.ndarray
    detA: float
    C: float

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @classmethod
    def from_matrix(cls, A, z=None) -> "FrozenData":
        A = symmetrise(np.atleast_2d(np.asarray(A, dtype=float)))
        d = A.shape[0]
        w = np.linalg.eigvalsh(A)
        if w[0] <= 0:
            raise NonPositiveDefinite(
                f"frozen matrix has eigenvalue {w[0]:.3g} <= 0", point=z
            )
        det = float(det_small(A))
        inv = inv_small(A)
        C = (4 * np.pi) ** (-d / 2) * det ** (-0.5)
        z = tuple(np.zeros(d + 1)) if z is None else tuple(z)
        return cls(z=z, A=A, A_inv=inv, detA=det, C=float(C))


def evaluate_frozen(field: CoefficientField, z) -> FrozenData:
    """Freeze ``a`` at ``z = (x_1, ..., x_d, t)``.

    Raises
    ------
    NonPositiveDefinite
        If the symmetrised matrix has a non-positive eigenvalue.
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.size == field.d:
        z = np.append(z, 0.0)
    x, t = z[: field.d], z[field.d]
    A = field.a(x, t)
    return FrozenData.from_matrix(A, z=tuple(float(v) for v in z))


def inverse_metric(frozen: FrozenData, zeta) -> np.ndarray:
    """``zeta^T A^{-1} zeta``; vectorised over leading axes of ``zeta``."""
    zeta = np.asarray(zeta, dtype=float)
    return np.einsum("...i,ij,...j->...", zeta, frozen.A_inv, zeta)


def _lattice(d: int, n: int) -> np.ndarray:
    axes = [np.arange(n) / n] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def check_ellipticity(field: CoefficientField, n: int = 64, n_times: int = 16, points=None):
    """Return ``(lambda_min, lambda_max)`` of ``a`` over a sample lattice.

    The default lattice has ``n**d`` spatial points and ``n_times`` times in
    ``[0, 1)`` (one time for autonomous fields).  ``points`` may be given
    explicitly as an array of shape ``(m, d + 1)``.

    Raises
    ------
    NonPositiveDefinite
        Naming the first offending point.
    """
    if points is None:
        x = _lattice(field.d, n)
        times = np.arange(n_times) / n_times if field.time_dependent else np.zeros(1)
        pts = [(x, float(t)) for t in times]
    else:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.size == 0:
            raise ValueError("empty sample grid")
        pts = [(points[:, : field.d], points[:, field.d])]
    lo, hi = np.inf, -np.inf
    for x, t in pts:
        w = np.linalg.eigvalsh(field.a(x, t))
        bad = np.nonzero(w[:, 0] <= 0)[0]
        if bad.size:
            i = bad[0]
            tt = t if np.ndim(t) == 0 else t[i]
            raise NonPositiveDefinite(
                f"a has eigenvalue {w[i, 0]:.3g} <= 0",
                point=tuple(np.append(x[i], tt)),
            )
        lo = min(lo, float(w[:, 0].min()))
        hi = max(hi, float(w[:, -1].max()))
    return lo, hi


def coefficient_derivatives(field: CoefficientField, z):
    """Derivative data at ``z``: ``(da, db, d2a)``.

    ``da[k, i, j] = d_k a_ij``, ``db[i, j] = d_j b_i`` and ``d2a`` the
    contraction ``sum_ij d_i d_j a_ij``.
    """
    z = np.asarray(z, dtype=float).ravel()
    x, t = z[: field.d], z[field.d] if z.size > field.d else 0.0
    return field.da(x, t), field.db(x, t), float(field.d2a(x, t))


def adjoint_coefficients(field: CoefficientField, x, t=0.0):
    """Drift and potential of the formal adjoint at ``(x, t)``.

    ``b*_i = -b_i + 2 sum_j d_j a_ij`` and
    ``c* = c - sum_i d_i b_i + sum_ij d_i d_j a_ij``.
    """
    da = field.da(x, t)
    # sum_j d_j a_ij: contract derivative index with column index
    div_a = np.einsum("...jij->...i", da)
    bstar = -field.b(x, t) + 2.0 * div_a
    cstar = field.c(x, t) - np.trace(field.db(x, t), axis1=-2, axis2=-1) + field.d2a(x, t)
    return bstar, cstar


def adjoint_field(field: CoefficientField) -> CoefficientField:
    """Time-reversed adjoint: the forward operator whose kernel gives Gamma*.

    With ``a'(x, s) = a(x, -s)``, ``b'(x, s) = b*(x, -s)`` and
    ``c'(x, s) = c*(x, -s)`` one has ``Gamma*(x, t; y, s) = Gamma'(x, -t; y, -s)``.
    """

    def a_fn(x, s):
        return field.a(x, -s)

    def b_fn(x, s):
        return adjoint_coefficients(field, x, -s)[0]

    def c_fn(x, s):
        return adjoint_coefficients(field, x, -s)[1]

    red = None
    if field.x1_reduction is not None:
        f1, rest = field.x1_reduction
        red = (adjoint_field(f1), rest)
    return CoefficientField(
        d=field.d,
        a_fn=a_fn,
        b_fn=b_fn,
        c_fn=c_fn,
        name=f"adjoint({field.name})",
        params=dict(field.params),
        time_dependent=field.time_dependent,
        constant=field.constant and not field.has_drift,
        h_fd=field.h_fd,
        x1_reduction=red,
    )


# ---------------------------------------------------------------------------
# built-in fields

def _eye(x, d):
    return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()


def constant_field(A, b=None, c=None, name="constant") -> CoefficientField:
    A = symmetrise(np.atleast_2d(np.asarray(A, dtype=float)))
    d = A.shape[0]
    bvec = None if b is None else np.asarray(b, dtype=float).reshape(d)
    cval = None if c is None else float(c)
    b_fn = None if bvec is None else (lambda x, t: np.broadcast_to(bvec, x.shape).copy())
    c_fn = None if cval is None else (lambda x, t: np.full(x.shape[:-1], cval))
    zero3 = lambda x, t: np.zeros(x.shape[:-1] + (d, d, d))
    zero2 = lambda x, t: np.zeros(x.shape[:-1] + (d, d))
    zero0 = lambda x, t: np.zeros(x.shape[:-1])
    red = None
    if d > 1 and np.allclose(A, np.diag(np.diag(A))) and (bvec is None or np.all(bvec[1:] == 0)):
        red = (
            constant_field(A[:1, :1], None if bvec is None else bvec[:1], cval, name=name),
            tuple(float(v) for v in np.diag(A)[1:]),
        )
    return CoefficientField(
        d=d,
        a_fn=lambda x, t: np.broadcast_to(A, x.shape[:-1] + (d, d)).copy(),
        b_fn=b_fn,
        c_fn=c_fn,
        da_fn=zero3,
        db_fn=zero2,
        d2a_fn=zero0,
        name=name,
        params={"A": A.tolist(), "b": None if bvec is None else bvec.tolist(), "c": cval},
        constant=True,
        x1_reduction=red,
    )


def identity_field(d=2) -> CoefficientField:
    return replace(constant_field(np.eye(d), name="identity"), params={})


def diag_sine_field(d=2, amp=0.5, rest=1.0, c=None) -> CoefficientField:
    """``a = diag(1 + amp sin(2 pi x_1), rest, ..., rest)``."""
    two_pi = 2 * np.pi

    def a_fn(x, t):
        out = np.zeros(x.shape[:-1] + (d, d))
        out[..., 0, 0] = 1.0 + amp * np.sin(two_pi * x[..., 0])
        for i in range(1, d):
            out[..., i, i] = rest
        return out

    def da_fn(x, t):
        out = np.zeros(x.shape[:-1] + (d, d, d))
        out[..., 0, 0, 0] = amp * two_pi * np.cos(two_pi * x[..., 0])
        return out

    def d2a_fn(x, t):
        return -amp * two_pi**2 * np.sin(two_pi * x[..., 0])

    c_fn = None if c is None else (lambda x, t: np.full(x.shape[:-1], float(c)))
    red = None
    if d > 1:
        red = (diag_sine_field(1, amp=amp, c=c), (float(rest),) * (d - 1))
    return CoefficientField(
        d=d,
        a_fn=a_fn,
        c_fn=c_fn,
        da_fn=da_fn,
        db_fn=lambda x, t: np.zeros(x.shape[:-1] + (d, d)),
        d2a_fn=d2a_fn,
        name="diag-sine",
        params={"amp": amp, "rest": rest, "c": c},
        x1_reduction=red,
    )


def rotated_anisotropic_field(d=2, lam1=2.0, lam2=0.5, theta0=0.3, theta1=0.5) -> CoefficientField:
    """Eigenvalues ``(lam1, lam2)`` with eigenframe rotated by
    ``theta0 + theta1 sin(2 pi x_1) cos(2 pi x_2)`` in the (x_1, x_2) plane."""
    if d < 2:
        raise ValueError("rotated-anisotropic needs d >= 2")
    two_pi = 2 * np.pi

    def a_fn(x, t):
        th = theta0 + theta1 * np.sin(two_pi * x[..., 0]) * np.cos(two_pi * x[..., 1])
        cs, sn = np.cos(th), np.sin(th)
        out = _eye(x, d)
        out[..., 0, 0] = lam1 * cs**2 + lam2 * sn**2
        out[..., 1, 1] = lam1 * sn**2 + lam2 * cs**2
        out[..., 0, 1] = out[..., 1, 0] = (lam1 - lam2) * cs * sn
        return out

    return CoefficientField(
        d=d,
        a_fn=a_fn,
        name="rotated-anisotropic",
        params={"lam1": lam1, "lam2": lam2, "theta0": theta0, "theta1": theta1},
    )


def checkerboard_smooth_field(d=2, amp=0.4) -> CoefficientField:
    """``a = (1 + amp prod_i sin(2 pi x_i)) I``."""
    two_pi = 2 * np.pi

    def scal(x):
        return 1.0 + amp * np.prod(np.sin(two_pi * x), axis=-1)

    def a_fn(x, t):
        return scal(x)[..., None, None] * _eye(x, d)

    def da_fn(x, t):
        out = np.zeros(x.shape[:-1] + (d, d, d))
        s = np.sin(two_pi * x)
        for k in range(d):
            others = np.prod(np.delete(s, k, axis=-1), axis=-1)
            g = amp * two_pi * np.cos(two_pi * x[..., k]) * others
            for i in range(d):
                out[..., k, i, i] = g
        return out

    return CoefficientField(
        d=d,
        a_fn=a_fn,
        da_fn=da_fn,
        name="checkerboard-smooth",
        params={"amp": amp},
    )


def drift_field(d=2, b=(1.0, 0.0), c=None) -> CoefficientField:
    b = [float(v) for v in np.asarray(b, dtype=float)[:d]]
    f = constant_field(np.eye(d), b=b, c=c, name="constant-drift")
    return replace(f, params={"b": b, "c": c})


def time_sine_field(d=1, amp=0.3, omega=1.0) -> CoefficientField:
    """``a = (1 + amp sin(2 pi x_1) cos(2 pi omega t)) I``; a non-autonomous test field."""
    two_pi = 2 * np.pi

    def a_fn(x, t):
        s = 1.0 + amp * np.sin(two_pi * x[..., 0]) * np.cos(two_pi * omega * t)
        return s[..., None, None] * _eye(x, d)

    return CoefficientField(
        d=d,
        a_fn=a_fn,
        name="time-sine",
        params={"amp": amp, "omega": omega},
        time_dependent=True,
    )


BUILTIN_FIELDS: dict = {
    "identity": lambda d=2, **kw: identity_field(d),
    "constant": lambda d=2, A=None, b=None, c=None, **kw: constant_field(
        np.eye(d) if A is None else A, b=b, c=c
    ),
    "diag-sine": diag_sine_field,
    "rotated-anisotropic": rotated_anisotropic_field,
    "checkerboard-smooth": checkerboard_smooth_field,
    "constant-drift": drift_field,
    "time-sine": time_sine_field,
}


def register_field(name: str, factory: Callable[..., CoefficientField]) -> None:
    BUILTIN_FIELDS[name] = factory


def builtin_field(name: str, d: int = 2, **params) -> CoefficientField:
    try:
        factory = BUILTIN_FIELDS[name]
    except KeyError:
        raise KeyError(f"unknown coefficient field {name!r}; known: {sorted(BUILTIN_FIELDS)}")
    return factory(d=d, **params)
