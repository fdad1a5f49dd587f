"""Plane deformations: evaluation, Jacobians, polar form and image measures.

A deformation is an orientation-preserving diffeomorphism of the plane fixing
the origin.  All evaluation methods are vectorized over a trailing axis of
length 2, so ``theta(pts)`` works for a single point or for any array of
points.

Polar coordinates use ``S(r, phi) = (r cos phi, r sin phi)``.  A spiral
deformation acts in polar coordinates as ``(r, phi) -> (f(r), g(r) + phi)``
with ``f`` increasing from 0 to infinity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .quadrature import integrate_1d, integrate_2d

__all__ = [
    "DeformationError",
    "Deformation",
    "Linear",
    "Tensorial",
    "Spiral",
    "Composite",
    "Custom",
    "identity",
    "rotation",
    "linear_spiral",
    "PolarRep",
    "SpiralCheck",
    "Segment",
    "Rect",
    "JacobianSummary",
    "jacobian_summary",
    "is_spiral",
    "image_area",
    "image_perimeter",
    "image_length",
    "inverse",
    "Expression",
    "parse_expression",
    "from_config",
]

TWO_PI = 2.0 * math.pi


class DeformationError(ValueError):
    """Invalid deformation, or a point where it is not orientation preserving."""


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (2,):
        raise DeformationError(f"points need a trailing dimension of 2, got shape {x.shape}")
    return x


def _rotation_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


class Deformation:
    """Base class.  Subclasses implement ``_eval`` and ``_jac`` on ``(n, 2)`` arrays."""

    name = "deformation"

    def _eval(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _jac(self, x: np.ndarray) -> np.ndarray:
        return _central_jacobian(self._eval, x)

    def eval(self, x) -> np.ndarray:
        """``theta(x)`` for one point or an array of points."""
        x = _points(x)
        flat = x.reshape(-1, 2)
        return self._eval(flat).reshape(x.shape)

    __call__ = eval

    def jacobian(self, x, check: bool = True) -> np.ndarray:
        """Jacobian matrix (shape ``(..., 2, 2)``) with ``J[..., i, j] = d theta_i / d x_j``.

        With ``check`` (the default) a non-positive determinant raises
        :class:`DeformationError`.
        """
        x = _points(x)
        flat = x.reshape(-1, 2)
        jac = self._jac(flat)
        if check:
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            bad = ~(det > 0)
            if np.any(bad):
                p = flat[np.argmax(bad)]
                raise DeformationError(
                    f"{self.name}: Jacobian determinant {det[np.argmax(bad)]:.3g} "
                    f"is not positive at ({p[0]:.6g}, {p[1]:.6g})"
                )
        return jac.reshape(x.shape[:-1] + (2, 2))

    def det_jacobian(self, x) -> np.ndarray:
        j = self.jacobian(x, check=False)
        return j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]

    def compose(self, inner: "Deformation") -> "Composite":
        """``self o inner``."""
        return Composite([self, inner])

    def __matmul__(self, inner: "Deformation") -> "Composite":
        return self.compose(inner)

    def polar(self) -> "PolarRep":
        return PolarRep(self)

    def validate(self, box_radius: float = 1.0, n: int = 32, origin_tol: float = 1e-12) -> None:
        """Check ``theta(0) = 0`` and ``det J > 0`` on an ``n x n`` probe lattice.

        The probes are the cell centres of an ``n x n`` subdivision of
        ``[-box_radius, box_radius]^2``, so the origin itself is never probed
        (spirals may have a vanishing Jacobian there).
        """
        zero = self.eval(np.zeros(2))
        if np.hypot(*zero) > origin_tol:
            raise DeformationError(f"{self.name} does not fix the origin: theta(0) = {zero}")
        c = (np.arange(n) + 0.5) / n * 2.0 * box_radius - box_radius
        gx, gy = np.meshgrid(c, c, indexing="ij")
        self.jacobian(np.stack([gx, gy], -1), check=True)


def _central_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central differences with the relative step ``1e-5 * (1 + |x|)``."""
    step = 1e-5 * (1.0 + np.hypot(x[:, 0], x[:, 1]))
    jac = np.empty((x.shape[0], 2, 2))
    for j in range(2):
        e = np.zeros_like(x)
        e[:, j] = step
        jac[:, :, j] = (fn(x + e) - fn(x - e)) / (2.0 * step[:, None])
    return jac


class Linear(Deformation):
    """``theta(x) = M x``."""

    name = "linear"

    def __init__(self, matrix, validate: bool = True):
        m = np.array(matrix, dtype=float)
        if m.shape != (2, 2) or not np.all(np.isfinite(m)):
            raise DeformationError(f"linear deformation needs a finite 2x2 matrix, got {matrix!r}")
        if validate and not np.linalg.det(m) > 0:
            raise DeformationError(f"matrix determinant {np.linalg.det(m):.6g} is not positive")
        m.setflags(write=False)
        self.matrix = m

    def _eval(self, x):
        return x @ self.matrix.T

    def _jac(self, x):
        return np.broadcast_to(self.matrix, (x.shape[0], 2, 2)).copy()

    def __repr__(self):
        return f"Linear({self.matrix.tolist()})"


def identity() -> Linear:
    return Linear(np.eye(2))


def rotation(angle: float) -> Linear:
    return Linear(_rotation_matrix(float(angle)))


def linear_spiral(scale: float, angle: float) -> Linear:
    """``lambda * rho_alpha``: the linear maps that are spirals."""
    if not scale > 0:
        raise DeformationError(f"scale must be positive, got {scale}")
    return Linear(scale * _rotation_matrix(float(angle)))


def _as_derivative(fn, dfn, label: str):
    if dfn is not None:
        return dfn

    def numeric(s):
        s = np.asarray(s, dtype=float)
        h = 1e-5 * (1.0 + np.abs(s))
        return (fn(s + h) - fn(s - h)) / (2.0 * h)

    numeric.__name__ = f"d_{label}"
    return numeric


class Tensorial(Deformation):
    """``theta(s, t) = (theta1(s), theta2(t))``.

    ``d1``/``d2`` are the derivatives; when omitted they are taken by central
    differences.
    """

    name = "tensorial"

    def __init__(self, theta1, theta2, d1=None, d2=None, validate: bool = True,
                 box_radius: float = 1.0):
        self.theta1, self.theta2 = theta1, theta2
        self.d1 = _as_derivative(theta1, d1, "theta1")
        self.d2 = _as_derivative(theta2, d2, "theta2")
        if validate:
            self.validate(box_radius)

    def _eval(self, x):
        return np.stack([_vec(self.theta1, x[:, 0]), _vec(self.theta2, x[:, 1])], -1)

    def _jac(self, x):
        jac = np.zeros((x.shape[0], 2, 2))
        jac[:, 0, 0] = _vec(self.d1, x[:, 0])
        jac[:, 1, 1] = _vec(self.d2, x[:, 1])
        return jac

    def __repr__(self):
        return f"Tensorial({self.theta1!r}, {self.theta2!r})"


def _vec(fn, s: np.ndarray) -> np.ndarray:
    """Apply ``fn`` and broadcast constants (e.g. a derivative ``1``) to ``s``'s shape."""
    return np.broadcast_to(np.asarray(fn(s), dtype=float), s.shape).astype(float, copy=True)


class Spiral(Deformation):
    """Spiral deformation with polar form ``(r, phi) -> (f(r), g(r) + phi)``.

    ``df`` and ``dg`` are the derivatives of ``f`` and ``g`` (central
    differences when omitted).  At the origin the Jacobian is the limit
    ``f'(0) rho_{g(0)}``, valid when ``f`` is differentiable at 0.
    """

    name = "spiral"

    def __init__(self, f, g=None, df=None, dg=None, validate: bool = True,
                 box_radius: float = 1.0):
        self.f = f
        self.g = g if g is not None else (lambda r: np.zeros_like(np.asarray(r, dtype=float)))
        self.df = _as_derivative(f, df, "f")
        if g is None and dg is None:
            dg = lambda r: np.zeros_like(np.asarray(r, dtype=float))  # noqa: E731
        self.dg = _as_derivative(self.g, dg, "g")
        if validate:
            self._check_radial_profile(box_radius)
            self.validate(box_radius)

    def _check_radial_profile(self, box_radius: float) -> None:
        r = np.geomspace(1e-6 * box_radius, 1e3 * box_radius, 400)
        with np.errstate(over="ignore"):
            fr = _vec(self.f, r)
            far = float(_vec(self.f, np.array([1e6 * box_radius]))[0])
        # fast-growing profiles may overflow far out; that still counts as growth
        fin = np.isfinite(fr)
        if np.any(np.isnan(fr)) or np.any(fr <= 0) or not np.all(fin[: int(fin.sum())]):
            raise DeformationError("spiral radial profile f must be positive on (0, inf)")
        if np.any(np.diff(fr[fin]) <= 0):
            raise DeformationError("spiral radial profile f must be strictly increasing")
        if fr[0] > 1e-2 * float(_vec(self.f, np.array([box_radius]))[0]):
            raise DeformationError("spiral radial profile f must tend to 0 at the origin")
        if not fin[-1]:
            return
        if not far > 1.5 * fr[-1]:
            raise DeformationError("spiral radial profile f does not grow without bound")

    def polar_map(self, r, phi):
        r = np.asarray(r, dtype=float)
        return _vec(self.f, r), np.mod(_vec(self.g, r) + phi, TWO_PI)

    def _eval(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        phi = np.arctan2(x[:, 1], x[:, 0])
        fr = np.where(r > 0, _vec(self.f, r), 0.0)
        ang = _vec(self.g, r) + phi
        return np.stack([fr * np.cos(ang), fr * np.sin(ang)], -1)

    def _jac(self, x):
        r = np.hypot(x[:, 0], x[:, 1])
        phi = np.arctan2(x[:, 1], x[:, 0])
        # below this radius 1/r overflows; use the limit at the origin instead
        origin = r < 1e-150
        safe = np.where(origin, 1.0, r)
        fr = _vec(self.f, safe)
        dfr = _vec(self.df, r)
        dgr = _vec(self.dg, r)
        psi = _vec(self.g, r) + phi
        cp, sp = np.cos(psi), np.sin(psi)
        # columns d/dr and d/dphi of theta(S(r, phi))
        a = np.empty((x.shape[0], 2, 2))
        a[:, 0, 0] = dfr * cp - fr * dgr * sp
        a[:, 1, 0] = dfr * sp + fr * dgr * cp
        a[:, 0, 1] = -fr * sp
        a[:, 1, 1] = fr * cp
        # (d/dr, d/dphi) in terms of (d/dx, d/dy)
        b = np.empty((x.shape[0], 2, 2))
        b[:, 0, 0] = np.cos(phi)
        b[:, 0, 1] = np.sin(phi)
        b[:, 1, 0] = -np.sin(phi) / safe
        b[:, 1, 1] = np.cos(phi) / safe
        jac = a @ b
        if np.any(origin):
            g0 = _vec(self.g, np.zeros(1))[0]
            jac[origin] = _vec(self.df, np.zeros(1))[0] * _rotation_matrix(g0)
        return jac

    def __repr__(self):
        return f"Spiral({self.f!r}, {self.g!r})"


class Composite(Deformation):
    """``parts[0] o parts[1] o ... o parts[-1]`` (the last part is applied first)."""

    name = "composite"

    def __init__(self, parts: Sequence[Deformation]):
        if not parts:
            raise DeformationError("composite deformation needs at least one part")
        self.parts = tuple(parts)

    def _eval(self, x):
        for part in reversed(self.parts):
            x = part._eval(x)
        return x

    def _jac(self, x):
        jac = np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)).copy()
        for part in reversed(self.parts):
            jac = part._jac(x) @ jac
            x = part._eval(x)
        return jac

    def __repr__(self):
        return "Composite(" + ", ".join(repr(p) for p in self.parts) + ")"


class Custom(Deformation):
    """User map on ``(n, 2)`` arrays, with an optional Jacobian callback.

    Callbacks must be reentrant when the deformation is shared across threads.
    """

    name = "custom"

    def __init__(self, fn, jac=None, validate: bool = True, box_radius: float = 1.0):
        self.fn = fn
        self.jac_fn = jac
        if validate:
            self.validate(box_radius)

    def _eval(self, x):
        return np.asarray(self.fn(x), dtype=float).reshape(x.shape)

    def _jac(self, x):
        if self.jac_fn is None:
            return _central_jacobian(self._eval, x)
        return np.asarray(self.jac_fn(x), dtype=float).reshape(x.shape[0], 2, 2)


# ---------------------------------------------------------------------------
# polar representation and the spiral criterion


@dataclass(frozen=True, eq=False)
class PolarRep:
    """``theta_hat = S^{-1} o theta o S`` on ``r > 0``.

    ``hat(r, phi)`` returns ``(theta_hat_1, theta_hat_2)`` with the angle in
    ``[0, 2 pi)``.  Spirals use their exact polar form.
    """

    theta: Deformation

    def hat(self, r, phi):
        r = np.asarray(r, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if np.any(r <= 0):
            raise DeformationError("polar representation is defined for r > 0 only")
        if isinstance(self.theta, Spiral):
            r, phi = np.broadcast_arrays(r, phi)
            return self.theta.polar_map(r, phi)
        x = np.stack(np.broadcast_arrays(r * np.cos(phi), r * np.sin(phi)), -1)
        y = self.theta.eval(x)
        return np.hypot(y[..., 0], y[..., 1]), np.mod(np.arctan2(y[..., 1], y[..., 0]), TWO_PI)

    __call__ = hat

    def radial_invariants(self, r, phi):
        """``Q1 = |d_r theta|^2``, ``Q2 = |d_phi theta|^2`` and ``Q3 = r det J_theta``.

        In polar terms these are ``(d_r h1)^2 + (h1 d_r h2)^2``,
        ``(d_phi h1)^2 + (h1 d_phi h2)^2`` and ``h1 det J_hat``.
        """
        r, phi = np.broadcast_arrays(np.asarray(r, float), np.asarray(phi, float))
        x = np.stack([r * np.cos(phi), r * np.sin(phi)], -1)
        jac = self.theta.jacobian(x, check=False)
        ur = np.stack([np.cos(phi), np.sin(phi)], -1)
        uphi = np.stack([-np.sin(phi), np.cos(phi)], -1)
        jr = np.einsum("...ij,...j->...i", jac, ur)
        jphi = np.einsum("...ij,...j->...i", jac, uphi)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        return np.sum(jr**2, -1), r**2 * np.sum(jphi**2, -1), r * det


@dataclass(frozen=True)
class SpiralCheck:
    """Outcome of :func:`is_spiral`; truthy when the deformation passed."""

    passed: bool
    worst_r: float
    worst_range: float
    worst_quantity: int
    max_distortion: float

    def __bool__(self) -> bool:
        return self.passed


def is_spiral(theta: Deformation, box_radius: float, tol: float = 1e-6,
              n_r: int = 16, n_phi: int = 64) -> SpiralCheck:
    """Test whether the three polar invariants are radial on a probe grid.

    Radii are log-spaced in ``[box_radius / 100, box_radius]`` and angles
    uniform on the circle.  For each radius the relative range across angles
    ``(max - min) / max |.|`` of each invariant must not exceed ``tol``.
    ``max_distortion`` (largest singular-value ratio of the Jacobian on the
    grid) is informational only.
    """
    if not tol > 0:
        raise DeformationError(f"tol must be positive, got {tol}")
    if not box_radius > 0:
        raise DeformationError(f"box_radius must be positive, got {box_radius}")
    r = np.geomspace(box_radius / 100.0, box_radius, n_r)
    phi = np.arange(n_phi) * TWO_PI / n_phi
    rr, pp = np.meshgrid(r, phi, indexing="ij")
    quantities = PolarRep(theta).radial_invariants(rr, pp)
    worst = (0.0, r[0], 0)
    for k, q in enumerate(quantities):
        scale = np.max(np.abs(q), axis=1)
        spread = (np.max(q, axis=1) - np.min(q, axis=1)) / np.where(scale > 0, scale, 1.0)
        i = int(np.argmax(spread))
        if spread[i] > worst[0]:
            worst = (float(spread[i]), float(r[i]), k + 1)
    x = np.stack([rr * np.cos(pp), rr * np.sin(pp)], -1)
    sv = np.linalg.svd(theta.jacobian(x, check=False), compute_uv=False)
    distortion = float(np.max(sv[..., 0] / np.maximum(sv[..., 1], 1e-300)))
    return SpiralCheck(worst[0] <= tol, worst[1], worst[0], worst[2], distortion)


# ---------------------------------------------------------------------------
# domains and image measures


@dataclass(frozen=True)
class Segment:
    a: tuple[float, float]
    b: tuple[float, float]

    def __post_init__(self):
        a = (float(self.a[0]), float(self.a[1]))
        b = (float(self.b[0]), float(self.b[1]))
        if a == b:
            raise DeformationError("segment endpoints must differ")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> float:
        return math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])

    @classmethod
    def horizontal(cls, s: float, t: float = 0.0) -> "Segment":
        """``[0, s] x {t}`` (signed ``s``)."""
        return cls((min(0.0, s), t), (max(0.0, s), t))

    @classmethod
    def vertical(cls, t: float, s: float = 0.0) -> "Segment":
        """``{s} x [0, t]`` (signed ``t``)."""
        return cls((s, min(0.0, t)), (s, max(0.0, t)))


@dataclass(frozen=True)
class Rect:
    """``rho_rotation([0, s] x [0, t] + translation)``.

    Signed sides follow the convention ``[0, s] = [s, 0]`` for ``s < 0``.
    """

    s: float
    t: float
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.s == 0 or self.t == 0:
            raise DeformationError("rectangle sides must be nonzero")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def x_range(self) -> tuple[float, float]:
        return (min(0.0, self.s), max(0.0, self.s))

    @property
    def y_range(self) -> tuple[float, float]:
        return (min(0.0, self.t), max(0.0, self.t))

    @property
    def area(self) -> float:
        return abs(self.s * self.t)

    def to_world(self, p) -> np.ndarray:
        p = _points(p) + np.asarray(self.translation)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([c * p[..., 0] - s * p[..., 1], s * p[..., 0] + c * p[..., 1]], -1)

    def corners(self) -> np.ndarray:
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        return self.to_world(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))

    def edges(self) -> list[Segment]:
        c = self.corners()
        return [Segment(tuple(c[k]), tuple(c[(k + 1) % 4])) for k in range(4)]

    def rotated(self, angle: float) -> "Rect":
        return Rect(self.s, self.t, self.rotation + angle, self.translation)


def image_length(theta: Deformation, seg: Segment, rtol: float = 1e-9) -> float:
    """Length of ``theta(seg)``: integral of ``|J_theta(a + tau (b - a)) (b - a)|``."""
    a = np.asarray(seg.a)
    d = np.asarray(seg.b) - a

    def speed(tau):
        pts = a + tau[:, None] * d
        v = np.einsum("nij,j->ni", theta.jacobian(pts, check=False), d)
        return np.hypot(v[:, 0], v[:, 1])

    return integrate_1d(speed, 0.0, 1.0, rtol=rtol).value


def image_perimeter(theta: Deformation, rect: Rect, rtol: float = 1e-9) -> float:
    """Boundary length of ``theta(rect)``, summed over the four image edges."""
    return float(sum(image_length(theta, e, rtol) for e in rect.edges()))


def image_area(theta: Deformation, rect: Rect, rtol: float = 1e-9) -> float:
    """``|theta(rect)|``: integral of ``|det J_theta|`` over the rectangle."""
    (x0, x1), (y0, y1) = rect.x_range, rect.y_range

    def density(x, y):
        pts = rect.to_world(np.stack([x, y], -1))
        return np.abs(theta.det_jacobian(pts))

    return integrate_2d(density, x0, x1, y0, y1, rtol=rtol).value


@dataclass(frozen=True)
class JacobianSummary:
    """Column norms ``a``, ``b`` and determinant ``c`` of the Jacobian.

    Fields are floats for a single point and arrays for a batch.
    """

    a: float | np.ndarray
    b: float | np.ndarray
    c: float | np.ndarray

    @classmethod
    def from_matrix(cls, jac) -> "JacobianSummary":
        j = np.asarray(jac, dtype=float)
        if j.shape[-2:] != (2, 2):
            raise DeformationError(f"expected (..., 2, 2) Jacobians, got shape {j.shape}")
        vals = (
            np.hypot(j[..., 0, 0], j[..., 1, 0]),
            np.hypot(j[..., 0, 1], j[..., 1, 1]),
            j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0],
        )
        if j.ndim == 2:
            vals = tuple(float(v) for v in vals)
        return cls(*vals)


def jacobian_summary(theta: Deformation, x) -> JacobianSummary:
    return JacobianSummary.from_matrix(theta.jacobian(np.asarray(x, dtype=float)))


def inverse(theta: Deformation, y, x0=None, tol: float = 1e-12, max_iter: int = 60) -> np.ndarray:
    """Solve ``theta(x) = y`` by damped Newton iteration, vectorized over points.

    ``x0`` defaults to ``y`` itself.  Raises :class:`DeformationError` when
    some point fails to converge.
    """
    y = _points(y)
    shape = y.shape
    yf = y.reshape(-1, 2)
    x = yf.copy() if x0 is None else _points(x0).reshape(-1, 2).astype(float, copy=True)
    scale = 1.0 + np.hypot(yf[:, 0], yf[:, 1])
    for _ in range(max_iter):
        res = theta._eval(x) - yf
        err = np.hypot(res[:, 0], res[:, 1])
        if np.all(err <= tol * scale):
            return x.reshape(shape)
        jac = theta._jac(x)
        step = np.linalg.solve(jac, res[..., None])[..., 0]
        # halve the step where it does not reduce the residual
        lam = np.ones(len(x))
        for _ in range(30):
            trial = x - lam[:, None] * step
            tres = theta._eval(trial) - yf
            worse = np.hypot(tres[:, 0], tres[:, 1]) > err
            if not np.any(worse & (err > tol * scale)):
                break
            lam = np.where(worse, 0.5 * lam, lam)
        x = x - lam[:, None] * step
    res = np.hypot(*(theta._eval(x) - yf).T)
    raise DeformationError(f"inverse did not converge: max residual {np.max(res):.3g}")


# ---------------------------------------------------------------------------
# expressions and configuration

_ALLOWED_FUNCS = ("exp", "log", "sin", "cos", "sqrt", "pow")


@dataclass(frozen=True, eq=False)
class Expression:
    """A scalar function of one variable parsed from text, with its derivative."""

    text: str
    variable: str
    fn: Callable = field(repr=False)
    dfn: Callable = field(repr=False)

    def __call__(self, s):
        return _vec(self.fn, np.asarray(s, dtype=float))

    def derivative(self, s):
        return _vec(self.dfn, np.asarray(s, dtype=float))

    def __repr__(self):
        return f"Expression({self.text!r})"


def parse_expression(text: str, variable: str) -> Expression:
    """Parse an arithmetic expression in one variable.

    Grammar: numbers, the variable, ``+ - * / ** ^``, parentheses and the
    functions ``exp log sin cos sqrt pow``.  Anything else is rejected.
    """
    import sympy
    from sympy.parsing.sympy_parser import convert_xor, parse_expr, standard_transformations

    if variable not in ("s", "t", "r"):
        raise DeformationError(f"expression variable must be s, t or r, got {variable!r}")
    sym = sympy.Symbol(variable, real=True)
    local = {variable: sym, "pi": sympy.pi, "pow": sympy.Pow}
    local.update({name: getattr(sympy, name) for name in _ALLOWED_FUNCS if name != "pow"})
    try:
        expr = parse_expr(
            str(text),
            local_dict=local,
            global_dict={"Integer": sympy.Integer, "Float": sympy.Float, "Rational": sympy.Rational,
                         "Symbol": sympy.Symbol},
            transformations=standard_transformations + (convert_xor,),
        )
    except Exception as exc:  # sympy raises a zoo of exception types
        raise DeformationError(f"cannot parse expression {text!r}: {exc}") from exc
    if not isinstance(expr, sympy.Expr):
        raise DeformationError(f"{text!r} is not an arithmetic expression")
    extra = expr.free_symbols - {sym}
    if extra:
        raise DeformationError(f"expression {text!r} uses unknown names {sorted(map(str, extra))}")
    allowed = {sympy.exp, sympy.log, sympy.sin, sympy.cos}
    for f in expr.atoms(sympy.Function):
        if f.func not in allowed:
            raise DeformationError(f"function {f.func} is not allowed in {text!r}")
    fn = sympy.lambdify(sym, expr, "numpy")
    dfn = sympy.lambdify(sym, sympy.diff(expr, sym), "numpy")
    return Expression(str(text), variable, fn, dfn)


def from_config(cfg: dict, box_radius: float = 1.0) -> Deformation:
    """Build a deformation from a configuration mapping.

    Recognized kinds::

        {kind: identity}
        {kind: linear, matrix: [[a, b], [c, d]]}
        {kind: linear_spiral, scale: 2.0, angle: 0.3}
        {kind: tensorial, theta1: "s**3/3 + s", theta2: "t"}
        {kind: spiral, f: "r**2", g: "log(1 + r)"}
        {kind: composite, parts: [<outer>, ..., <inner>]}
    """
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise DeformationError(f"deformation config needs a 'kind', got {cfg!r}")
    kind = str(cfg["kind"]).lower()
    if kind == "identity":
        return identity()
    if kind == "linear":
        return Linear(cfg["matrix"])
    if kind == "linear_spiral":
        return linear_spiral(float(cfg.get("scale", 1.0)), float(cfg.get("angle", 0.0)))
    if kind == "tensorial":
        t1 = parse_expression(cfg.get("theta1", "s"), "s")
        t2 = parse_expression(cfg.get("theta2", "t"), "t")
        return Tensorial(t1, t2, t1.derivative, t2.derivative, box_radius=box_radius)
    if kind == "spiral":
        f = parse_expression(cfg.get("f", "r"), "r")
        g = parse_expression(cfg.get("g", "0"), "r")
        return Spiral(f, g, f.derivative, g.derivative, box_radius=box_radius)
    if kind == "composite":
        parts = cfg.get("parts") or []
        return Composite([from_config(p, box_radius) for p in parts])
    raise DeformationError(f"unknown deformation kind {kind!r}")
