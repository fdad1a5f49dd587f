"""Isotropic covariance models and the closed-form mean Euler characteristic densities.

Every model is normalized so that ``C(0) = 1`` and the Hessian at the origin is
``-I_2``: the gradient of the field then has identity covariance, and the
Lipschitz-Killing curvatures of a planar domain reduce to area, half the
perimeter and the Euler characteristic of the domain.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "CovarianceError",
    "ModelKind",
    "CovarianceModel",
    "hermite",
    "hermite_minus_one",
    "gaussian_tail",
    "rho",
    "expected_chi_2d",
    "expected_chi_1d",
    "expected_phi",
    "hessian_at_origin",
]

TWO_PI = 2.0 * math.pi


class CovarianceError(ValueError):
    """Raised for invalid covariance models or out-of-range arguments."""


class ModelKind(str, enum.Enum):
    GAUSSIAN_EXP = "gaussian_exp"
    POWERED_EXP = "powered_exp"
    MATERN = "matern"


def _raw_radial(kind: ModelKind, r, power: float, nu: float):
    r = np.asarray(r, dtype=float)
    if kind is ModelKind.GAUSSIAN_EXP:
        return np.exp(-(r**2))
    if kind is ModelKind.POWERED_EXP:
        return np.exp(-(r**power))
    # Matern with unit inverse range: 2^{1-nu}/Gamma(nu) r^nu K_nu(r)
    out = np.ones_like(r)
    pos = r > 0
    rp = r[pos]
    out[pos] = (2.0 ** (1.0 - nu) / special.gamma(nu)) * rp**nu * special.kv(nu, rp)
    return out


@dataclass(frozen=True)
class CovarianceModel:
    """Radial covariance ``C(x) = k(scale * |x|)`` normalized to unit variance and unit
    second spectral moment.

    Use the ``gaussian_exp``, ``powered_exp`` and ``matern`` constructors; they
    pick ``scale`` so that ``C''(0) = -I_2``.
    """

    kind: ModelKind
    scale: float
    power: float = 2.0
    nu: float = float("nan")

    @classmethod
    def gaussian_exp(cls) -> "CovarianceModel":
        # raw exp(-r^2) has C''(0) = -2 I
        return cls(ModelKind.GAUSSIAN_EXP, 1.0 / math.sqrt(2.0))

    @classmethod
    def powered_exp(cls, power: float) -> "CovarianceModel":
        if not 0.0 < power <= 2.0:
            raise CovarianceError(f"powered_exp power must lie in (0, 2], got {power}")
        if power < 2.0:
            # exp(-r^p) is not twice differentiable at 0 for p < 2
            raise CovarianceError(
                f"powered_exp with power {power} < 2 has no finite C''(0); "
                "sample paths are not C^2"
            )
        return cls(ModelKind.POWERED_EXP, 1.0 / math.sqrt(2.0), power=2.0)

    @classmethod
    def matern(cls, nu: float) -> "CovarianceModel":
        if not nu > 2.0:
            raise CovarianceError(f"matern smoothness must exceed 2 for C^4 regularity, got {nu}")
        # -k''(0) = 1 / (2 (nu - 1)) for the unit-range Matern
        return cls(ModelKind.MATERN, math.sqrt(2.0 * (nu - 1.0)), nu=float(nu))

    @classmethod
    def from_name(cls, name: str, **params) -> "CovarianceModel":
        key = name.lower().replace("-", "_")
        if key in ("gaussian_exp", "gaussian", "gaussianexp"):
            return cls.gaussian_exp()
        if key in ("powered_exp", "poweredexp"):
            return cls.powered_exp(float(params.get("power", 2.0)))
        if key in ("matern", "maternlike", "matern_like"):
            return cls.matern(float(params["nu"]))
        raise CovarianceError(f"unknown covariance model {name!r}")

    def params(self) -> dict:
        if self.kind is ModelKind.POWERED_EXP:
            return {"power": self.power}
        if self.kind is ModelKind.MATERN:
            return {"nu": self.nu}
        return {}

    def radial(self, r):
        """Covariance as a function of the lag norm."""
        return _raw_radial(self.kind, self.scale * np.asarray(r, dtype=float), self.power, self.nu)

    def __call__(self, x):
        """Evaluate ``C`` at lag vector(s) ``x`` with trailing dimension 2."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 2:
            raise CovarianceError("lag vectors must have a trailing dimension of 2")
        return self.radial(np.hypot(x[..., 0], x[..., 1]))

    evaluate = __call__

    def derivative(self, order: tuple[int, int], x):
        """Partial derivative ``d^{order} C`` at lag(s) ``x``.

        Closed form for the Gaussian family, where the covariance factorizes:
        ``d^n/dx^n exp(-x^2/2) = (-1)^n He_n(x) exp(-x^2/2)``.
        """
        if self.kind not in (ModelKind.GAUSSIAN_EXP, ModelKind.POWERED_EXP):
            raise NotImplementedError("analytic derivatives are only available for the Gaussian model")
        x = np.asarray(x, dtype=float)
        i, j = order
        x1, x2 = x[..., 0], x[..., 1]
        sign = -1.0 if (i + j) % 2 else 1.0
        return sign * hermite(i, x1) * hermite(j, x2) * np.exp(-0.5 * (x1**2 + x2**2))


def hessian_at_origin(model: CovarianceModel, step: float = 1e-4) -> np.ndarray:
    """Second-difference estimate of ``C''(0)``."""
    h = step
    c0 = float(model(np.zeros(2)))

    def c(dx, dy):
        return float(model(np.array([dx, dy])))

    hxx = (c(h, 0) - 2 * c0 + c(-h, 0)) / h**2
    hyy = (c(0, h) - 2 * c0 + c(0, -h)) / h**2
    hxy = (c(h, h) - c(h, -h) - c(-h, h) + c(-h, -h)) / (4 * h**2)
    return np.array([[hxx, hxy], [hxy, hyy]])


def hermite(n: int, x):
    """Probabilists' Hermite polynomial ``He_n`` by the three-term recurrence."""
    if n < 0:
        raise CovarianceError("use hermite_minus_one for n = -1")
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x.copy()
    if n == 0:
        return prev
    for k in range(1, n):
        prev, cur = cur, x * cur - k * prev
    return cur


def gaussian_tail(u):
    """Standard normal tail ``P(N(0,1) >= u)`` via erfc."""
    return 0.5 * special.erfc(np.asarray(u, dtype=float) / math.sqrt(2.0))


def hermite_minus_one(x):
    """``H_{-1}(x) = sqrt(2 pi) Psi(x) exp(x^2/2)``, computed with the scaled erfc."""
    x = np.asarray(x, dtype=float)
    # erfcx(z) = exp(z^2) erfc(z) keeps this finite for large x
    return math.sqrt(TWO_PI) * 0.5 * special.erfcx(x / math.sqrt(2.0))


def rho(i: int, u):
    """Euler characteristic density ``rho_i(u) = (2 pi)^{-(i+1)/2} H_{i-1}(u) e^{-u^2/2}``."""
    if i not in (0, 1, 2):
        raise CovarianceError(f"rho index must be 0, 1 or 2, got {i}")
    u = np.asarray(u, dtype=float)
    if i == 0:
        return _scalar(gaussian_tail(u))
    return _scalar(TWO_PI ** (-(i + 1) / 2.0) * hermite(i - 1, u) * np.exp(-0.5 * u**2))


def _scalar(value):
    value = np.asarray(value, dtype=float)
    return float(value) if value.ndim == 0 else value


def _nonnegative(name: str, value: float) -> None:
    if np.any(np.asarray(value) < 0):
        raise CovarianceError(f"{name} must be non-negative, got {value}")


def expected_chi_2d(area, perimeter, u):
    """Mean Euler characteristic of the excursion set over a planar domain.

    Parameters
    ----------
    area, perimeter : float
        Lebesgue measure and boundary length of the deformed domain.
    u : float
        Excursion level.
    """
    _nonnegative("area", area)
    _nonnegative("perimeter", perimeter)
    u = np.asarray(u, dtype=float)
    return _scalar(
        np.exp(-0.5 * u**2) * (u * area / TWO_PI**1.5 + perimeter / (4.0 * math.pi))
        + gaussian_tail(u)
    )


def expected_chi_1d(length, u):
    """Mean Euler characteristic (number of intervals) over a curve of given length."""
    _nonnegative("length", length)
    u = np.asarray(u, dtype=float)
    return _scalar(np.exp(-0.5 * u**2) * length / TWO_PI + gaussian_tail(u))


def expected_phi(dim: int, measure, u):
    """Mean modified Euler characteristic: top Lipschitz-Killing term only."""
    if dim not in (1, 2):
        raise CovarianceError(f"dim must be 1 or 2, got {dim}")
    _nonnegative("measure", measure)
    u = np.asarray(u, dtype=float)
    if dim == 2:
        return _scalar(np.exp(-0.5 * u**2) * u * measure / TWO_PI**1.5)
    return _scalar(np.exp(-0.5 * u**2) * measure / TWO_PI)
