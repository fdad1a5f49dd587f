"""Single-realization estimation for spiral deformations.

For a spiral ``theta`` the Jacobian determinant and column norms are radial,
so averaging the modified Euler characteristic of ``X o theta`` over ``N``
rotated copies of a small sector (or segment) at radius ``r0`` estimates
``|det J_theta|`` (or ``|J^1_theta|``) there.  ``Z_N`` uses sectors,
``Y_N`` radial segments.

This module also evaluates the integral formula for the variance of the
modified Euler characteristic over ``theta(T)``, with the conditional moments
estimated by Monte Carlo.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import CovarianceModel, expected_phi, rho
from .deform import Deformation, Rect, identity, image_area, inverse
from .excursion import critical_point_index_at, modified_euler_1d, excursion_mask
from .field_sim import FieldSample, derive_seed, make_rng, simulate, source_grid_for

log = logging.getLogger(__name__)

__all__ = [
    "SpiralEstimationError",
    "SectorFamily",
    "SegmentFamily",
    "DeformedSample",
    "sector_phis",
    "segment_phis",
    "z_estimator",
    "y_estimator",
    "EstimatorRun",
    "run_estimator",
    "DetJacFit",
    "regress_detjac",
    "regress_norm",
    "VarianceEstimate",
    "variance_formula",
    "conditional_moment_G",
    "moment_g",
    "D_factor",
    "set_covariance_radial",
]

TWO_PI = 2.0 * math.pi
DEFAULT_SCHEDULE = (8, 12, 16, 24, 32)
EST_COLUMNS = ("N", "mean_Z", "var_Z", "area_T0", "est_detjac", "normalized_var")
MIN_PIXELS = 8


class SpiralEstimationError(ValueError):
    """Invalid estimator input (under-resolved sectors, bad schedule, ...)."""


@dataclass(frozen=True)
class SectorFamily:
    """Sectors ``r0 <= r < r0 + 1/N``, ``phi0 + 2 pi k / N <= phi < phi0 + 2 pi (k+1) / N``."""

    r0: float
    phi0: float
    N: int

    def __post_init__(self):
        if not self.r0 > 0:
            raise SpiralEstimationError(f"r0 must be positive, got {self.r0}")
        if int(self.N) != self.N or self.N < 1:
            raise SpiralEstimationError(f"N must be a positive integer, got {self.N}")

    @property
    def width(self) -> float:
        return 1.0 / self.N

    @property
    def area(self) -> float:
        """``|T_N^0|``: ``(pi / N) ((r0 + 1/N)^2 - r0^2)``."""
        return (math.pi / self.N) * ((self.r0 + self.width) ** 2 - self.r0**2)

    def sector_of(self, pts: np.ndarray) -> np.ndarray:
        """Sector number of each point, ``-1`` outside the annulus slice."""
        r = np.hypot(pts[..., 0], pts[..., 1])
        ang = np.mod(np.arctan2(pts[..., 1], pts[..., 0]) - self.phi0, TWO_PI)
        k = np.floor(ang / (TWO_PI / self.N)).astype(int)
        k = np.minimum(k, self.N - 1)
        inside = (r >= self.r0) & (r < self.r0 + self.width)
        return np.where(inside, k, -1)


@dataclass(frozen=True)
class SegmentFamily:
    """Segments ``rho_{2 pi k / N}([x1, x1 + 1/N] x {x2})``."""

    x1: float
    x2: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise SpiralEstimationError(f"N must be a positive integer, got {self.N}")

    @property
    def length(self) -> float:
        return 1.0 / self.N

    def endpoints(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        ang = TWO_PI * k / self.N
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        a = rot @ np.array([self.x1, self.x2])
        b = rot @ np.array([self.x1 + self.length, self.x2])
        return a, b


@dataclass(frozen=True, eq=False)
class DeformedSample:
    """``X o theta`` as a callable on arrays of points."""

    sample: FieldSample
    theta: Deformation

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return self.sample(self.theta.eval(pts))


# ---------------------------------------------------------------------------
# rasterization caches: the geometry does not depend on the realization


@dataclass(frozen=True, eq=False)
class _SectorRaster:
    family: SectorFamily
    step: float
    shape: tuple[int, int]
    eval_rows: np.ndarray
    eval_cols: np.ndarray
    eval_pts: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    sector: np.ndarray


_RASTER_CACHE: dict = {}


def _sector_raster(family: SectorFamily, step: float) -> _SectorRaster:
    key = (family, step)
    hit = _RASTER_CACHE.get(key)
    if hit is not None:
        return hit
    outer = family.r0 + family.width
    n_half = int(math.ceil(outer / step)) + 2
    coords = (np.arange(-n_half, n_half) + 0.5) * step
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    pts = np.stack([gx, gy], -1)
    sector = family.sector_of(pts)
    rows, cols = np.nonzero(sector >= 0)
    r = np.hypot(gx, gy)
    band = (r >= family.r0 - 2 * step) & (r < outer + 2 * step)
    er, ec = np.nonzero(band)
    raster = _SectorRaster(family, step, gx.shape, er, ec, pts[er, ec], rows, cols, sector[rows, cols])
    if len(_RASTER_CACHE) > 64:
        _RASTER_CACHE.clear()
    _RASTER_CACHE[key] = raster
    return raster


def _sector_step(family: SectorFamily, step: float | None) -> float:
    radial = family.width
    angular = family.r0 * TWO_PI / family.N
    finest = min(radial, angular) / MIN_PIXELS
    if step is None:
        return finest
    if step > finest * (1 + 1e-12):
        raise SpiralEstimationError(
            f"pixel step {step:.4g} under-resolves the sectors (need <= {finest:.4g}, "
            f"i.e. {MIN_PIXELS} pixels across each sector dimension)"
        )
    return float(step)


def sector_phis(field, family: SectorFamily, u: float, step: float | None = None) -> np.ndarray:
    """Modified Euler characteristic estimate of every sector of the family.

    ``field`` maps an ``(n, 2)`` array of points to values of ``X o theta``.
    Pixels (side ``step``, default the coarsest allowed) belong to a sector
    when their centre does; each sector's estimate is the index sum of its
    pixels at or above ``u``.
    """
    step = _sector_step(family, step)
    raster = _sector_raster(family, step)
    values = np.full(raster.shape, -np.inf)
    values[raster.eval_rows, raster.eval_cols] = np.asarray(field(raster.eval_pts), dtype=float)
    index = critical_point_index_at(values, raster.rows, raster.cols).astype(float)
    above = values[raster.rows, raster.cols] >= u
    return np.bincount(raster.sector, weights=index * above, minlength=family.N)


def z_estimator(field, x, N: int, u: float, step: float | None = None) -> float:
    """``Z_N``: mean modified Euler characteristic over the ``N`` rotated sectors.

    ``x`` is the base point; its polar coordinates give ``r0`` and ``phi0``.
    """
    if u == 0:
        raise SpiralEstimationError("Z_N needs u != 0")
    x = np.asarray(x, dtype=float)
    family = SectorFamily(float(np.hypot(*x)), float(np.arctan2(x[1], x[0])), int(N))
    return float(np.mean(sector_phis(field, family, u, step)))


def segment_phis(field, family: SegmentFamily, u: float, step: float | None = None) -> np.ndarray:
    """1-D modified Euler characteristic estimate on each segment of the family."""
    finest = family.length / MIN_PIXELS
    if step is None:
        step = finest
    elif step > finest * (1 + 1e-12):
        raise SpiralEstimationError(f"sampling step {step:.4g} exceeds 1/(8N) = {finest:.4g}")
    n = int(math.ceil(family.length / step))
    tau = np.arange(-1, n + 2) / n
    weights = np.ones(n + 3)
    weights[[0, -1]] = 0.0
    weights[[1, -2]] = 0.5
    pts = []
    for k in range(family.N):
        a, b = family.endpoints(k)
        pts.append(a + tau[:, None] * (b - a))
    vals = np.asarray(field(np.concatenate(pts)), dtype=float).reshape(family.N, -1)
    out = np.empty(family.N)
    for k in range(family.N):
        out[k] = modified_euler_1d(excursion_mask(vals[k], u), method="critical", region=weights)
    return out


def y_estimator(field, x, N: int, u: float, step: float | None = None) -> float:
    """``Y_N``: mean 1-D modified Euler characteristic over the rotated segments."""
    x = np.asarray(x, dtype=float)
    family = SegmentFamily(float(x[0]), float(x[1]), int(N))
    return float(np.mean(segment_phis(field, family, u, step)))


# ---------------------------------------------------------------------------
# replicated runs and regressions


@dataclass(frozen=True, eq=False)
class EstimatorRun:
    """Per-``N`` replicated values of ``Z_N`` (``kind="Z"``) or ``Y_N`` (``kind="Y"``).

    ``measure`` holds ``|T_N^0|`` (area) or ``|S_N^0|`` (length).
    """

    kind: str
    schedule: tuple[int, ...]
    values: np.ndarray  # shape (len(schedule), reps)
    measure: np.ndarray
    u: float
    seeds: tuple[int, ...]

    @property
    def reps(self) -> int:
        return self.values.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def var(self) -> np.ndarray:
        return self.values.var(axis=1, ddof=1)

    def to_csv(self, path=None, comment: str | None = None) -> str:
        try:
            fit = regress_detjac(self) if self.kind == "Z" else regress_norm(self)
            per_n, norm_var = fit.per_n, fit.normalized_var
        except SpiralEstimationError:
            # keep the raw moments even when the regression is undefined
            per_n = norm_var = np.full(len(self.schedule), np.nan)
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EST_COLUMNS)
        for i, n in enumerate(self.schedule):
            writer.writerow([
                n, repr(float(self.mean[i])), repr(float(self.var[i])), repr(float(self.measure[i])),
                repr(float(per_n[i])), repr(float(norm_var[i])),
            ])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _schedule(schedule) -> tuple[int, ...]:
    sched = tuple(int(n) for n in schedule)
    if len(set(sched)) != len(sched) or any(n < 1 for n in sched):
        raise SpiralEstimationError(f"schedule must hold distinct positive integers, got {schedule}")
    return sched


def run_estimator(theta: Deformation, r0: float, phi0: float = 0.0, schedule=DEFAULT_SCHEDULE,
                  reps: int = 200, u: float = 1.0, seed: int = 0, kind: str = "Z",
                  model: CovarianceModel | None = None, source_spacing: float = 0.25,
                  progress=None) -> EstimatorRun:
    """Replicate ``Z_N`` (sectors) or ``Y_N`` (segments) over an ``N``-schedule.

    Replication ``i`` uses seed ``seed XOR i``; one realization serves every
    ``N`` of that replication.  ``kind="Y"`` uses the base point
    ``(r0 cos phi0, r0 sin phi0)`` for the segment family.
    """
    sched = _schedule(schedule)
    if kind not in ("Z", "Y"):
        raise SpiralEstimationError(f"kind must be 'Z' or 'Y', got {kind!r}")
    if reps < 2:
        raise SpiralEstimationError("need at least 2 replications")
    model = model or CovarianceModel.gaussian_exp()
    outer = r0 + 1.0 / min(sched) + 0.05
    ring = np.linspace(0, TWO_PI, 721)
    probe = np.concatenate([
        np.stack([rr * np.cos(ring), rr * np.sin(ring)], -1) for rr in np.linspace(0, outer, 24)
    ])
    cover = source_grid_for(theta.eval(probe), source_spacing)
    base = np.array([r0 * math.cos(phi0), r0 * math.sin(phi0)])
    values = np.empty((len(sched), reps))
    seeds = tuple(derive_seed(seed, i) for i in range(reps))
    for i, s in enumerate(seeds):
        field = DeformedSample(simulate(cover, model, s).sampler, theta)
        for j, n in enumerate(sched):
            if kind == "Z":
                values[j, i] = z_estimator(field, base, n, u)
            else:
                values[j, i] = y_estimator(field, base, n, u)
        if progress is not None:
            progress(i + 1, reps)
    if kind == "Z":
        measure = np.array([SectorFamily(r0, phi0, n).area for n in sched])
    else:
        measure = np.array([1.0 / n for n in sched])
    return EstimatorRun(kind, sched, values, measure, float(u), seeds)


@dataclass(frozen=True, eq=False)
class DetJacFit:
    """Regression of the replicated means on the domain measure.

    ``estimate`` is the through-origin slope divided by the known density
    constant; ``per_n`` the same ratio at each ``N``; ``normalized_var`` is
    ``N Var / (estimate * measure)``.
    """

    estimate: float
    slope: float
    constant: float
    residuals: np.ndarray
    per_n: np.ndarray
    normalized_var: np.ndarray
    stderr: float

    @property
    def variance_ratio(self) -> float:
        nv = self.normalized_var
        return float(np.max(nv) / np.min(nv)) if np.all(nv > 0) else math.inf


def _through_origin(x: np.ndarray, y: np.ndarray, y_var: np.ndarray | None):
    slope = float(np.dot(x, y) / np.dot(x, x))
    resid = y - slope * x
    se = math.sqrt(float(np.dot(x * x, y_var)) / float(np.dot(x, x)) ** 2) if y_var is not None else math.nan
    return slope, resid, se


def _fit(run: EstimatorRun, constant: float) -> DetJacFit:
    if len(run.schedule) < 4:
        raise SpiralEstimationError(f"regression needs at least 4 distinct N values, got {len(run.schedule)}")
    mean = run.mean
    var_mean = run.var / run.reps
    slope, resid, se = _through_origin(run.measure, mean, var_mean)
    if not slope > 0:
        raise SpiralEstimationError(f"non-positive regression slope {slope:.4g}")
    est = slope / constant
    per_n = mean / (constant * run.measure)
    n = np.asarray(run.schedule, dtype=float)
    norm_var = n * run.var / (est * run.measure)
    return DetJacFit(est, slope, constant, resid, per_n, norm_var, se / constant)


def regress_detjac(run: EstimatorRun) -> DetJacFit:
    """``|det J_theta(x)|`` from ``Z_N`` means: slope on ``|T_N^0|`` over ``rho_2(u)``."""
    if run.kind != "Z":
        raise SpiralEstimationError("regress_detjac needs a Z_N run")
    if run.u == 0:
        raise SpiralEstimationError("the 2-D density vanishes at u = 0")
    return _fit(run, float(rho(2, run.u)))


def regress_norm(run: EstimatorRun) -> DetJacFit:
    """``|J^1_theta(x)|`` from ``Y_N`` means: slope on ``|S_N^0|`` over ``rho_1(u)``."""
    if run.kind != "Y":
        raise SpiralEstimationError("regress_norm needs a Y_N run")
    return _fit(run, float(rho(1, run.u)))


def regress_values(measure, means, u: float, dim: int = 2) -> float:
    """Noiseless helper: slope of ``means`` on ``measure`` over the density constant."""
    measure = np.asarray(measure, dtype=float)
    means = np.asarray(means, dtype=float)
    slope, _, _ = _through_origin(measure, means, None)
    return slope / float(expected_phi(dim, 1.0, u))


# ---------------------------------------------------------------------------
# variance formula


def D_factor(model: CovarianceModel, t) -> np.ndarray:
    """``(2 pi)^4 det(I - C''(t)^2)``."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    h = _hessian(model, t)
    m = np.eye(2) - h @ h
    return TWO_PI**4 * np.linalg.det(m)


def _hessian(model: CovarianceModel, t: np.ndarray) -> np.ndarray:
    h = np.empty(t.shape[:-1] + (2, 2))
    h[..., 0, 0] = model.derivative((2, 0), t)
    h[..., 1, 1] = model.derivative((0, 2), t)
    h[..., 0, 1] = h[..., 1, 0] = model.derivative((1, 1), t)
    return h


# multi-indices of (X, X11, X12, X22) and (X1, X2)
_LEVEL_BLOCK = [(0, 0), (2, 0), (1, 1), (0, 2)]
_GRAD_BLOCK = [(1, 0), (0, 1)]


def _cross_cov(model: CovarianceModel, alphas, betas, lag: np.ndarray) -> np.ndarray:
    """``Cov(d^alpha X(p), d^beta X(q))`` with ``lag = p - q``."""
    out = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            order = (a[0] + b[0], a[1] + b[1])
            sign = -1.0 if (b[0] + b[1]) % 2 else 1.0
            out[i, j] = sign * float(model.derivative(order, lag))
    return out


def _conditional_cov(model: CovarianceModel, t: np.ndarray) -> np.ndarray:
    """Covariance of ``(X, X'')`` at 0 and ``t`` given ``X'(0) = X'(t) = 0`` (8 x 8)."""
    z = np.zeros(2)
    lv, gr = _LEVEL_BLOCK, _GRAD_BLOCK
    s11 = np.block([[_cross_cov(model, lv, lv, z), _cross_cov(model, lv, lv, -t)],
                    [_cross_cov(model, lv, lv, t), _cross_cov(model, lv, lv, z)]])
    s12 = np.block([[_cross_cov(model, lv, gr, z), _cross_cov(model, lv, gr, -t)],
                    [_cross_cov(model, lv, gr, t), _cross_cov(model, lv, gr, z)]])
    s22 = np.block([[_cross_cov(model, gr, gr, z), _cross_cov(model, gr, gr, -t)],
                    [_cross_cov(model, gr, gr, t), _cross_cov(model, gr, gr, z)]])
    cond = s11 - s12 @ np.linalg.solve(s22, s12.T)
    return 0.5 * (cond + cond.T)


def conditional_moment_G(model: CovarianceModel, t, u: float, n: int = 100_000, seed: int = 0,
                         min_eig: float = 1e-8):
    """Monte Carlo ``G(u, t)`` and its standard error.

    ``G = E[1{X(0) >= u} 1{X(t) >= u} det X''(0) det X''(t) | X'(0) = X'(t) = 0]``.
    Returns ``(nan, nan)`` when the conditional covariance has an eigenvalue
    below ``min_eig`` (the conditioning degenerates as ``t -> 0``).
    """
    t = np.asarray(t, dtype=float)
    cov = _conditional_cov(model, t)
    w, v = np.linalg.eigh(cov)
    if w.min() < min_eig:
        return math.nan, math.nan
    root = v * np.sqrt(w)
    z = make_rng(seed).standard_normal((n, 8)) @ root.T
    det0 = z[:, 1] * z[:, 3] - z[:, 2] ** 2
    det1 = z[:, 5] * z[:, 7] - z[:, 6] ** 2
    f = (z[:, 0] >= u) * (z[:, 4] >= u) * det0 * det1
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(n))


def moment_g(model: CovarianceModel, u: float, n: int = 1_000_000, seed: int = 1):
    """Monte Carlo ``g(u) = E[1{X >= u} |det X''|]`` and its standard error."""
    z0 = np.zeros(2)
    cov = _cross_cov(model, _LEVEL_BLOCK, _LEVEL_BLOCK, z0)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    root = v * np.sqrt(np.clip(w, 0, None))
    z = make_rng(seed).standard_normal((n, 4)) @ root.T
    f = (z[:, 0] >= u) * np.abs(z[:, 1] * z[:, 3] - z[:, 2] ** 2)
    return float(f.mean()), float(f.std(ddof=1) / math.sqrt(n))


def set_covariance_radial(theta: Deformation, rect: Rect, radii, step: float = 0.02,
                          n_angles: int = 720) -> np.ndarray:
    """Angle average of ``|A cap (A - t)|`` over ``|t| = r`` for ``A = theta(rect)``.

    ``A`` is rasterized on a square lattice (membership of a pixel centre via
    the inverse map) and its autocorrelation computed by FFT; the average over
    each circle of lags uses bilinear interpolation of that autocorrelation.
    """
    from scipy.ndimage import map_coordinates

    (x0, x1), (y0, y1) = rect.x_range, rect.y_range
    gx, gy = np.meshgrid(np.linspace(x0, x1, 65), np.linspace(y0, y1, 65), indexing="ij")
    img = theta.eval(rect.to_world(np.stack([gx, gy], -1))).reshape(-1, 2)
    lo = img.min(axis=0) - 2 * step
    hi = img.max(axis=0) + 2 * step
    n = np.ceil((hi - lo) / step).astype(int) + 1
    cx = lo[0] + step * np.arange(n[0])
    cy = lo[1] + step * np.arange(n[1])
    px, py = np.meshgrid(cx, cy, indexing="ij")
    centres = np.stack([px, py], -1).reshape(-1, 2)
    pre = inverse(theta, centres) if not _is_identity(theta) else centres
    local = _to_local(rect, pre)
    inside = (
        (local[:, 0] >= x0) & (local[:, 0] < x1) & (local[:, 1] >= y0) & (local[:, 1] < y1)
    ).reshape(px.shape).astype(float)
    mx, my = 2 * n[0], 2 * n[1]
    spec = np.fft.rfft2(inside, s=(mx, my))
    auto = np.fft.irfft2(spec * np.conj(spec), s=(mx, my)) * step * step
    auto = np.fft.fftshift(auto)
    centre = np.array([mx // 2, my // 2], dtype=float)
    ang = np.arange(n_angles) * TWO_PI / n_angles
    radii = np.asarray(radii, dtype=float)
    out = np.empty(radii.shape)
    for i, r in enumerate(radii.ravel()):
        coords = centre[:, None] + (r / step) * np.stack([np.cos(ang), np.sin(ang)])
        vals = map_coordinates(auto, coords, order=1, mode="constant", cval=0.0)
        out.ravel()[i] = max(float(vals.mean()), 0.0)
    return out


def _is_identity(theta: Deformation) -> bool:
    return hasattr(theta, "matrix") and np.array_equal(theta.matrix, np.eye(2))


def _to_local(rect: Rect, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(rect.rotation), math.sin(rect.rotation)
    back = np.stack([c * pts[:, 0] + s * pts[:, 1], -s * pts[:, 0] + c * pts[:, 1]], -1)
    return back - np.asarray(rect.translation)


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    """Variance of the modified Euler characteristic over ``theta(T)``.

    ``value = pair_term + diagonal_term``.  ``mc_error`` is the Monte Carlo
    standard error from ``G`` and ``g``.  Lags below ``excluded_radius`` have a
    degenerate conditional law; their contribution (included in
    ``pair_term``) extends the kernel from the first retained lag, and
    ``excluded_bound`` bounds its error by the kernel's observed variation
    over the next lags.
    """

    value: float
    pair_term: float
    diagonal_term: float
    mc_error: float
    excluded_radius: float
    excluded_bound: float
    radii: np.ndarray = field(repr=False)
    kernel: np.ndarray = field(repr=False)
    kernel_se: np.ndarray = field(repr=False)
    overlap: np.ndarray = field(repr=False)


def _radial_nodes(r_max: float, order: int = 8):
    """Gauss-Legendre nodes on panels refined toward 0."""
    edges = [0.0, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5]
    r = 2.0
    while r < r_max:
        edges.append(r)
        r += 0.5
    edges = np.array([e for e in edges if e < r_max] + [r_max])
    x, w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def variance_formula(theta: Deformation | None, rect: Rect, u: float, mc_budget: int = 100_000,
                     model: CovarianceModel | None = None, seed: int = 0, r_cut: float | None = None,
                     raster_step: float = 0.02, min_eig: float = 1e-8) -> VarianceEstimate:
    """Second-moment formula for ``Var[phi(A_u(X, theta(T)))]``.

    ``Var = int |A cap (A - t)| (G(u, t) D(t)^{-1/2} - h(u)^2) dt + |A| g(u) / (2 pi)``
    with ``A = theta(T)`` and ``h(u) = rho_2(u)``.  The factor ``D^{-1/2}`` is
    the density of ``(X'(0), X'(t))`` at 0, which is what makes the integrand
    vanish at large lags.  The isotropic kernel is integrated radially against
    the angle-averaged set covariance of ``A``.  Lags beyond ``r_cut``
    (default: where the covariance and its derivatives drop below ``1e-12``)
    contribute nothing.
    """
    if mc_budget < 10_000:
        raise SpiralEstimationError(f"mc_budget must be at least 1e4, got {mc_budget}")
    model = model or CovarianceModel.gaussian_exp()
    if model.kind.value not in ("gaussian_exp", "powered_exp"):
        raise SpiralEstimationError("the variance formula needs analytic covariance derivatives")
    theta = theta or identity()
    if r_cut is None:
        # Gaussian model: |d^4 C| < 1e-12 beyond this lag
        r_cut = 8.0
    area = image_area(theta, rect, rtol=1e-10)
    hu = float(rho(2, u))
    radii, weights = _radial_nodes(r_cut)
    kern = np.full(radii.shape, np.nan)
    kern_se = np.full(radii.shape, np.nan)
    for i, r in enumerate(radii):
        lag = np.array([r, 0.0])
        g_val, g_se = conditional_moment_G(model, lag, u, mc_budget, seed=seed, min_eig=min_eig)
        if math.isnan(g_val):
            continue
        root_d = math.sqrt(float(D_factor(model, lag)[0]))
        kern[i] = g_val / root_d - hu * hu
        kern_se[i] = g_se / root_d
    overlap = set_covariance_radial(theta, rect, radii, step=raster_step)
    ok = ~np.isnan(kern)
    integrand = TWO_PI * radii * overlap
    pair = float(np.sum(weights[ok] * integrand[ok] * kern[ok]))
    pair_se = float(np.sqrt(np.sum((weights[ok] * integrand[ok] * kern_se[ok]) ** 2)))
    g_val, g_se = moment_g(model, u, n=max(10 * mc_budget, 1_000_000), seed=seed + 1)
    diag = area * g_val / TWO_PI
    excluded = float(radii[~ok].max()) if np.any(~ok) else 0.0
    ball = bound = 0.0
    if excluded > 0:
        # small-lag handling: the kernel is flat near 0, so it is extended as
        # a constant from the first retained node into the excluded ball
        first = np.flatnonzero(ok)[0]
        inner = ~ok
        ball = float(kern[first] * np.sum(weights[inner] * integrand[inner]))
        window = ok & (radii <= 2.0 * max(excluded, radii[first]))
        spread = float(np.max(np.abs(kern[window] - kern[first]))) + 2.0 * float(kern_se[first])
        bound = spread * float(np.sum(weights[inner] * integrand[inner]))
    pair += ball
    return VarianceEstimate(
        pair + diag, pair, diag, math.hypot(pair_se, area * g_se / TWO_PI), excluded, bound,
        radii, kern, kern_se, overlap,
    )
