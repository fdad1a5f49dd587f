"""Recovering a deformation from mean modified Euler characteristics.

The mean modified Euler characteristic of ``X o theta`` over a segment or a
rectangle is a known multiple of the length or area of its image under
``theta``.  Inverting those relations over families of segments and
rectangles anchored at the origin gives cumulative lengths and areas whose
derivatives are the column norms ``a, b`` and the determinant ``c`` of the
Jacobian.  A Jacobian is determined by ``(a, b, c)`` only up to a rotation and
a sign branch, which is why both representatives are always reported.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .covariance import CovarianceModel, expected_chi_2d, expected_phi
from .deform import Deformation, Rect, Segment, image_area, image_length, image_perimeter
from .excursion import cell_weights, excursion_mask, modified_euler_1d, modified_euler_2d
from .field_sim import derive_seed, simulate, source_grid_for
from .quadrature import integrate_2d

log = logging.getLogger(__name__)

__all__ = [
    "IdentificationError",
    "TableEntry",
    "MeanECTable",
    "domain_of",
    "analytic_table",
    "analytic_partition_table",
    "partition_domains",
    "montecarlo_table",
    "phi_on_domain",
    "invert_phi_1d",
    "invert_phi_2d",
    "MatrixClass",
    "DilatationCandidates",
    "dilatation",
    "LinearIdentification",
    "identify_linear",
    "ABCField",
    "recover_abc_field",
    "derivative_matrix",
    "TensorialResult",
    "identify_tensorial",
    "PowerLawFit",
    "fit_power_law",
    "IsotropyReport",
    "chi_isotropy_test",
]

TWO_PI = 2.0 * math.pi
DOMAIN_KINDS = ("hseg", "vseg", "rect")
TABLE_COLUMNS = ("domain_kind", "s", "t", "u", "mean_phi", "std_err", "n")
ABC_COLUMNS = ("s", "t", "a", "b", "c", "err_a", "err_b", "err_c")


class IdentificationError(ValueError):
    """Inconsistent or insufficient data for an identification method."""


# ---------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class TableEntry:
    """One mean modified Euler characteristic.

    ``kind`` is ``hseg`` for ``[0, s] x {t}``, ``vseg`` for ``{s} x [0, t]``
    and ``rect`` for ``[0, s] x [0, t]``; ``n = 0`` marks an analytic value.
    """

    kind: str
    s: float
    t: float
    u: float
    mean_phi: float
    std_err: float = 0.0
    n: int = 0

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise IdentificationError(f"unknown domain kind {self.kind!r}")
        if not self.std_err >= 0:
            raise IdentificationError(f"std_err must be non-negative, got {self.std_err}")


def _key(kind: str, s: float, t: float, u: float) -> tuple:
    return (kind, round(float(s), 12), round(float(t), 12), round(float(u), 12))


def domain_of(kind: str, s: float, t: float):
    """The :class:`Segment` or :class:`Rect` a table key refers to."""
    if kind == "hseg":
        return Segment.horizontal(s, t)
    if kind == "vseg":
        return Segment.vertical(t, s)
    if kind == "rect":
        return Rect(s, t)
    raise IdentificationError(f"unknown domain kind {kind!r}")


class MeanECTable:
    """Mean modified Euler characteristics keyed by ``(kind, s, t, u)``."""

    def __init__(self, entries: Iterable[TableEntry] = ()):
        self._entries: dict[tuple, TableEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: TableEntry) -> None:
        self._entries[_key(entry.kind, entry.s, entry.t, entry.u)] = entry

    def get(self, kind: str, s: float, t: float, u: float) -> TableEntry:
        try:
            return self._entries[_key(kind, s, t, u)]
        except KeyError:
            raise IdentificationError(f"table has no entry for {kind} s={s} t={t} u={u}") from None

    def __contains__(self, key) -> bool:
        return _key(*key) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    @property
    def levels(self) -> list[float]:
        return sorted({e.u for e in self})

    def to_csv(self, path=None, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for e in self:
            writer.writerow([e.kind, *(repr(float(v)) for v in (e.s, e.t, e.u, e.mean_phi, e.std_err)), int(e.n)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "MeanECTable":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
        reader = csv.DictReader(lines)
        missing = set(TABLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise IdentificationError(f"{path}: missing columns {sorted(missing)}")
        entries = []
        for row in reader:
            entries.append(
                TableEntry(
                    row["domain_kind"], float(row["s"]), float(row["t"]), float(row["u"]),
                    float(row["mean_phi"]), float(row["std_err"]), int(row["n"]),
                )
            )
        return cls(entries)


def analytic_table(theta: Deformation, domains: Sequence[tuple[str, float, float]],
                   levels: Sequence[float], rtol: float = 1e-12) -> MeanECTable:
    """Exact expectations from the image measures of each ``(kind, s, t)`` domain."""
    table = MeanECTable()
    for kind, s, t in domains:
        dom = domain_of(kind, s, t)
        if kind == "rect":
            dim, measure = 2, image_area(theta, dom, rtol)
        else:
            dim, measure = 1, image_length(theta, dom, rtol)
        for u in levels:
            table.add(TableEntry(kind, s, t, u, float(expected_phi(dim, measure, u))))
    return table


def _check_partition(sigma) -> tuple[np.ndarray, float]:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 1 or sigma.size < 5:
        raise IdentificationError(f"partition needs at least 5 nodes, got {sigma.size}")
    steps = np.diff(sigma)
    h = float(np.mean(steps))
    if not h > 0 or np.max(np.abs(steps - h)) > 1e-9 * max(1.0, abs(h)):
        raise IdentificationError("partition must be uniform and increasing")
    if np.min(np.abs(sigma)) > 1e-9 * h and not np.isclose(np.round(sigma[0] / h) * h, sigma[0]):
        raise IdentificationError("partition nodes must be multiples of the step (0 on the lattice)")
    return sigma, h


def _lattice_with_zero(sigma: np.ndarray, h: float) -> np.ndarray:
    """Uniform lattice of step ``h`` spanning ``sigma`` and 0."""
    k0 = int(round(min(sigma[0], 0.0) / h))
    k1 = int(round(max(sigma[-1], 0.0) / h))
    return np.arange(k0, k1 + 1) * h


def partition_domains(sigma) -> list[tuple[str, float, float]]:
    """Every ``(kind, s, t)`` domain the general recovery reads for ``sigma``."""
    sigma, h = _check_partition(sigma)
    grid = [float(v) for v in _lattice_with_zero(sigma, h)]
    out = []
    for s in grid:
        for t in grid:
            if s != 0:
                out.append(("hseg", s, t))
            if t != 0:
                out.append(("vseg", s, t))
            if s != 0 and t != 0:
                out.append(("rect", s, t))
    return out


def analytic_partition_table(theta: Deformation, sigma, levels: Sequence[float],
                             rtol: float = 1e-13) -> MeanECTable:
    """Exact table over the lattice spanned by ``sigma`` and 0.

    This is the set of entries :func:`recover_abc_field` reads
    (see :func:`partition_domains`).

    Every image length and area is assembled from integrals over the lattice
    cells between 0 and the node, so the whole table costs one quadrature per
    cell instead of one per domain.
    """
    sigma, h = _check_partition(sigma)
    grid = _lattice_with_zero(sigma, h)
    n = grid.size
    zero = int(np.argmin(np.abs(grid)))

    def seg_len(p, q):
        return image_length(theta, Segment(tuple(p), tuple(q)), rtol)

    # horizontal pieces [grid[i], grid[i+1]] x {grid[j]} and vertical analogues
    hpiece = np.array([[seg_len((grid[i], grid[j]), (grid[i + 1], grid[j])) for j in range(n)]
                       for i in range(n - 1)])
    vpiece = np.array([[seg_len((grid[i], grid[j]), (grid[i], grid[j + 1])) for j in range(n - 1)]
                       for i in range(n)])

    def cell_area(i, j):
        def dens(x, y):
            return np.abs(theta.det_jacobian(np.stack([x, y], -1)))

        return integrate_2d(dens, grid[i], grid[i + 1], grid[j], grid[j + 1], rtol=rtol, atol=1e-16).value

    cells = np.array([[cell_area(i, j) for j in range(n - 1)] for i in range(n - 1)])
    hcum = _cumulative_from(hpiece, zero, axis=0)
    vcum = _cumulative_from(vpiece, zero, axis=1)
    acum = _cumulative_from(_cumulative_from(cells, zero, axis=0), zero, axis=1)
    table = MeanECTable()
    for i, s in enumerate(grid):
        for j, t in enumerate(grid):
            for u in levels:
                if s != 0:
                    table.add(TableEntry("hseg", s, t, u, float(expected_phi(1, abs(hcum[i, j]), u))))
                if t != 0:
                    table.add(TableEntry("vseg", s, t, u, float(expected_phi(1, abs(vcum[i, j]), u))))
                if s != 0 and t != 0:
                    table.add(TableEntry("rect", s, t, u, float(expected_phi(2, abs(acum[i, j]), u))))
    return table


def _cumulative_from(pieces: np.ndarray, zero: int, axis: int) -> np.ndarray:
    """Signed cumulative sums of lattice pieces starting at node ``zero``.

    ``pieces`` has one entry fewer than the node count along ``axis``; the
    result holds, at every node, the signed sum of pieces between ``zero`` and
    that node.
    """
    p = np.moveaxis(pieces, axis, 0)
    out = np.zeros((p.shape[0] + 1,) + p.shape[1:])
    out[zero + 1 :] = np.cumsum(p[zero:], axis=0)
    if zero > 0:
        out[:zero] = -np.cumsum(p[:zero][::-1], axis=0)[::-1]
    return np.moveaxis(out, 0, axis)


def _max_stretch(theta: Deformation, pts: np.ndarray) -> float:
    sv = np.linalg.svd(theta.jacobian(pts, check=False), compute_uv=False)
    return float(max(np.max(sv[..., 0]), 1e-12))


def _domain_nodes(theta: Deformation, domain, spacing: float):
    """Source-space sampling nodes for ``domain`` and their cell weights.

    The step is ``spacing`` divided by the largest stretch of ``theta`` over
    the domain, so image-space steps do not exceed ``spacing``.  One extra
    node (ring) is added outside the domain.
    """
    if isinstance(domain, Segment):
        a, b = np.asarray(domain.a), np.asarray(domain.b)
        probe = a + np.linspace(0, 1, 33)[:, None] * (b - a)
        step = spacing / _max_stretch(theta, probe)
        n = max(int(math.ceil(domain.length / step)), 2)
        tau = np.arange(-1, n + 2) / n
        pts = a + tau[:, None] * (b - a)
        weights = np.ones(n + 3)
        weights[[0, -1]] = 0.0
        weights[[1, -2]] = 0.5
        return pts, weights
    (x0, x1), (y0, y1) = domain.x_range, domain.y_range
    gx, gy = np.meshgrid(np.linspace(x0, x1, 17), np.linspace(y0, y1, 17), indexing="ij")
    step = spacing / _max_stretch(theta, domain.to_world(np.stack([gx, gy], -1)))
    nx = max(int(math.ceil((x1 - x0) / step)), 2)
    ny = max(int(math.ceil((y1 - y0) / step)), 2)
    xs = x0 + np.arange(-1, nx + 2) * (x1 - x0) / nx
    ys = y0 + np.arange(-1, ny + 2) * (y1 - y0) / ny
    px, py = np.meshgrid(xs, ys, indexing="ij")
    pts = domain.to_world(np.stack([px, py], -1))
    return pts, cell_weights(px.shape)


def phi_on_domain(values: np.ndarray, weights: np.ndarray, u: float) -> float:
    """Weighted critical-point estimate of the modified Euler characteristic."""
    mask = excursion_mask(values, u)
    if values.ndim == 1:
        return modified_euler_1d(mask, method="critical", region=weights)
    return modified_euler_2d(mask, method="critical", region=weights)


def montecarlo_table(theta: Deformation, domains: Sequence[tuple[str, float, float]],
                     levels: Sequence[float], reps: int, seed: int,
                     model: CovarianceModel | None = None, spacing: float = 0.1,
                     source_spacing: float = 0.25) -> MeanECTable:
    """Monte Carlo means of the modified Euler characteristic of ``X o theta``.

    Each replication simulates one realization of ``X`` covering the images
    of all domains (seed derived from ``seed`` and the replication index), so
    the entries of one replication are dependent while replications are not.
    """
    if reps < 2:
        raise IdentificationError(f"Monte Carlo tables need at least 2 replications, got {reps}")
    model = model or CovarianceModel.gaussian_exp()
    nodes = [_domain_nodes(theta, domain_of(*d), spacing) for d in domains]
    mapped = [theta.eval(p) for p, _ in nodes]
    if not mapped:
        return MeanECTable()
    cover = source_grid_for(np.concatenate([m.reshape(-1, 2) for m in mapped]), source_spacing)
    sums = np.zeros((len(domains), len(levels), 2))
    for r in range(reps):
        sample = simulate(cover, model, derive_seed(seed, r)).sampler
        for k, (m, (_, w)) in enumerate(zip(mapped, nodes)):
            vals = sample(m)
            for q, u in enumerate(levels):
                phi = phi_on_domain(vals, w, u)
                sums[k, q] += (phi, phi * phi)
    table = MeanECTable()
    for k, (kind, s, t) in enumerate(domains):
        for q, u in enumerate(levels):
            mean = sums[k, q, 0] / reps
            var = max(sums[k, q, 1] / reps - mean**2, 0.0) * reps / (reps - 1)
            table.add(TableEntry(kind, s, t, u, float(mean), float(math.sqrt(var / reps)), reps))
    return table


# ---------------------------------------------------------------------------
# inversion of the closed forms


def invert_phi_1d(mean_phi, u: float, std_err=0.0):
    """Image length from a mean 1-D modified Euler characteristic.

    A negative mean beyond three standard errors is logged as suspicious.
    """
    if not np.isfinite(u):
        raise IdentificationError(f"level must be finite, got {u}")
    mean_phi = np.asarray(mean_phi, dtype=float)
    if np.any(mean_phi < -3.0 * np.asarray(std_err)):
        log.warning("negative mean 1-D modified Euler characteristic beyond 3 standard errors")
    out = mean_phi * TWO_PI * math.exp(0.5 * u * u)
    return float(out) if out.ndim == 0 else out


def invert_phi_2d(mean_phi, u: float, std_err=0.0):
    """Image area from a mean 2-D modified Euler characteristic (``u != 0``)."""
    if u == 0 or not np.isfinite(u):
        raise IdentificationError("area cannot be recovered at level u = 0: the 2-D density vanishes")
    mean_phi = np.asarray(mean_phi, dtype=float)
    factor = TWO_PI**1.5 * math.exp(0.5 * u * u) / u
    if np.any(mean_phi * np.sign(u) < -3.0 * np.asarray(std_err)):
        log.warning("mean 2-D modified Euler characteristic has the wrong sign beyond 3 standard errors")
    out = mean_phi * factor
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# matrix classes and dilatation


@dataclass(frozen=True)
class MatrixClass:
    """Matrices with column norms ``a, b`` and determinant ``c``, up to rotation.

    ``representatives`` are the two upper-triangular members
    ``[[a, +-sqrt(b^2 - (c/a)^2)], [0, c/a]]``; every member is a rotation of
    one of them.
    """

    a: float
    b: float
    c: float
    representatives: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    def __post_init__(self):
        a, b, c = self.a, self.b, self.c
        if not (a > 0 and b > 0):
            raise IdentificationError(f"column norms must be positive, got a={a}, b={b}")
        off2 = b * b - (c / a) ** 2
        if off2 < 0:
            if off2 < -1e-9 * b * b:
                raise IdentificationError(f"no matrix has column norms ({a}, {b}) and determinant {c}")
            off2 = 0.0
        off = math.sqrt(off2)
        reps = (np.array([[a, off], [0.0, c / a]]), np.array([[a, -off], [0.0, c / a]]))
        for m in reps:
            m.setflags(write=False)
        object.__setattr__(self, "representatives", reps)

    def gram_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(m.T @ m for m in self.representatives)

    def contains(self, matrix, tol: float = 1e-10) -> bool:
        """Whether ``matrix`` is a rotation of one representative (Gram test)."""
        m = np.asarray(matrix, dtype=float)
        if np.linalg.det(m) <= 0:
            return False
        g = m.T @ m
        scale = max(1.0, float(np.max(np.abs(g))))
        return any(np.max(np.abs(g - r)) <= tol * scale for r in self.gram_matrices())


@dataclass(frozen=True)
class DilatationCandidates:
    """The two conjugate candidates for the complex dilatation."""

    plus: complex
    minus: complex

    @property
    def modulus(self) -> float:
        return abs(self.plus)

    @property
    def values(self) -> tuple[complex, complex]:
        return (self.plus, self.minus)


def dilatation(a: float, b: float, c: float, tol: float = 1e-12) -> DilatationCandidates:
    """``(a^2 - b^2 +- 2i sqrt(a^2 b^2 - c^2)) / (a^2 + b^2 + 2c)``.

    ``c`` may exceed ``a b`` by a relative ``tol`` (round-off), in which case
    the square root is taken as zero.
    """
    if not (a > 0 and b > 0 and c > 0):
        raise IdentificationError(f"need a, b, c > 0, got ({a}, {b}, {c})")
    ab = a * b
    if c > ab * (1.0 + tol):
        raise IdentificationError(f"c = {c} exceeds a*b = {ab}")
    # factored so that c == a*b gives an exact zero
    disc = max((ab - c) * (ab + c), 0.0)
    den = a * a + b * b + 2.0 * c
    re = (a - b) * (a + b) / den
    im = 2.0 * math.sqrt(disc) / den
    return DilatationCandidates(complex(re, im), complex(re, -im))


@dataclass(frozen=True)
class LinearIdentification:
    a: float
    b: float
    c: float
    matrices: MatrixClass
    dilatation: DilatationCandidates
    angles: tuple[float, float]
    errors: tuple[float, float, float] = (0.0, 0.0, 0.0)


def identify_linear(table: MeanECTable, u: float, s: float = 1.0, t: float = 1.0,
                    tol: float = 1e-9) -> LinearIdentification:
    """Column norms and determinant of a linear deformation.

    Uses the entries for ``[0, s] x {0}``, ``{0} x [0, t]`` and
    ``[0, s] x [0, t]`` at level ``u``.  ``angles`` are the two possible angles
    between the columns, ``arcsin(c / ab)`` and its supplement.
    """
    if s == 0 or t == 0:
        raise IdentificationError("s and t must be nonzero")
    eh = table.get("hseg", s, 0.0, u)
    ev = table.get("vseg", 0.0, t, u)
    er = table.get("rect", s, t, u)
    a = invert_phi_1d(eh.mean_phi, u, eh.std_err) / abs(s)
    b = invert_phi_1d(ev.mean_phi, u, ev.std_err) / abs(t)
    c = invert_phi_2d(er.mean_phi, u, er.std_err) / abs(s * t)
    errs = (
        abs(invert_phi_1d(eh.std_err, u)) / abs(s),
        abs(invert_phi_1d(ev.std_err, u)) / abs(t),
        abs(invert_phi_2d(er.std_err, u)) / abs(s * t),
    )
    slack = tol * a * b + 3.0 * (errs[0] * b + errs[1] * a + errs[2])
    if c > a * b + slack:
        raise IdentificationError(f"inconsistent table: c = {c:.6g} exceeds a*b = {a * b:.6g}")
    c_eff = min(c, a * b)
    ratio = min(c_eff / (a * b), 1.0)
    delta = math.asin(ratio)
    return LinearIdentification(
        a, b, c, MatrixClass(a, b, c_eff), dilatation(a, b, c_eff), (delta, math.pi - delta), errs
    )


# ---------------------------------------------------------------------------
# general (pointwise) recovery


# leading truncation constants of the central first-derivative stencils
_TRUNCATION = {4: 1.0 / 30.0, 6: 1.0 / 140.0}


def _stencil(offsets: np.ndarray) -> np.ndarray:
    """First-derivative weights on integer ``offsets`` (unit spacing)."""
    k = offsets.size
    vander = np.vander(offsets.astype(float), k, increasing=True).T
    rhs = np.zeros(k)
    rhs[1] = 1.0
    return np.linalg.solve(vander, rhs)


def derivative_matrix(n: int, h: float, order: int = 4) -> np.ndarray:
    """First-derivative operator of the given (even) ``order`` on ``n`` uniform nodes.

    Central ``order + 1``-point stencils inside; near the ends the window is
    shifted to stay inside, giving one-sided stencils of the same order.
    """
    if order not in _TRUNCATION:
        raise IdentificationError(f"unsupported difference order {order}; use one of {sorted(_TRUNCATION)}")
    width = order + 1
    if n < width:
        raise IdentificationError(f"order-{order} differences need at least {width} nodes, got {n}")
    half = order // 2
    d = np.zeros((n, n))
    for i in range(n):
        lo = min(max(i - half, 0), n - width)
        d[i, lo : lo + width] = _stencil(np.arange(lo, lo + width) - i)
    return d / h


def _truncation_estimate(f: np.ndarray, h: float, axis: int, order: int = 4) -> np.ndarray:
    """``C h^p |f^(p+1)|`` with the derivative from the nearest ``p + 2``-node window.

    Returns zeros when too few nodes are available.
    """
    g = np.moveaxis(f, axis, 0)
    n = g.shape[0]
    out = np.zeros_like(g)
    if n < order + 2:
        return np.moveaxis(out, 0, axis)
    high = np.diff(g, n=order + 1, axis=0) / h ** (order + 1)
    for i in range(n):
        k = min(max(i - order // 2, 0), n - order - 2)
        out[i] = np.abs(high[k]) * h**order * _TRUNCATION[order]
    return np.moveaxis(out, 0, axis)


@dataclass(frozen=True, eq=False)
class ABCField:
    """``(a, b, c)`` on the lattice ``s x t`` with propagated errors.

    Arrays have shape ``(len(s), len(t))``.  ``flagged`` marks nodes whose
    error exceeds 20% of the value or whose value is non-positive beyond
    three errors.
    """

    s: np.ndarray
    t: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    err_a: np.ndarray
    err_b: np.ndarray
    err_c: np.ndarray
    flagged: np.ndarray
    order: int = 4

    def at(self, s: float, t: float):
        i = int(np.argmin(np.abs(self.s - s)))
        j = int(np.argmin(np.abs(self.t - t)))
        return self.a[i, j], self.b[i, j], self.c[i, j]

    def interior(self, width: int | None = None) -> tuple[slice, slice]:
        """Index slices of the nodes where central stencils were used.

        ``width`` defaults to half the difference order.  Only nodes kept from
        ``sigma`` count, so near 0 the slices are exact only when ``sigma``
        covers the whole lattice.
        """
        width = self.order // 2 if width is None else width
        return slice(width, len(self.s) - width), slice(width, len(self.t) - width)

    def to_csv(self, path=None, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ABC_COLUMNS)
        for i, s in enumerate(self.s):
            for j, t in enumerate(self.t):
                writer.writerow([repr(float(v)) for v in (
                    s, t, self.a[i, j], self.b[i, j], self.c[i, j],
                    self.err_a[i, j], self.err_b[i, j], self.err_c[i, j],
                )])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _flag(value: np.ndarray, err: np.ndarray) -> np.ndarray:
    return (err > 0.2 * np.abs(value)) | (value <= 3.0 * err)


def recover_abc_field(table: MeanECTable, u: float, sigma, order: int = 4) -> ABCField:
    """Pointwise ``a = |J^1|``, ``b = |J^2|`` and ``c = det J`` on ``sigma x sigma``.

    The table must hold, at level ``u`` and for every nonzero ``s, t`` in
    the lattice spanned by ``sigma`` and 0, the entries ``hseg (s, t)``,
    ``vseg (s, t)`` and ``rect (s, t)``.  Lengths and areas are signed by the
    orientation of ``[0, s]`` and ``[0, t]`` so that they are smooth through 0;
    ``a`` and ``b`` are their first derivatives and ``c`` the mixed second
    derivative of the area.  Errors combine the propagated standard errors
    (entries treated as independent) with a truncation estimate.

    ``order`` selects the finite-difference order (4 or 6).  Sixth order
    needs 7 nodes but cuts the truncation error on smooth exact tables by
    roughly ``h^2``; with noisy tables it amplifies noise more.
    """
    if u == 0:
        raise IdentificationError("general recovery needs u != 0")
    sigma, h = _check_partition(sigma)
    grid = _lattice_with_zero(sigma, h)
    n = grid.size
    L1 = np.zeros((n, n))
    L2 = np.zeros((n, n))
    A = np.zeros((n, n))
    V1 = np.zeros((n, n))
    V2 = np.zeros((n, n))
    VA = np.zeros((n, n))
    for i, s in enumerate(grid):
        for j, t in enumerate(grid):
            if s != 0:
                e = table.get("hseg", s, t, u)
                L1[i, j] = math.copysign(invert_phi_1d(e.mean_phi, u, e.std_err), s)
                V1[i, j] = invert_phi_1d(e.std_err, u) ** 2
            if t != 0:
                e = table.get("vseg", s, t, u)
                L2[i, j] = math.copysign(invert_phi_1d(e.mean_phi, u, e.std_err), t)
                V2[i, j] = invert_phi_1d(e.std_err, u) ** 2
            if s != 0 and t != 0:
                e = table.get("rect", s, t, u)
                A[i, j] = math.copysign(1.0, s * t) * invert_phi_2d(e.mean_phi, u, e.std_err)
                VA[i, j] = invert_phi_2d(e.std_err, u) ** 2
    d = derivative_matrix(n, h, order)
    d2 = d * d
    a = d @ L1
    b = L2 @ d.T
    c = d @ A @ d.T
    err_a = np.sqrt(d2 @ V1) + _truncation_estimate(L1, h, 0, order)
    err_b = np.sqrt(V2 @ d2.T) + _truncation_estimate(L2, h, 1, order)
    err_c = (
        np.sqrt(d2 @ VA @ d2.T)
        + _truncation_estimate(A @ d.T, h, 0, order)
        + _truncation_estimate(d @ A, h, 1, order)
    )
    flagged = _flag(a, err_a) | _flag(b, err_b) | _flag(c, err_c)
    keep = np.isin(np.round(grid / h), np.round(sigma / h))
    sel = np.ix_(keep, keep)
    return ABCField(
        grid[keep], grid[keep], a[sel], b[sel], c[sel], err_a[sel], err_b[sel], err_c[sel], flagged[sel], order
    )


# ---------------------------------------------------------------------------
# tensorial recovery and power laws


@dataclass(frozen=True, eq=False)
class TensorialResult:
    """``|theta_1'|`` and ``|theta_2'|`` on ``s``; components when signs are known."""

    s: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    err1: np.ndarray
    err2: np.ndarray
    theta1: np.ndarray | None
    theta2: np.ndarray | None
    warning: str | None = None


def identify_tensorial(table: MeanECTable, u: float, sigma, signs: tuple[int, int] | str | None = None,
                       order: int = 4) -> TensorialResult:
    """Recover the components of ``theta(s, t) = (theta_1(s), theta_2(t))``.

    Needs ``hseg (s, 0)`` and ``vseg (0, s)`` for every nonzero ``s`` in the
    lattice spanned by ``sigma`` and 0.  The signed cumulative image lengths
    are the integrals of ``|theta_i'|``; with the sign of each (monotone)
    component they are the components themselves.  Without ``signs`` only
    the magnitudes are returned, with a warning.
    """
    sigma, h = _check_partition(sigma)
    grid = _lattice_with_zero(sigma, h)
    n = grid.size
    lam = np.zeros((2, n))
    var = np.zeros((2, n))
    for i, s in enumerate(grid):
        if s == 0:
            continue
        for k, (kind, key) in enumerate((("hseg", (s, 0.0)), ("vseg", (0.0, s)))):
            e = table.get(kind, key[0], key[1], u)
            lam[k, i] = math.copysign(invert_phi_1d(e.mean_phi, u, e.std_err), s)
            var[k, i] = invert_phi_1d(e.std_err, u) ** 2
    d = derivative_matrix(n, h, order)
    deriv = lam @ d.T
    err = np.sqrt(var @ (d * d).T) + np.stack([_truncation_estimate(lam[k], h, 0, order) for k in range(2)])
    keep = np.isin(np.round(grid / h), np.round(sigma / h))
    warning = None
    theta1 = theta2 = None
    if isinstance(signs, str):
        signs = tuple(1 if ch == "+" else -1 for ch in signs.strip())
    if signs is None:
        warning = "component signs not given: only |theta_1'| and |theta_2'| are identified"
        log.warning(warning)
    else:
        if len(signs) != 2 or any(sg not in (1, -1) for sg in signs):
            raise IdentificationError(f"signs must be two of +1/-1, got {signs!r}")
        theta1 = signs[0] * lam[0, keep]
        theta2 = signs[1] * lam[1, keep]
    return TensorialResult(grid[keep], deriv[0, keep], deriv[1, keep], err[0, keep], err[1, keep],
                           theta1, theta2, warning)


@dataclass(frozen=True)
class PowerLawFit:
    """Fit of ``log y = log|alpha| + (alpha - 1) log s``.

    ``intercept_residual`` is ``|intercept - log|alpha||``: small values mean
    the magnitude and the exponent agree.
    """

    alpha: float
    slope: float
    intercept: float
    intercept_residual: float
    rms: float
    constant: bool = False


def fit_power_law(s, y, rel_tol: float = 1e-12) -> PowerLawFit:
    """Exponent of ``y = |alpha| s^(alpha - 1)`` by least squares in log-log space.

    Samples that are constant (relative spread ``<= rel_tol``) give
    ``alpha = 1`` directly.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if s.shape != y.shape or s.size < 2:
        raise IdentificationError("need at least two (s, y) samples of equal length")
    if np.any(s <= 0) or np.any(y <= 0):
        raise IdentificationError("power-law fit needs positive s and y")
    if np.ptp(y) <= rel_tol * np.max(y):
        level = float(np.mean(y))
        return PowerLawFit(1.0, 0.0, math.log(level), abs(math.log(level)), 0.0, True)
    ls, ly = np.log(s), np.log(y)
    design = np.stack([np.ones_like(ls), ls], -1)
    (intercept, slope), *_ = np.linalg.lstsq(design, ly, rcond=None)
    alpha = float(slope + 1.0)
    rms = float(np.sqrt(np.mean((design @ np.array([intercept, slope]) - ly) ** 2)))
    resid = abs(float(intercept) - math.log(abs(alpha))) if alpha != 0 else math.inf
    return PowerLawFit(alpha, float(slope), float(intercept), resid, rms)


# ---------------------------------------------------------------------------
# chi-isotropy


@dataclass(frozen=True)
class IsotropyReport:
    passed: bool
    analytic_passed: bool | None
    jacobian_passed: bool | None
    analytic_deviation: float
    jacobian_deviation: float
    worst_angle: float
    expected: tuple[float, ...]


def chi_isotropy_test(theta: Deformation, rect: Rect, angles: Sequence[float], u: float,
                      mode: str = "both", tol_analytic: float = 1e-6, tol_jacobian: float = 1e-8,
                      n_probe: int = 12) -> IsotropyReport:
    """Rotation invariance of the mean Euler characteristic over ``rect``.

    ``analytic`` compares ``E chi`` over the images of ``rho_alpha(rect)``
    (relative deviation from the unrotated value).  ``jacobian`` checks that
    ``J_{theta o rho}(x)`` and ``J_theta(x)`` have the same column norms and
    determinant on a probe lattice over the rectangle.
    """
    angles = [float(a) for a in angles]
    if not angles:
        raise IdentificationError("need at least one angle")
    if mode not in ("analytic", "jacobian", "both"):
        raise IdentificationError(f"unknown mode {mode!r}")
    worst_angle = angles[0]
    dev_a = dev_j = 0.0
    expected: tuple[float, ...] = ()
    passed_a = passed_j = None
    if mode in ("analytic", "both"):
        ref = float(expected_chi_2d(image_area(theta, rect), image_perimeter(theta, rect), u))
        vals = []
        for alpha in angles:
            r = rect.rotated(alpha)
            val = float(expected_chi_2d(image_area(theta, r), image_perimeter(theta, r), u))
            vals.append(val)
            dev = abs(val - ref) / max(abs(ref), 1e-300)
            if dev > dev_a:
                dev_a, worst_angle = dev, alpha
        expected = tuple(vals)
        passed_a = dev_a <= tol_analytic
    if mode in ("jacobian", "both"):
        (x0, x1), (y0, y1) = rect.x_range, rect.y_range
        gx, gy = np.meshgrid(np.linspace(x0, x1, n_probe), np.linspace(y0, y1, n_probe), indexing="ij")
        pts = rect.to_world(np.stack([gx, gy], -1)).reshape(-1, 2)
        base = theta.jacobian(pts, check=False)
        q0 = _column_quantities(base)
        worst_j = 0.0
        for alpha in angles:
            c, s = math.cos(alpha), math.sin(alpha)
            rot = np.array([[c, -s], [s, c]])
            jr = theta.jacobian(pts @ rot.T, check=False) @ rot
            q = _column_quantities(jr)
            dev = float(np.max(np.abs(q - q0) / np.maximum(np.abs(q0), 1e-300)))
            if dev > worst_j:
                worst_j = dev
                if mode == "jacobian":
                    worst_angle = alpha
        dev_j = worst_j
        passed_j = dev_j <= tol_jacobian
    passed = all(p for p in (passed_a, passed_j) if p is not None)
    return IsotropyReport(passed, passed_a, passed_j, dev_a, dev_j, worst_angle, expected)


def _column_quantities(jac: np.ndarray) -> np.ndarray:
    a = np.hypot(jac[:, 0, 0], jac[:, 1, 0])
    b = np.hypot(jac[:, 0, 1], jac[:, 1, 1])
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    return np.stack([a, b, det], -1)
