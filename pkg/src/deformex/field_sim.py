"""Simulation of stationary isotropic Gaussian fields and of deformed fields.

Lattice samples come from circulant embedding, which reproduces the target
covariance exactly at lattice lags.  Each realization is kept as the finite
trigonometric sum that generated it, so the same realization can be evaluated
at arbitrary points (for instance on ``theta(grid)``) without interpolation
error at the nodes.

Lattice convention: ``values[i, j]`` is the field at
``(origin[0] + i * spacing, origin[1] + j * spacing)``; the first array axis
follows the first coordinate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import CovarianceModel

log = logging.getLogger(__name__)

__all__ = [
    "SimulationError",
    "GridSpec",
    "GridField",
    "FieldSample",
    "make_rng",
    "derive_seed",
    "simulate",
    "sample_along",
    "deformed_field",
    "simulate_deformed",
    "save_gfd",
    "load_gfd",
]

GFD_VERSION = 1
# eigenvalues below this fraction of the largest are FFT round-off
_SPECTRAL_FLOOR = 1e-13
_PSD_TOL = 1e-10


class SimulationError(RuntimeError):
    """Raised when a field cannot be simulated or evaluated."""


@dataclass(frozen=True)
class GridSpec:
    """Regular square lattice: ``shape[0]`` nodes along x, ``shape[1]`` along y."""

    origin: tuple[float, float]
    spacing: float
    shape: tuple[int, int]

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if len(self.shape) != 2 or min(self.shape) < 2:
            raise ValueError(f"shape components must be >= 2, got {self.shape}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def covering(cls, lower, upper, spacing: float, margin: int = 0) -> "GridSpec":
        """Pixel-centred lattice whose pixels tile the box ``[lower, upper]``.

        ``margin`` extra rings of pixels are added outside the box.
        """
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = np.maximum(np.rint((upper - lower) / spacing).astype(int), 1)
        origin = lower + (0.5 - margin) * spacing
        return cls(tuple(origin), spacing, tuple(int(k) + 2 * margin for k in n))

    @classmethod
    def spanning(cls, lower, upper, spacing: float, margin: int = 0) -> "GridSpec":
        """Lattice with nodes on the boundary of the box ``[lower, upper]``.

        The convex hull of the nodes is the box itself (when its sides are
        multiples of ``spacing``), which is what the cubical Euler
        characteristic of the sampled excursion set refers to.  ``margin``
        extra rings of nodes are added outside.
        """
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = np.maximum(np.rint((upper - lower) / spacing).astype(int), 1) + 1
        origin = lower - margin * spacing
        return cls(tuple(origin), spacing, tuple(int(k) + 2 * margin for k in n))

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.spacing * np.arange(self.shape[0])

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.spacing * np.arange(self.shape[1])

    @property
    def upper(self) -> tuple[float, float]:
        return (
            self.origin[0] + self.spacing * (self.shape[0] - 1),
            self.origin[1] + self.spacing * (self.shape[1] - 1),
        )

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n_x, n_y, 2)``."""
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class FieldSample:
    """One realization as a trigonometric sum, evaluable inside ``bbox``.

    ``X(p) = Re sum_{m,n} amp[m, n] exp(i (kx[m] dx + ky[n] dy))`` with
    ``(dx, dy) = p - origin``.
    """

    origin: tuple[float, float]
    kx: np.ndarray
    ky: np.ndarray
    amp: np.ndarray
    bbox: tuple[float, float, float, float]
    grid: "GridField | None" = None
    method: str = "spectral"
    chunk: int = 16384

    def _check_inside(self, pts: np.ndarray) -> None:
        x0, x1, y0, y1 = self.bbox
        tol = 1e-9 * max(1.0, abs(x1 - x0), abs(y1 - y0))
        inside = (
            (pts[:, 0] >= x0 - tol)
            & (pts[:, 0] <= x1 + tol)
            & (pts[:, 1] >= y0 - tol)
            & (pts[:, 1] <= y1 + tol)
        )
        if not np.all(inside):
            bad = pts[~inside][0]
            raise SimulationError(
                f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the sampled box {self.bbox}"
            )

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        shape = pts.shape[:-1]
        pts = pts.reshape(-1, 2)
        if pts.shape[0] == 0:
            return np.zeros(shape)
        if not np.all(np.isfinite(pts)):
            raise SimulationError("non-finite evaluation point")
        self._check_inside(pts)
        if self.method == "bilinear":
            return self._bilinear(pts).reshape(shape)
        out = np.empty(pts.shape[0])
        d = pts - np.asarray(self.origin)
        for lo in range(0, pts.shape[0], self.chunk):
            sl = slice(lo, lo + self.chunk)
            ex = np.exp(1j * np.outer(d[sl, 0], self.kx))
            ey = np.exp(1j * np.outer(d[sl, 1], self.ky))
            out[sl] = np.einsum("pn,pn->p", ex @ self.amp, ey).real
        return out.reshape(shape)

    def on_lattice(self, xs, ys) -> np.ndarray:
        """Evaluate on the rectilinear product ``xs x ys`` (separable, fast)."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        corners = np.array([[xs.min(), ys.min()], [xs.max(), ys.max()]])
        self._check_inside(corners)
        if self.method == "bilinear":
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            return self._bilinear(np.stack([gx.ravel(), gy.ravel()], -1)).reshape(gx.shape)
        ex = np.exp(1j * np.outer(xs - self.origin[0], self.kx))
        ey = np.exp(1j * np.outer(ys - self.origin[1], self.ky))
        return (ex @ self.amp @ ey.T).real

    def _bilinear(self, pts: np.ndarray) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator

        if self.grid is None:
            raise SimulationError("bilinear evaluation needs the lattice values")
        spec = self.grid.spec
        interp = RegularGridInterpolator((spec.xs, spec.ys), self.grid.values, method="linear")
        return interp(pts)

    def with_method(self, method: str) -> "FieldSample":
        if method not in ("spectral", "bilinear"):
            raise ValueError(f"unknown interpolation method {method!r}")
        return FieldSample(self.origin, self.kx, self.ky, self.amp, self.bbox, self.grid, method)


@dataclass(frozen=True, eq=False)
class GridField:
    """Lattice sample of a field, with the generating realization when known."""

    spec: GridSpec
    values: np.ndarray
    seed: int
    model: CovarianceModel
    sampler: FieldSample | None = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, replication: int) -> int:
    """Per-replication seed ``seed XOR replication``."""
    return (int(seed) ^ int(replication)) & 0xFFFFFFFFFFFFFFFF


def _embedding_eigenvalues(spec: GridSpec, model: CovarianceModel, size: tuple[int, int]):
    mx, my = size
    ix = np.arange(mx)
    iy = np.arange(my)
    dx = spec.spacing * np.minimum(ix, mx - ix)
    dy = spec.spacing * np.minimum(iy, my - iy)
    lags = np.hypot(dx[:, None], dy[None, :])
    cov = model.radial(lags)
    return np.fft.fft2(cov).real


def _support_radius(model: CovarianceModel, level: float = 1e-14) -> float:
    """Lag beyond which ``|C|`` stays below ``level`` (doubling search)."""
    r = 1.0
    while abs(float(model.radial(r))) > level and r < 1e4:
        r *= 2.0
    lo, hi = r / 2.0, r
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if abs(float(model.radial(mid))) > level:
            lo = mid
        else:
            hi = mid
    return hi


def _try_sizes(spec: GridSpec, model: CovarianceModel, sizes):
    low = top = float("nan")
    for size in sizes:
        lam = _embedding_eigenvalues(spec, model, size)
        top = lam.max()
        low = lam.min()
        if low >= -_PSD_TOL * top:
            if low < 0:
                log.debug("clipping embedding eigenvalues down to %.3g (size %s)", low, size)
            lam = np.where(lam < _SPECTRAL_FLOOR * top, 0.0, lam)
            return lam, size
    return None, low


def _embed(spec: GridSpec, model: CovarianceModel, max_pad: int = 8):
    n = spec.shape
    lam, info = _try_sizes(spec, model, [(pad * n[0], pad * n[1]) for pad in range(2, max_pad + 1)])
    if lam is not None:
        return lam, info[0] // n[0]
    # windows much smaller than the correlation range: embed on the covariance support instead
    reach = int(math.ceil(2.0 * _support_radius(model) / spec.spacing))
    base = (max(2 * n[0], reach), max(2 * n[1], reach))
    lam, low = _try_sizes(spec, model, [(pad * base[0], pad * base[1]) for pad in (1, 2)])
    if lam is not None:
        log.info("embedding grown to the covariance support: %s nodes", lam.shape)
        return lam, lam.shape[0] // n[0]
    raise SimulationError(
        f"circulant embedding of {model.kind.value} covariance is not positive semidefinite "
        f"up to pad factor {max_pad} (min eigenvalue {info:.3g})"
    )


_EMBED_CACHE: dict = {}


def _cached_embedding(spec: GridSpec, model: CovarianceModel):
    key = (spec.spacing, spec.shape, model)
    hit = _EMBED_CACHE.get(key)
    if hit is None:
        if len(_EMBED_CACHE) > 32:
            _EMBED_CACHE.clear()
        hit = _embed(spec, model)
        _EMBED_CACHE[key] = hit
    return hit


def simulate(spec: GridSpec, model: CovarianceModel, seed: int) -> GridField:
    """Simulate one realization on ``spec`` by circulant embedding.

    Parameters
    ----------
    spec : GridSpec
        Sampling lattice.
    model : CovarianceModel
        Normalized covariance.
    seed : int
        64-bit seed; identical inputs give bit-identical output.

    Returns
    -------
    GridField
        Lattice values plus a :class:`FieldSample` for off-lattice evaluation.
    """
    lam, pad = _cached_embedding(spec, model)
    mx, my = lam.shape
    total = mx * my
    rng = make_rng(seed)
    z = rng.standard_normal((2, mx, my))
    amp = np.sqrt(lam / total) * (z[0] + 1j * z[1])
    full = (total * np.fft.ifft2(amp)).real
    values = full[: spec.shape[0], : spec.shape[1]].copy()

    rows = np.flatnonzero(np.any(amp != 0, axis=1))
    cols = np.flatnonzero(np.any(amp != 0, axis=0))
    kx = 2 * math.pi * np.fft.fftfreq(mx, d=spec.spacing)[rows]
    ky = 2 * math.pi * np.fft.fftfreq(my, d=spec.spacing)[cols]
    block = amp[np.ix_(rows, cols)]
    x1, y1 = spec.upper
    bbox = (spec.origin[0], x1, spec.origin[1], y1)
    grid = GridField(spec, values, int(seed), model)
    sample = FieldSample(spec.origin, kx, ky, block, bbox, grid)
    return GridField(spec, values, int(seed), model, sample)


def sample_along(sample: FieldSample, points) -> np.ndarray:
    """Values of the realization at arbitrary points inside its box."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros(0)
    return sample(pts.reshape(-1, 2))


def deformed_field(sample: FieldSample, theta, spec: GridSpec) -> GridField:
    """Lattice sampling of ``X(theta(t))`` for ``t`` on ``spec``."""
    pts = spec.points().reshape(-1, 2)
    mapped = theta.eval(pts)
    values = sample(mapped).reshape(spec.shape)
    seed = sample.grid.seed if sample.grid is not None else 0
    model = sample.grid.model if sample.grid is not None else None
    return GridField(spec, values, seed, model)


def source_grid_for(points, spacing: float = 0.25, margin: float = 0.5) -> GridSpec:
    """Simulation lattice covering ``points`` with a safety margin."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    n = np.maximum(np.ceil((hi - lo) / spacing).astype(int) + 1, 2)
    return GridSpec(tuple(lo), spacing, tuple(int(k) for k in n))


def simulate_deformed(
    spec: GridSpec,
    theta,
    model: CovarianceModel,
    seed: int,
    source_spacing: float = 0.25,
) -> GridField:
    """Simulate ``X`` around ``theta(spec)`` and return ``X o theta`` on ``spec``."""
    mapped = theta.eval(spec.points().reshape(-1, 2))
    src = simulate(source_grid_for(mapped, source_spacing), model, seed)
    values = src.sampler(mapped).reshape(spec.shape)
    return GridField(spec, values, int(seed), model)


def save_gfd(grid: GridField, path, version: str = "0.1.0") -> None:
    """Write a ``.gfd`` file: text header, ``END`` line, little-endian float64 body."""
    spec = grid.spec
    model = grid.model
    header = [
        f"GFD {GFD_VERSION}",
        f"origin_x={spec.origin[0]!r}",
        f"origin_y={spec.origin[1]!r}",
        f"spacing={spec.spacing!r}",
        f"n_rows={spec.shape[0]}",
        f"n_cols={spec.shape[1]}",
        f"model={model.kind.value if model is not None else 'unknown'}",
        f"scale={model.scale!r}" if model is not None else "scale=nan",
    ]
    if model is not None:
        header += [f"param_{k}={v!r}" for k, v in model.params().items()]
    header += [f"seed={grid.seed}", f"version={version}", "END", ""]
    body = np.ascontiguousarray(grid.values, dtype="<f8").tobytes(order="C")
    Path(path).write_bytes("\n".join(header).encode("ascii") + body)


def load_gfd(path) -> GridField:
    raw = Path(path).read_bytes()
    marker = b"\nEND\n"
    cut = raw.find(marker)
    if not raw.startswith(b"GFD ") or cut < 0:
        raise ValueError(f"{path}: not a .gfd file")
    lines = raw[:cut].decode("ascii").splitlines()
    meta = dict(line.split("=", 1) for line in lines[1:])
    shape = (int(meta["n_rows"]), int(meta["n_cols"]))
    values = np.frombuffer(raw[cut + len(marker):], dtype="<f8")
    if values.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: body holds {values.size} values, header says {shape}")
    spec = GridSpec((float(meta["origin_x"]), float(meta["origin_y"])), float(meta["spacing"]), shape)
    params = {k[len("param_"):]: float(v) for k, v in meta.items() if k.startswith("param_")}
    model = CovarianceModel.from_name(meta["model"], **params) if meta["model"] != "unknown" else None
    return GridField(spec, values.reshape(shape).astype(float), int(meta["seed"]), model)
