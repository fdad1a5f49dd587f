"""Excursion sets on lattices and their (modified) Euler characteristics.

Pixels are closed squares centred on the lattice nodes, so the Euler
characteristic of a mask is the literal ``V - E + F`` of the cubical complex
they generate (8-connected foreground, 4-connected background).

The modified Euler characteristic keeps only the area term of the mean Euler
characteristic.  It is estimated by the index-weighted count of critical
points of the sampled field above the level: maxima and minima count +1,
saddles -1.  A mask-only boundary-corrected estimator is kept as a cross-check.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "ExcursionMask",
    "EulerStats",
    "excursion_mask",
    "euler_characteristic_2d",
    "euler_characteristic_1d",
    "modified_euler_2d",
    "modified_euler_1d",
    "critical_point_index",
    "critical_point_index_at",
    "mask_index_total",
    "count_components_holes",
    "cell_weights",
    "write_pbm",
    "append_stats_csv",
]

_EIGHT = np.ones((3, 3), dtype=bool)
_FOUR = ndimage.generate_binary_structure(2, 1)

@dataclass(frozen=True, eq=False)
class ExcursionMask:
    """Indicator ``values >= level`` on a 1-D or 2-D lattice.

    ``values`` is retained (when the mask was built from a field) because the
    critical-point estimator of the modified Euler characteristic needs it.
    """

    bits: np.ndarray
    level: float
    values: np.ndarray | None = None
    spec: object = None

    @property
    def ndim(self) -> int:
        return self.bits.ndim


@dataclass(frozen=True)
class EulerStats:
    chi: int
    phi_hat: float
    n_components: int | None = None
    n_holes: int | None = None


def excursion_mask(field, u: float, spec=None) -> ExcursionMask:
    """Threshold a field (a :class:`GridField` or a 1-D/2-D array) at level ``u``."""
    if hasattr(field, "values") and hasattr(field, "spec"):
        spec = field.spec if spec is None else spec
        values = np.asarray(field.values, dtype=float)
    else:
        values = np.asarray(field, dtype=float)
    if values.ndim not in (1, 2):
        raise ValueError(f"expected 1-D or 2-D values, got shape {values.shape}")
    if np.isnan(values).any():
        raise ValueError("field contains NaN")
    if np.isnan(u):
        raise ValueError("level is NaN")
    return ExcursionMask(values >= u, float(u), values, spec)


def _bits(mask) -> np.ndarray:
    return np.asarray(mask.bits if isinstance(mask, ExcursionMask) else mask, dtype=bool)


def cubical_counts(bits: np.ndarray) -> tuple[int, int, int]:
    """Vertices, edges and faces of the closed cubical complex of true pixels."""
    p = np.pad(np.asarray(bits, dtype=bool), 1)
    faces = int(p.sum())
    # vertex at each pixel corner: any of the four incident pixels is set
    verts = p[:-1, :-1] | p[1:, :-1] | p[:-1, 1:] | p[1:, 1:]
    # edges shared by two pixels adjacent along one axis
    e0 = p[:-1, 1:-1] | p[1:, 1:-1]
    e1 = p[1:-1, :-1] | p[1:-1, 1:]
    return int(verts.sum()), int(e0.sum() + e1.sum()), faces


def count_components_holes(bits: np.ndarray) -> tuple[int, int]:
    """Connected components (8-connectivity) and holes (bounded 4-connected background)."""
    bits = np.asarray(bits, dtype=bool)
    _, n_comp = ndimage.label(bits, structure=_EIGHT)
    _, n_bg = ndimage.label(~np.pad(bits, 1), structure=_FOUR)
    return int(n_comp), int(n_bg - 1)


def euler_characteristic_2d(mask, method: str = "auto") -> EulerStats:
    """Euler characteristic of a 2-D mask, with components/holes as a second route."""
    bits = _bits(mask)
    if bits.ndim != 2:
        raise ValueError("euler_characteristic_2d needs a 2-D mask")
    v, e, f = cubical_counts(bits)
    chi = v - e + f
    n_comp, n_holes = count_components_holes(bits)
    phi = np.nan
    if bits.shape[0] >= 3 and bits.shape[1] >= 3:
        phi = modified_euler_2d(mask, method=method)
    return EulerStats(chi, phi, n_comp, n_holes)


def runs_1d(bits: np.ndarray) -> int:
    """Number of maximal runs of true cells."""
    b = np.asarray(bits, dtype=bool).astype(np.int8)
    if b.size == 0:
        return 0
    return int(b[0] + np.count_nonzero(np.diff(b) == 1))


def euler_characteristic_1d(mask) -> EulerStats:
    bits = _bits(mask)
    if bits.ndim != 1:
        raise ValueError("euler_characteristic_1d needs a 1-D mask")
    phi = modified_euler_1d(mask) if bits.size >= 3 else np.nan
    return EulerStats(runs_1d(bits), phi)


def _later(di: int, dj: int) -> bool:
    return di > 0 or (di == 0 and dj > 0)


def _is_upper(nb: np.ndarray, c: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Whether neighbour values ``nb`` at offset (di, dj) lie above ``c``.

    Ties go to the neighbour with the larger flat index (lexicographic
    perturbation), so plateaus are classified deterministically.
    """
    if _later(di, dj):
        return nb >= c
    return nb > c


def _upper(values: np.ndarray, di: int, dj: int) -> np.ndarray:
    """:func:`_is_upper` for every interior node of a 2-D array."""
    n, m = values.shape
    c = values[1:-1, 1:-1]
    nb = values[1 + di : n - 1 + di, 1 + dj : m - 1 + dj]
    return _is_upper(nb, c, di, dj)


def _ring_index(edges: list[np.ndarray], corners: list[np.ndarray]) -> np.ndarray:
    """Index ``1 - chi(upper part of the pixel boundary)``.

    ``edges[k]`` flags the axial neighbour across side ``k`` as higher,
    ``corners[k]`` the diagonal neighbour between sides ``k`` and ``k + 1``.
    A higher axial neighbour shares a closed side (with both end corners), a
    higher diagonal neighbour only the corner point.
    """
    ring = []
    for k in range(4):
        ring.append(edges[k])
        ring.append(corners[k] | edges[k] | edges[(k + 1) % 4])
    changes = np.zeros(ring[0].shape, dtype=np.int8)
    for k in range(8):
        changes += ring[k] != ring[(k + 1) % 8]
    pieces = changes // 2
    # empty ring (maximum) or full ring (minimum): boundary chi is 0
    return (1 - pieces).astype(np.int8)


_SIDES = [(1, 0), (0, 1), (-1, 0), (0, -1)]
_DIAGS = [(1, 1), (-1, 1), (-1, -1), (1, -1)]


def critical_point_index(values) -> np.ndarray:
    """Morse contribution of every interior node of a sampled 2-D field.

    Nodes are processed as closed pixels added in decreasing order of value.
    Adding a pixel changes the Euler characteristic of the union by
    ``1 - chi(B)`` where ``B`` is the part of its boundary already covered by
    higher pixels of its 8-neighbourhood.  The result is +1 at discrete maxima
    and minima, -1 at saddles, -2 at monkey saddles and 0 at regular nodes;
    over a whole padded lattice the indices of nodes at or above ``u`` sum to
    the cubical Euler characteristic of the excursion mask.

    Returns an integer array of shape ``(n - 2, m - 2)``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or min(values.shape) < 3:
        raise ValueError("need a 2-D array of at least 3x3 values")
    edges = [_upper(values, di, dj) for di, dj in _SIDES]
    corners = [_upper(values, di, dj) for di, dj in _DIAGS]
    return _ring_index(edges, corners)


def critical_point_index_at(values, rows, cols) -> np.ndarray:
    """Indices of the nodes ``(rows, cols)`` only; they must not touch the array border.

    Only the 3x3 neighbourhoods of those nodes are read, so the rest of
    ``values`` may hold placeholders.
    """
    values = np.asarray(values, dtype=float)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    n, m = values.shape
    if rows.size and (rows.min() < 1 or cols.min() < 1 or rows.max() > n - 2 or cols.max() > m - 2):
        raise ValueError("nodes must have all eight neighbours inside the array")
    c = values[rows, cols]

    def up(di, dj):
        return _is_upper(values[rows + di, cols + dj], c, di, dj)

    return _ring_index([up(*o) for o in _SIDES], [up(*o) for o in _DIAGS])


def mask_index_total(values, u: float) -> int:
    """Sum of node indices over all nodes at or above ``u``, treating the
    outside of the lattice as lower.  Equals the cubical Euler characteristic
    of ``values >= u``."""
    values = np.asarray(values, dtype=float)
    padded = np.pad(values, 1, constant_values=-np.inf)
    index = critical_point_index(padded)
    return int(index[values >= u].sum())


def cell_weights(shape, margin: int = 1) -> np.ndarray:
    """Area of each node's pixel inside the hull of the inner nodes, in pixel units.

    For a lattice built with ``GridSpec.spanning(..., margin=margin)``: 1 for
    nodes strictly inside the box, 1/2 on its sides, 1/4 at its corners and 0
    on the margin rings.  Used as ``region`` in :func:`modified_euler_2d`.
    """
    n, m = shape
    if margin < 1 or n < 2 * margin + 2 or m < 2 * margin + 2:
        raise ValueError(f"need margin >= 1 and room for a 2x2 inner block, got {shape}, {margin}")
    wx = np.zeros(n)
    wy = np.zeros(m)
    wx[margin : n - margin] = 1.0
    wy[margin : m - margin] = 1.0
    for w, k in ((wx, n), (wy, m)):
        w[margin] = w[k - margin - 1] = 0.5
    return np.outer(wx, wy)


def _boundary_phi(bits: np.ndarray) -> float:
    """Mask-only estimator: chi - (runs along the four edges)/2 + (set corners)/4."""
    v, e, f = cubical_counts(bits)
    chi = v - e + f
    edges = [bits[0, :], bits[-1, :], bits[:, 0], bits[:, -1]]
    runs = sum(runs_1d(edge) for edge in edges)
    corners = int(bits[0, 0]) + int(bits[0, -1]) + int(bits[-1, 0]) + int(bits[-1, -1])
    return chi - 0.5 * runs + 0.25 * corners


def modified_euler_2d(mask, method: str = "auto", region=None) -> float:
    """Modified Euler characteristic estimate of a 2-D excursion mask.

    Parameters
    ----------
    mask : ExcursionMask
        Must be at least 3x3.
    method : {"auto", "critical", "boundary"}
        ``critical`` sums critical-point indices over interior nodes at or
        above the level (needs field values); the estimate then refers to the
        region tiled by the interior pixels.  ``boundary`` uses only the bits
        and refers to the whole mask.  ``auto`` picks ``critical`` when values
        are available.
    region : array, optional
        Same shape as the mask.  A boolean array restricts the critical-point
        sum to nodes where it is true; a float array weights each node's index
        (see :func:`cell_weights`).
    """
    bits = _bits(mask)
    if bits.ndim != 2 or bits.shape[0] < 3 or bits.shape[1] < 3:
        raise ValueError(f"modified Euler characteristic needs a mask of at least 3x3, got {bits.shape}")
    values = mask.values if isinstance(mask, ExcursionMask) else None
    if method == "auto":
        method = "critical" if values is not None else "boundary"
    if method == "boundary":
        return float(_boundary_phi(bits))
    if method != "critical":
        raise ValueError(f"unknown method {method!r}")
    if values is None:
        raise ValueError("critical-point estimator needs field values")
    index = critical_point_index(values)
    keep = bits[1:-1, 1:-1]
    if region is None:
        return float(index[keep].sum())
    region = np.asarray(region)
    if region.shape != bits.shape:
        raise ValueError(f"region shape {region.shape} does not match mask shape {bits.shape}")
    weight = region[1:-1, 1:-1].astype(float)
    return float(np.sum(index * weight * keep))


def modified_euler_1d(mask, method: str = "auto", region=None) -> float:
    """1-D modified Euler characteristic: interior maxima minus minima above the level.

    The mask-only fallback is ``runs - (set endpoints) / 2``.  ``region``
    (same length as the mask) weights or selects the nodes of the
    critical-point count, as in :func:`modified_euler_2d`; sampling one node
    beyond each end of a segment and giving its endpoints weight 1/2 makes the
    count refer to the segment exactly.
    """
    bits = _bits(mask)
    if bits.ndim != 1 or bits.size < 3:
        raise ValueError(f"1-D modified Euler characteristic needs at least 3 samples, got {bits.shape}")
    values = mask.values if isinstance(mask, ExcursionMask) else None
    if method == "auto":
        method = "critical" if values is not None else "boundary"
    if method == "boundary":
        return runs_1d(bits) - 0.5 * (int(bits[0]) + int(bits[-1]))
    if method != "critical":
        raise ValueError(f"unknown method {method!r}")
    if values is None:
        raise ValueError("critical-point estimator needs field values")
    v = np.asarray(values, dtype=float)
    left = v[1:-1] - v[:-2]
    right = v[2:] - v[1:-1]
    # ties broken toward the later sample, as in 2-D
    up_left = left >= 0
    up_right = right >= 0
    index = (up_left & ~up_right).astype(float) - (~up_left & up_right)
    keep = bits[1:-1]
    if region is not None:
        region = np.asarray(region)
        if region.shape != bits.shape:
            raise ValueError(f"region shape {region.shape} does not match mask shape {bits.shape}")
        return float(np.sum(index * keep * region[1:-1].astype(float)))
    return float(np.sum(index * keep))


def write_pbm(mask, path) -> None:
    """Write the mask as a plain (P1) portable bitmap, first axis as rows."""
    bits = np.atleast_2d(_bits(mask)).astype(np.uint8)
    lines = [f"P1\n{bits.shape[1]} {bits.shape[0]}"]
    lines += [" ".join(str(b) for b in row) for row in bits]
    Path(path).write_text("\n".join(lines) + "\n")


STATS_COLUMNS = ("seed", "u", "domain_id", "chi", "phi_hat", "n_components", "n_holes")


def append_stats_csv(path, rows) -> None:
    """Append ``(seed, u, domain_id, EulerStats)`` rows; writes the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(STATS_COLUMNS)
        for seed, u, domain_id, st in rows:
            writer.writerow([seed, u, domain_id, st.chi, st.phi_hat, st.n_components, st.n_holes])
