"""Globally adaptive Gauss-Legendre quadrature on intervals and rectangles.

Each cell carries two estimates: the Gauss-Legendre rule on the cell and the
sum of the same rule over its halves (quadrants in 2-D).  Their difference is
the error estimate; the cell with the largest estimate is split until the
total estimate meets the tolerance.  The refined value is returned.

Differences below the round-off level of a cell (a small multiple of machine
epsilon times the integral of ``|f|`` over it) cannot be reduced by splitting
and are not counted as error.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

__all__ = ["QuadratureError", "QuadResult", "integrate_1d", "integrate_2d"]

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(10)
_NOISE = 64 * np.finfo(float).eps


class QuadratureError(ArithmeticError):
    """Raised when refinement stops before reaching the requested accuracy."""

    def __init__(self, message: str, value: float, error: float):
        super().__init__(message)
        self.value = value
        self.error = error


@dataclass(frozen=True)
class QuadResult:
    value: float
    error: float
    n_cells: int


def _rule_1d(f, a: float, b: float) -> tuple[float, float]:
    """Rule value and the matching integral of ``|f|``."""
    half = 0.5 * (b - a)
    x = 0.5 * (a + b) + half * _NODES
    fx = f(x)
    return half * float(np.dot(_WEIGHTS, fx)), abs(half) * float(np.dot(_WEIGHTS, np.abs(fx)))


def _estimate(fine: float, coarse: float, scale: float) -> float:
    return max(abs(fine - coarse) - _NOISE * scale, 0.0)


def _cell_1d(f, a: float, b: float):
    m = 0.5 * (a + b)
    left, sl = _rule_1d(f, a, m)
    right, sr = _rule_1d(f, m, b)
    fine = left + right
    return fine, _estimate(fine, _rule_1d(f, a, b)[0], sl + sr)


def integrate_1d(f, a: float, b: float, rtol: float = 1e-9, atol: float = 1e-14,
                 max_cells: int = 20000) -> QuadResult:
    """Integrate a vectorized ``f`` over ``[a, b]``.

    Raises
    ------
    QuadratureError
        If ``max_cells`` is reached first; the exception carries the value and
        the achieved error estimate.
    """
    if a == b:
        return QuadResult(0.0, 0.0, 0)
    fine, err = _cell_1d(f, a, b)
    heap = [(-err, a, b, fine)]
    total, total_err = fine, err
    while total_err > max(rtol * abs(total), atol):
        if len(heap) >= max_cells:
            raise QuadratureError(
                f"1-D quadrature did not converge: error {total_err:.3g} on value {total:.6g}",
                total, total_err,
            )
        neg_err, lo, hi, val = heapq.heappop(heap)
        total -= val
        total_err += neg_err
        mid = 0.5 * (lo + hi)
        for s, e in ((lo, mid), (mid, hi)):
            v, ve = _cell_1d(f, s, e)
            heapq.heappush(heap, (-ve, s, e, v))
            total += v
            total_err += ve
    # recompute the sums to shed accumulated round-off from the running totals
    total = float(sum(item[3] for item in heap))
    total_err = float(sum(-item[0] for item in heap))
    return QuadResult(total, total_err, len(heap))


_GX, _GY = np.meshgrid(_NODES, _NODES, indexing="ij")
_GW = np.outer(_WEIGHTS, _WEIGHTS)


def _rule_2d(f, x0, x1, y0, y1) -> tuple[float, float]:
    hx, hy = 0.5 * (x1 - x0), 0.5 * (y1 - y0)
    x = 0.5 * (x0 + x1) + hx * _GX
    y = 0.5 * (y0 + y1) + hy * _GY
    fxy = f(x, y)
    return hx * hy * float(np.sum(_GW * fxy)), abs(hx * hy) * float(np.sum(_GW * np.abs(fxy)))


def _cell_2d(f, box):
    x0, x1, y0, y1 = box
    xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    parts = [
        _rule_2d(f, x0, xm, y0, ym),
        _rule_2d(f, xm, x1, y0, ym),
        _rule_2d(f, x0, xm, ym, y1),
        _rule_2d(f, xm, x1, ym, y1),
    ]
    fine = sum(p[0] for p in parts)
    return fine, _estimate(fine, _rule_2d(f, x0, x1, y0, y1)[0], sum(p[1] for p in parts))


def integrate_2d(f, x0: float, x1: float, y0: float, y1: float, rtol: float = 1e-9,
                 atol: float = 1e-14, max_cells: int = 40000) -> QuadResult:
    """Integrate a vectorized ``f(x, y)`` over the rectangle ``[x0, x1] x [y0, y1]``."""
    if x0 == x1 or y0 == y1:
        return QuadResult(0.0, 0.0, 0)
    box = (x0, x1, y0, y1)
    fine, err = _cell_2d(f, box)
    counter = 0
    heap = [(-err, counter, box, fine)]
    total, total_err = fine, err
    while total_err > max(rtol * abs(total), atol):
        if len(heap) >= max_cells:
            raise QuadratureError(
                f"2-D quadrature did not converge: error {total_err:.3g} on value {total:.6g}",
                total, total_err,
            )
        neg_err, _, (a0, a1, b0, b1), val = heapq.heappop(heap)
        total -= val
        total_err += neg_err
        am, bm = 0.5 * (a0 + a1), 0.5 * (b0 + b1)
        for sub in ((a0, am, b0, bm), (am, a1, b0, bm), (a0, am, bm, b1), (am, a1, bm, b1)):
            v, ve = _cell_2d(f, sub)
            counter += 1
            heapq.heappush(heap, (-ve, counter, sub, v))
            total += v
            total_err += ve
    total = float(sum(item[3] for item in heap))
    total_err = float(sum(-item[0] for item in heap))
    return QuadResult(total, total_err, len(heap))
