"""McCormick envelopes for bilinear products w = x * y on a box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class McCormickCell:
    w: int
    x: int
    y: int
    xl: float
    xu: float
    yl: float
    yu: float

    def __post_init__(self):
        b = np.array([self.xl, self.xu, self.yl, self.yu], dtype=float)
        if not np.all(np.isfinite(b)):
            raise ValueError(f"McCormick cell for variable {self.w} has an unbounded factor")
        if self.xl > self.xu or self.yl > self.yu:
            raise ValueError(f"McCormick cell for variable {self.w} has inverted bounds")

    @property
    def degenerate(self) -> bool:
        return (self.xu - self.xl) <= DEGENERATE_TOL or (self.yu - self.yl) <= DEGENERATE_TOL


def envelope_coefficients(xl, xu, yl, yu):
    """Rows as (cx, cy, cw, rhs) with cx*x + cy*y + cw*w <= rhs.

    Works elementwise on arrays; the result has a leading axis of length 4:

        w >= xl*y + x*yl - xl*yl
        w >= xu*y + x*yu - xu*yu
        w <= xu*y + x*yl - xu*yl
        w <= xl*y + x*yu - xl*yu
    """
    xl, xu, yl, yu = (np.asarray(v, dtype=float) for v in (xl, xu, yl, yu))
    one = np.ones_like(xl)
    cx = np.stack([yl, yu, -yl, -yu])
    cy = np.stack([xl, xu, -xu, -xl])
    cw = np.stack([-one, -one, one, one])
    rhs = np.stack([xl * yl, xu * yu, -xu * yl, -xl * yu])
    return cx, cy, cw, rhs


def build_mccormick(cell: McCormickCell):
    """Four inequality rows ``(coeffs, rhs)`` where coeffs maps variable id -> value."""
    cx, cy, cw, rhs = envelope_coefficients(cell.xl, cell.xu, cell.yl, cell.yu)
    rows = []
    for k in range(4):
        coeffs: dict[int, float] = {}
        for var, c in ((cell.x, cx[k]), (cell.y, cy[k]), (cell.w, cw[k])):
            coeffs[var] = coeffs.get(var, 0.0) + float(c)
        rows.append((coeffs, float(rhs[k])))
    return rows


def envelope_range(x, y, xl, xu, yl, yu):
    """Interval of w admitted by the four rows at the point (x, y)."""
    lo = np.maximum(xl * y + x * yl - xl * yl, xu * y + x * yu - xu * yu)
    hi = np.minimum(xu * y + x * yl - xu * yl, xl * y + x * yu - xl * yu)
    return lo, hi


def envelope_violation(x, y, w, xl, xu, yl, yu):
    """Largest violation of the four rows at (x, y, w); <= 0 means inside."""
    cx, cy, cw, rhs = envelope_coefficients(xl, xu, yl, yu)
    return np.max(cx * x + cy * y + cw * w - rhs, axis=0)
