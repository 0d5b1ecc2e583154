"""Exact exponent arithmetic and the small numeric helpers shared by the lab.

Scale exponents are kept as :class:`fractions.Fraction` so that comparisons
such as ``1/2 + 1 == 3/2`` are exact. ``Rat`` is an alias, ``rat`` the checked
constructor.
"""
from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

Rat = Fraction


def rat(num, den=1) -> Rat:
    """Build a reduced rational from integers (or an existing rational / "p/q" string)."""
    if isinstance(num, str):
        if den != 1:
            raise ValueError("string form takes no separate denominator")
        return parse_rat(num)
    if isinstance(num, Fraction) and den == 1:
        return num
    for x in (num, den):
        if isinstance(x, bool) or not isinstance(x, (numbers.Integral, Fraction)):
            raise TypeError(f"rat() takes integers or rationals, got {x!r}")
    if den == 0:
        raise ValueError("rational with zero denominator")
    return Fraction(num) / Fraction(den)


def parse_rat(text: str) -> Rat:
    """Parse ``"p/q"``, ``"p"`` or ``"-p/q"``; decimals are rejected to keep exponents exact."""
    s = str(text).strip()
    if not s:
        raise ValueError("empty rational")
    if "/" in s:
        p, q = s.split("/", 1)
        try:
            return rat(int(p), int(q))
        except ValueError as e:
            raise ValueError(f"bad rational {text!r}: {e}") from None
    try:
        return Fraction(int(s))
    except ValueError:
        raise ValueError(f"bad rational {text!r} (write exponents as p/q)") from None


def format_rat(x: Rat) -> str:
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def rmin(*xs: Rat) -> Rat:
    return min(Fraction(x) for x in xs)


def rmax(*xs: Rat) -> Rat:
    return max(Fraction(x) for x in xs)


def rms_norm(x) -> float:
    """Root-mean-square over *all* entries (a matrix is not reduced per row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ValueError("rms_norm of an empty tensor")
    v = a.ravel()
    ss = float(np.dot(v, v))
    if 1e-280 < ss < 1e280:
        return math.sqrt(ss / v.size)
    # squares under- or overflowed: rescale by the largest entry first
    m = float(np.max(np.abs(v)))
    if m == 0.0 or not math.isfinite(m):
        return m
    w = v / m
    return m * math.sqrt(float(np.dot(w, w)) / v.size)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    log_coefficient: float
    residual_rms: float
    n_points: int

    @property
    def coefficient(self) -> float:
        return math.exp(self.log_coefficient)

    def predict(self, x):
        return self.coefficient * np.asarray(x, dtype=np.float64) ** self.exponent

    def to_dict(self) -> dict:
        return {
            "exponent": self.exponent,
            "coefficient": self.coefficient,
            "log_coefficient": self.log_coefficient,
            "residual_rms": self.residual_rms,
            "n_points": self.n_points,
        }


def fit_power_law(points: Iterable[Sequence[float]]) -> PowerLawFit:
    """Unweighted least squares of log y on log x: y ~ C * x**exponent."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ValueError(f"power-law fit needs at least 2 points, got {len(pts)}")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.any(~np.isfinite(xs)) or np.any(~np.isfinite(ys)):
        raise ValueError("power-law fit got non-finite values")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("power-law fit needs strictly positive x and y")
    if len(np.unique(xs)) != len(xs):
        raise ValueError("power-law fit needs distinct x values")
    lx, ly = np.log(xs), np.log(ys)
    design = np.column_stack([lx, np.ones_like(lx)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    return PowerLawFit(
        exponent=float(slope),
        log_coefficient=float(intercept),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        n_points=len(pts),
    )
