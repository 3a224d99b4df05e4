"""Linear mapping between a const's source value and its transformed form.

Two calibration builds pin the line IV = a*V + b by interpolation; a third
point must sit on it exactly (exact rational arithmetic, zero residual) or
the mapping is rejected as non-linear and the const reported untunable in
terms of V.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from ..mvm.isa import to_s64


class FitError(Exception):
    pass


class NonLinearMapping(FitError):
    """Third calibration point off the interpolated line."""


class DegenerateA(FitError):
    """Zero slope: the transformed form does not move with the value."""


@dataclass(frozen=True)
class LinearMap:
    a: Fraction
    b: Fraction

    @property
    def is_integral(self) -> bool:
        return self.a.denominator == 1 and self.b.denominator == 1

    def apply(self, v: int) -> Fraction:
        return self.a * v + self.b

    def apply_int(self, v: int) -> int:
        r = self.apply(v)
        if r.denominator != 1:
            raise FitError(f"IV = {self.a}*{v} + {self.b} is not integral")
        return int(r)

    def render(self) -> str:
        return f"IV = {self.a}*V + {self.b}"


def fit_linear_map(pairs: Sequence[Tuple[int, int]],
                   check: Optional[Tuple[int, int]] = None) -> LinearMap:
    """Interpolate a, b from two (V, IV) pairs; verify an optional third.

    IV values are interpreted as signed 64-bit quantities.
    """
    if len(pairs) < 2:
        raise FitError("need two calibration pairs")
    (v1, iv1), (v2, iv2) = pairs[0], pairs[1]
    if v1 == v2:
        raise FitError("calibration values must differ")
    iv1, iv2 = to_s64(iv1), to_s64(iv2)
    a = Fraction(iv1 - iv2, v1 - v2)
    b = Fraction(iv1) - a * v1
    if a == 0:
        raise DegenerateA(f"flat mapping through ({v1},{iv1}) and ({v2},{iv2})")
    m = LinearMap(a, b)
    rest = list(pairs[2:])
    if check is not None:
        rest.append(check)
    for v3, iv3 in rest:
        residual = Fraction(to_s64(iv3)) - m.apply(v3)
        if residual != 0:
            raise NonLinearMapping(
                f"third point ({v3},{to_s64(iv3)}) off {m.render()} "
                f"by {residual}")
    return m
