"""Angular momentum algebra: Clebsch-Gordan coefficients, 6j symbols and
Wigner small-d rotation matrices.

Half-integer quantum numbers are carried internally as doubled integers so
that every triangle/parity check and every factorial argument is exact.
Sums are accumulated with :class:`fractions.Fraction`; only the final square
root is taken in floating point.

Phase convention is Condon-Shortley throughout, and

    d^j_{m1, m2}(beta) = <j m1| exp(-i beta J_y) |j m2>.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial, sqrt

import numpy as np

__all__ = [
    "AngularMomentum",
    "clebsch_gordan",
    "wigner_6j",
    "wigner_small_d",
    "wigner_small_d_matrix",
    "spin_matrices",
]


def _twice(value) -> int:
    """Return 2*value as an int, rejecting anything that is not a half-integer."""
    doubled = 2 * value
    rounded = round(doubled)
    if abs(doubled - rounded) > 1e-9:
        raise ValueError(f"{value!r} is not an integer or half-integer")
    return int(rounded)


@dataclass(frozen=True)
class AngularMomentum:
    """A (j, m) pair stored as doubled integers."""

    twice_j: int
    twice_m: int

    def __post_init__(self):
        if self.twice_j < 0:
            raise ValueError(f"j must be non-negative, got {self.twice_j}/2")
        if abs(self.twice_m) > self.twice_j:
            raise ValueError(f"|m| > j for j={self.twice_j}/2, m={self.twice_m}/2")
        if (self.twice_j - self.twice_m) % 2:
            raise ValueError(f"j={self.twice_j}/2 and m={self.twice_m}/2 differ in parity")

    @classmethod
    def of(cls, j, m) -> "AngularMomentum":
        return cls(_twice(j), _twice(m))

    @property
    def j(self) -> float:
        return self.twice_j / 2

    @property
    def m(self) -> float:
        return self.twice_m / 2


def _fact2(twice_n: int) -> int:
    # factorial of n given 2n; callers guarantee 2n is even and non-negative
    return factorial(twice_n // 2)


def _triangle_ok(a: int, b: int, c: int) -> bool:
    """Triangle and parity condition on doubled angular momenta."""
    return (a + b + c) % 2 == 0 and abs(a - b) <= c <= a + b


def _delta_sq(a: int, b: int, c: int) -> Fraction:
    return Fraction(
        _fact2(a + b - c) * _fact2(a - b + c) * _fact2(-a + b + c),
        _fact2(a + b + c + 2),
    )


@lru_cache(maxsize=4096)
def _cg_doubled(j1: int, m1: int, j2: int, m2: int, J: int, M: int) -> float:
    if M != m1 + m2 or not _triangle_ok(j1, j2, J):
        return 0.0
    pref_sq = (
        Fraction(J + 1)
        * _delta_sq(j1, j2, J)
        * _fact2(J + M) * _fact2(J - M)
        * _fact2(j1 - m1) * _fact2(j1 + m1)
        * _fact2(j2 - m2) * _fact2(j2 + m2)
    )
    # Racah's single-sum formula, summation index k in ordinary units
    k_min = max(0, (j2 - J - m1) // 2, (j1 - J + m2) // 2)
    k_max = min((j1 + j2 - J) // 2, (j1 - m1) // 2, (j2 + m2) // 2)
    total = Fraction(0)
    for k in range(k_min, k_max + 1):
        den = (
            factorial(k)
            * _fact2(j1 + j2 - J - 2 * k)
            * _fact2(j1 - m1 - 2 * k)
            * _fact2(j2 + m2 - 2 * k)
            * _fact2(J - j2 + m1 + 2 * k)
            * _fact2(J - j1 - m2 + 2 * k)
        )
        total += Fraction((-1) ** k, den)
    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * sqrt(pref_sq * total * total)


def clebsch_gordan(j1, m1, j2, m2, J, M) -> float:
    """<J M | j1 m1; j2 m2> in the Condon-Shortley convention.

    Arguments may be ints, floats or Fractions holding integers or
    half-integers. Returns 0 whenever the projection or triangle rule fails.
    Raises ValueError when any (j, m) pair is itself malformed.
    """
    a = AngularMomentum.of(j1, m1)
    b = AngularMomentum.of(j2, m2)
    c = AngularMomentum.of(J, M)
    return _cg_doubled(a.twice_j, a.twice_m, b.twice_j, b.twice_m, c.twice_j, c.twice_m)


@lru_cache(maxsize=4096)
def _sixj_doubled(a: int, b: int, c: int, d: int, e: int, f: int) -> float:
    triads = ((a, b, c), (a, e, f), (d, b, f), (d, e, c))
    if not all(_triangle_ok(*t) for t in triads):
        return 0.0
    pref_sq = Fraction(1)
    for t in triads:
        pref_sq *= _delta_sq(*t)
    alphas = [sum(t) // 2 for t in triads]
    betas = [(a + b + d + e) // 2, (b + c + e + f) // 2, (c + a + f + d) // 2]
    total = Fraction(0)
    for t in range(max(alphas), min(betas) + 1):
        den = 1
        for x in alphas:
            den *= factorial(t - x)
        for y in betas:
            den *= factorial(y - t)
        total += Fraction((-1) ** t * factorial(t + 1), den)
    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * sqrt(pref_sq * total * total)


def wigner_6j(j1, j2, j3, j4, j5, j6) -> float:
    """Wigner 6j symbol {j1 j2 j3; j4 j5 j6} via the Racah formula.

    Zero when any of the four triads violates the triangle or parity rule.
    """
    args = [_twice(x) for x in (j1, j2, j3, j4, j5, j6)]
    if any(x < 0 for x in args):
        raise ValueError("angular momenta must be non-negative")
    return _sixj_doubled(*args)


@lru_cache(maxsize=1024)
def _small_d_coeffs(tj: int, tm1: int, tm2: int):
    """Terms (coeff, cos power, sin power) of the Wigner formula for d^j_{m1 m2}."""
    jp, jm = (tj + tm1) // 2, (tj - tm1) // 2
    kp, km = (tj + tm2) // 2, (tj - tm2) // 2
    root_sq = factorial(jp) * factorial(jm) * factorial(kp) * factorial(km)
    terms = []
    shift = (tm1 - tm2) // 2  # m1 - m2
    for k in range(max(0, -shift), min(kp, jm) + 1):
        den = factorial(kp - k) * factorial(k) * factorial(jm - k) * factorial(k + shift)
        sign = -1 if (k + shift) % 2 else 1
        terms.append((sign * sqrt(root_sq) / den, tj - 2 * k - shift, 2 * k + shift))
    return tuple(terms)


def wigner_small_d(j, m1, m2, beta):
    """Rotation matrix element d^j_{m1, m2}(beta); beta may be an array."""
    tj, tm1, tm2 = _twice(j), _twice(m1), _twice(m2)
    if tj < 0:
        raise ValueError(f"unsupported j={j!r}")
    for tm in (tm1, tm2):
        if abs(tm) > tj or (tj - tm) % 2:
            raise ValueError(f"m={tm / 2} is not a valid projection for j={tj / 2}")
    beta = np.asarray(beta, dtype=float)
    c = np.cos(beta / 2)
    s = np.sin(beta / 2)
    out = np.zeros_like(beta)
    for coeff, pc, ps in _small_d_coeffs(tj, tm1, tm2):
        out = out + coeff * c**pc * s**ps
    return out if out.ndim else float(out)


def wigner_small_d_matrix(j, beta: float) -> np.ndarray:
    """Full (2j+1)x(2j+1) matrix d^j(beta), rows/cols ordered m = -j ... +j."""
    tj = _twice(j)
    ms = [(tm) / 2 for tm in range(-tj, tj + 1, 2)]
    return np.array([[wigner_small_d(j, a, b, beta) for b in ms] for a in ms])


def spin_matrices(j):
    """(Jx, Jy, Jz) in the |j m> basis ordered m = -j ... +j (units of hbar)."""
    tj = _twice(j)
    jj = tj / 2
    ms = np.arange(-tj, tj + 1, 2) / 2
    jz = np.diag(ms)
    # <m+1| J+ |m> = sqrt(j(j+1) - m(m+1))
    off = np.sqrt(jj * (jj + 1) - ms[:-1] * (ms[:-1] + 1))
    jplus = np.diag(off, -1)
    jminus = jplus.T
    jx = (jplus + jminus) / 2
    jy = (jplus - jminus) / 2j
    return jx.astype(complex), jy, jz.astype(complex)
