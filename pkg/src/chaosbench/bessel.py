"""Modified-Bessel ratio I1/I0 without library special functions.

Upward power series for small argument, Gauss continued fraction (evaluated
with the modified Lentz algorithm) beyond the switchover at x = 8. The two
branches cross-agree to 1e-14 at the switchover; see tests.
"""

from __future__ import annotations

from .errors import InvalidInput

_SWITCHOVER = 8.0


def _ratio_series(x: float) -> float:
    # I_nu(x) = sum_k (x/2)^(2k+nu) / (k! Gamma(k+nu+1)); form both sums with
    # shared term recurrences and divide.
    q = 0.25 * x * x
    t0, s0 = 1.0, 1.0           # I0 terms: t_k = q^k / (k!)^2
    t1, s1 = 0.5 * x, 0.5 * x   # I1 terms: t_k = (x/2) q^k / (k! (k+1)!)
    for k in range(1, 200):
        t0 *= q / (k * k)
        t1 *= q / (k * (k + 1))
        s0 += t0
        s1 += t1
        if t0 < 1e-18 * s0 and t1 < 1e-18 * max(s1, 1e-300):
            break
    return s1 / s0


def _ratio_continued_fraction(x: float) -> float:
    # I_{nu+1}(x)/I_nu(x) = 1 / (2(nu+1)/x + 1/(2(nu+2)/x + ...)), nu = 0.
    tiny = 1e-300
    f = tiny
    c = f
    d = 0.0
    for k in range(1, 400):
        b = 2.0 * k / x
        d = b + d
        if d == 0.0:
            d = tiny
        c = b + 1.0 / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return f


def bessel_ratio_i1_i0(x: float) -> float:
    """I1(x)/I0(x) for x >= 0."""
    if x < 0 or not x == x:
        raise InvalidInput(f"argument must be nonnegative, got {x}")
    if x == 0.0:
        return 0.0
    if x <= _SWITCHOVER:
        return _ratio_series(x)
    return _ratio_continued_fraction(x)


def bessel_ratio_derivative(x: float) -> float:
    """d/dx [I1(x)/I0(x)] = 1 - r/x - r^2 with r = I1/I0."""
    if x == 0.0:
        return 0.5
    r = bessel_ratio_i1_i0(x)
    return 1.0 - r / x - r * r
