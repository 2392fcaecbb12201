import numpy as np
import pytest
from scipy.special import i0, i1

from chaosbench.bessel import (
    _SWITCHOVER,
    _ratio_continued_fraction,
    _ratio_series,
    bessel_ratio_derivative,
    bessel_ratio_i1_i0,
)
from chaosbench.errors import InvalidInput


def test_against_scipy_oracle():
    for x in np.concatenate([np.linspace(1e-8, 8, 40), np.linspace(8, 60, 30)]):
        want = i1(x) / i0(x)
        assert bessel_ratio_i1_i0(float(x)) == pytest.approx(want, rel=1e-13, abs=1e-14)


def test_branches_cross_agree_at_switchover():
    for x in (6.0, 7.0, _SWITCHOVER, 9.0, 10.0):
        assert abs(_ratio_series(x) - _ratio_continued_fraction(x)) < 1e-14


def test_zero_and_negative():
    assert bessel_ratio_i1_i0(0.0) == 0.0
    with pytest.raises(InvalidInput):
        bessel_ratio_i1_i0(-1.0)


def test_derivative_matches_central_difference():
    for x in (0.3, 2.0, 7.5, 12.0):
        h = 1e-6
        fd = (bessel_ratio_i1_i0(x + h) - bessel_ratio_i1_i0(x - h)) / (2 * h)
        assert bessel_ratio_derivative(x) == pytest.approx(fd, rel=1e-7)


def test_derivative_at_zero():
    assert bessel_ratio_derivative(0.0) == 0.5
