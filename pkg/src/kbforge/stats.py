"""Welch's t-test with a self-contained Student-t tail probability.

The two-sided p-value comes from the regularized incomplete beta function,
evaluated with the standard continued fraction (modified Lentz), so there is
no runtime dependency on a stats library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class StatsError(Exception):
    pass


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_two_sided: float


def mean(values: list[float]) -> float:
    if not values:
        raise StatsError("mean of empty sample")
    return sum(values) / len(values)


def sample_variance(values: list[float]) -> float:
    n = len(values)
    if n < 2:
        raise StatsError("sample variance needs at least two observations")
    m = mean(values)
    return sum((x - m) ** 2 for x in values) / (n - 1)


_MAX_ITERATIONS = 300
_EPS = 3e-14
_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITERATIONS + 1):
        m2 = 2 * m
        numerator = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + numerator * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + numerator / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        numerator = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + numerator * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + numerator / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise StatsError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0 or b <= 0:
        raise StatsError("incomplete beta requires positive shape parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # The continued fraction converges fast only on one side of the mean;
    # use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a) for the other side.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise StatsError("degrees of freedom must be positive")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def welch_t(sample_a: list[float], sample_b: list[float]) -> TTestResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite df."""
    n_a, n_b = len(sample_a), len(sample_b)
    if n_a < 2 or n_b < 2:
        raise StatsError("welch_t needs at least two observations per sample")
    v_a = sample_variance(sample_a)
    v_b = sample_variance(sample_b)
    if v_a == 0.0 and v_b == 0.0:
        raise StatsError("both samples have zero variance; t is undefined")
    se_a, se_b = v_a / n_a, v_b / n_b
    pooled = se_a + se_b
    t = (mean(sample_a) - mean(sample_b)) / math.sqrt(pooled)
    df = pooled**2 / (se_a**2 / (n_a - 1) + se_b**2 / (n_b - 1))
    p = min(1.0, 2.0 * student_t_sf(abs(t), df))
    return TTestResult(t=t, df=df, p_two_sided=p)
