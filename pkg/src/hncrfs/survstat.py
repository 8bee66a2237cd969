"""Kaplan-Meier estimation, the two-sample log-rank test and Harrell's C-index.

Every function accepts survival outcomes either as a sequence of
:class:`SurvivalRecord` or, for the array-level helpers, as parallel
``time`` / ``event`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateMetricError, DegenerateTestError, InvalidArgumentError

__all__ = [
    "SurvivalRecord",
    "KMCurve",
    "LogRankResult",
    "record_arrays",
    "km_estimate",
    "logrank_test",
    "concordance_index",
    "harrell_c",
    "chi2_sf",
    "regularized_gamma_q",
]


@dataclass(frozen=True)
class SurvivalRecord:
    """Follow-up time (months) and event indicator for one patient."""

    time: float
    event: bool

    def __post_init__(self):
        if not isinstance(self.event, (bool, np.bool_)):
            raise InvalidArgumentError(f"event must be a boolean, got {self.event!r}")
        if not math.isfinite(self.time) or self.time <= 0:
            raise InvalidArgumentError(f"time must be finite and > 0, got {self.time!r}")


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    std_err: np.ndarray
    events: np.ndarray

    def __len__(self):
        return len(self.event_times)

    def survival_at(self, t: float) -> float:
        """Step-function value S(t), right-continuous."""
        idx = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    neg_log2_p: float
    observed_a: float
    expected_a: float
    variance: float

    @property
    def significant(self) -> bool:
        return self.p_value <= 0.05


def record_arrays(records: Sequence[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Split records into float ``time`` and bool ``event`` arrays."""
    time = np.fromiter((r.time for r in records), dtype=float, count=len(records))
    event = np.fromiter((bool(r.event) for r in records), dtype=bool, count=len(records))
    return time, event


def km_estimate(records: Sequence[SurvivalRecord]) -> KMCurve:
    """Product-limit estimate of the survival function.

    Tied event times form a single step with the combined event count.
    Subjects censored at ``t`` are still at risk at ``t``.
    """
    if len(records) == 0:
        raise InvalidArgumentError("km_estimate needs at least one record")
    time, event = record_arrays(records)
    return _km_arrays(time, event)


def _km_arrays(time, event):
    times = np.unique(time[event])
    sorted_time = np.sort(time)
    at_risk = len(time) - np.searchsorted(sorted_time, times, side="left")
    deaths = np.array([np.count_nonzero(event & (time == t)) for t in times], dtype=int)

    factors = (at_risk - deaths) / at_risk  # one rounding per step, so single steps are exact
    survival = np.cumprod(factors)
    with np.errstate(divide="ignore", invalid="ignore"):
        greenwood = np.cumsum(deaths / (at_risk * (at_risk - deaths)))
        std_err = survival * np.sqrt(greenwood)
    std_err[survival == 0] = 0.0
    return KMCurve(
        event_times=times,
        survival=survival,
        at_risk=at_risk.astype(int),
        std_err=std_err,
        events=deaths,
    )


def logrank_test(
    group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]
) -> LogRankResult:
    """Two-sample log-rank test with hypergeometric variance.

    Raises
    ------
    InvalidArgumentError
        If either group is empty.
    DegenerateTestError
        If the summed variance is zero, i.e. no event time carries information.
    """
    if len(group_a) == 0 or len(group_b) == 0:
        raise InvalidArgumentError("both log-rank groups must be non-empty")
    time_a, event_a = record_arrays(group_a)
    time_b, event_b = record_arrays(group_b)
    sorted_a = np.sort(time_a)
    sorted_b = np.sort(time_b)

    pooled = np.unique(np.concatenate([time_a[event_a], time_b[event_b]]))
    n_a = (len(time_a) - np.searchsorted(sorted_a, pooled, side="left")).astype(float)
    n_b = (len(time_b) - np.searchsorted(sorted_b, pooled, side="left")).astype(float)
    d_a = np.array([np.count_nonzero(event_a & (time_a == t)) for t in pooled], dtype=float)
    d_b = np.array([np.count_nonzero(event_b & (time_b == t)) for t in pooled], dtype=float)

    n = n_a + n_b
    d = d_a + d_b
    expected = d * n_a / n
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (n_b / n) * (n - d) / (n - 1), 0.0)

    total_var = float(var.sum())
    if total_var <= 0.0:
        raise DegenerateTestError("log-rank variance is zero; groups share no informative event times")
    observed = float(d_a.sum())
    exp_sum = float(expected.sum())
    chi_square = (observed - exp_sum) ** 2 / total_var
    p = chi2_sf(chi_square, 1)
    neg_log2_p = -math.log2(p) if p > 0 else math.inf
    return LogRankResult(
        chi_square=chi_square,
        p_value=p,
        neg_log2_p=neg_log2_p if neg_log2_p != 0 else 0.0,
        observed_a=observed,
        expected_a=exp_sum,
        variance=total_var,
    )


def concordance_index(records: Sequence[SurvivalRecord], risk) -> float:
    """Harrell's C for risk scores where higher means earlier expected event.

    A pair (i, j) is comparable when ``t_i < t_j`` and subject ``i`` had the
    event. Pairs with equal times are never comparable. Tied risk scores
    count one half.
    """
    time, event = record_arrays(records)
    return harrell_c(time, event, risk)


def harrell_c(time, event, risk, *, chunk: int = 2048) -> float:
    """Array form of :func:`concordance_index`."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    risk = np.asarray(risk, dtype=float)
    if not (time.shape == event.shape == risk.shape) or time.ndim != 1:
        raise InvalidArgumentError("time, event and risk must be 1-D and of equal length")
    if len(time) < 2:
        raise InvalidArgumentError("concordance needs at least two subjects")

    idx = np.flatnonzero(event)
    twice_score = 0
    comparable = 0
    for start in range(0, len(idx), chunk):
        rows = idx[start:start + chunk]
        later = time[None, :] > time[rows, None]
        r_i = risk[rows, None]
        conc = later & (r_i > risk[None, :])
        ties = later & (r_i == risk[None, :])
        comparable += int(later.sum())
        twice_score += 2 * int(conc.sum()) + int(ties.sum())
    if comparable == 0:
        raise DegenerateMetricError("no comparable pairs; C-index undefined")
    return twice_score / (2 * comparable)


def chi2_sf(x: float, dof: int) -> float:
    """Upper-tail probability of the chi-square distribution."""
    if not dof >= 1 or int(dof) != dof:
        raise InvalidArgumentError(f"dof must be a positive integer, got {dof!r}")
    if x < 0 or math.isnan(x):
        raise InvalidArgumentError(f"x must be >= 0, got {x!r}")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    a = dof / 2.0
    z = x / 2.0
    if x < dof + 1:
        return max(0.0, 1.0 - _gamma_p_series(a, z))
    return _gamma_q_continued_fraction(a, z)


def regularized_gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma ``Q(a, x)``."""
    if a <= 0 or x < 0:
        raise InvalidArgumentError("need a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return _gamma_q_continued_fraction(a, x)


_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_p_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_continued_fraction(a, x):
    # modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
