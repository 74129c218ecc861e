"""Log-likelihood terms linking a latent SIR trajectory to observed data.

Three data channels are supported: daily reported deaths (Poisson around a
delay-convolved infection curve), random-sample prevalence surveys (normal
approximation to the binomial), and cumulative positive tests (normal, with
the detected fraction growing as the square root of cumulative testing).

All terms return plain floats; impossible observations yield ``-inf`` rather
than raising, so a sampler can treat them as zero-density rejections.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .epi_dynamics import SirTrajectory

NEG_INF = float("-inf")
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DelayDistribution:
    """Truncated infection-to-death delay pmf on {0, ..., m}."""

    pmf: np.ndarray
    m: int

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        object.__setattr__(self, "pmf", pmf)
        if len(pmf) != self.m + 1:
            raise ValueError("pmf length must be m + 1")
        if pmf.min() < 0 or abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf entries must be nonnegative and sum to 1")

    @property
    def mean(self) -> float:
        return float(np.arange(self.m + 1) @ self.pmf)


@dataclass(frozen=True)
class SurveyObservation:
    """A random-sample prevalence estimate over an inclusive day window.

    ``kind`` is "viral" (active infections, matched against I) or "sero"
    (antibodies, matched against R).  ``window`` day indices address
    trajectory states, day 0 being the initial condition.
    """

    kind: str
    estimate: float
    sample_size: int
    window: tuple[int, int]

    def __post_init__(self):
        if self.kind not in ("viral", "sero"):
            raise ValueError(f"unknown survey kind {self.kind!r}")
        if not 0 < self.estimate < 1:
            raise ValueError("survey estimate must lie strictly in (0, 1)")
        if self.sample_size < 1:
            raise ValueError("sample size must be at least 1")
        if self.window[0] > self.window[1] or self.window[0] < 0:
            raise ValueError(f"bad survey window {self.window}")


@dataclass(frozen=True)
class TestPeriod:
    """Aggregated cases/tests over one L-day reporting period.

    ``start_day``/``end_day`` are inclusive day indices; ``cum_cases_end``
    and ``cum_tests_end`` are cumulative totals through ``end_day``.
    """

    start_day: int
    end_day: int
    cases: float
    tests: float
    cum_cases_end: float
    cum_tests_end: float

    def __post_init__(self):
        if self.end_day < self.start_day:
            raise ValueError("period ends before it starts")
        if min(self.cases, self.tests, self.cum_cases_end, self.cum_tests_end) < 0:
            raise ValueError("period aggregates must be nonnegative")

    @property
    def length(self) -> int:
        return self.end_day - self.start_day + 1


def build_delay_pmf(alpha: float, beta: float, quantile_cut: float) -> DelayDistribution:
    """Negative-binomial delay pmf truncated near ``quantile_cut`` mass.

    The pmf is NegBin(alpha, p = 1/(beta+1)) counting days from infection to
    death.  The truncation day is the normal-approximation quantile
    ceil(mu + z * sd) rather than the exact discrete quantile; entries are
    renormalized to sum to one so downstream Poisson means scale exactly
    with the fatality rate.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("shape and scale must be positive")
    if not 0 < quantile_cut < 1:
        raise ValueError("quantile_cut must lie in (0, 1)")
    mu = alpha * beta
    sd = np.sqrt(alpha * beta * (beta + 1.0))
    m = int(np.ceil(mu + stats.norm.ppf(quantile_cut) * sd))
    m = max(m, 1)
    p = 1.0 / (beta + 1.0)
    pmf = stats.nbinom.pmf(np.arange(m + 1), alpha, p)
    pmf = pmf / pmf.sum()
    return DelayDistribution(pmf=pmf, m=m)


def expected_deaths(
    nu: np.ndarray, ifr: float, delay: DelayDistribution
) -> np.ndarray:
    """Mean daily deaths: ifr times the delay-convolved new-infection series."""
    nu = np.asarray(nu, dtype=float)
    if not 0 <= ifr <= 1:
        raise ValueError("ifr must lie in [0, 1]")
    if nu.size and nu.min() < 0:
        raise ValueError("new-infection series must be nonnegative")
    return ifr * np.convolve(nu, delay.pmf)[: len(nu)]


def deaths_loglik(observed: Sequence[float], expected: np.ndarray) -> float:
    """Poisson log-likelihood of daily death counts given their means."""
    obs = np.asarray(observed, dtype=float)
    mu = np.asarray(expected, dtype=float)
    if obs.shape != mu.shape:
        raise ValueError("observed and expected must have equal length")
    if obs.size and (obs.min() < 0 or np.any(obs != np.round(obs))):
        raise ValueError("observed deaths must be nonnegative integers")
    if np.any((mu == 0) & (obs > 0)):
        return NEG_INF
    ok = mu > 0
    return float(
        np.sum(obs[ok] * np.log(mu[ok]) - mu[ok] - gammaln(obs[ok] + 1.0))
    )


def _window_mean(traj: SirTrajectory, obs: SurveyObservation) -> float:
    lo, hi = obs.window
    if hi > traj.days:
        raise ValueError(
            f"survey window {obs.window} exceeds the trajectory horizon "
            f"({traj.days} days)"
        )
    series = traj.i() if obs.kind == "viral" else traj.r()
    return float(series[lo : hi + 1].mean()) / traj.population


def survey_loglik(traj: SirTrajectory, obs: SurveyObservation) -> float:
    """Normal log-density of a survey estimate around the window-mean prevalence.

    The variance theta * (1 - theta) / n uses the model's prevalence, not the
    observed estimate, so the normalization term matters and the density is
    non-Gaussian as a function of theta.
    """
    theta = _window_mean(traj, obs)
    if theta <= 0.0 or theta >= 1.0:
        return NEG_INF
    var = theta * (1.0 - theta) / obs.sample_size
    return float(
        -0.5 * (LOG_2PI + np.log(var)) - (obs.estimate - theta) ** 2 / (2.0 * var)
    )


def _detected_fraction(phi: float, cum_tests: float, n: float) -> float:
    return phi * np.sqrt(max(cum_tests, 0.0) / n)


def testing_loglik(
    traj: SirTrajectory,
    periods: Sequence[TestPeriod],
    phi: float,
    eta: float,
    n: float,
) -> float:
    """Normal log-likelihood of period case counts given cumulative incidence.

    Each period's count is the increment of phi_t * (I_t + R_t) between
    consecutive period ends, where phi_t = phi * sqrt(cum_tests_t / N); the
    variance is eta^2 times the period's share of tests relative to N.
    """
    if phi <= 0 or eta <= 0:
        raise ValueError("phi and eta must be positive")
    i = traj.i()
    r = traj.r()
    total = 0.0
    for per in periods:
        if per.end_day > traj.days:
            raise ValueError(f"period ending day {per.end_day} exceeds horizon")
        if per.tests <= 0:
            return NEG_INF
        prev_end = per.start_day - 1
        phi_end = _detected_fraction(phi, per.cum_tests_end, n)
        phi_prev = _detected_fraction(phi, per.cum_tests_end - per.tests, n)
        mean = phi_end * (i[per.end_day] + r[per.end_day])
        if prev_end >= 0:
            mean -= phi_prev * (i[prev_end] + r[prev_end])
        var = eta**2 * per.tests / n
        total += -0.5 * (LOG_2PI + np.log(var)) - (per.cases - mean) ** 2 / (2.0 * var)
    return float(total)


def decompose_case_mean(
    traj: SirTrajectory,
    phi: float,
    cum_tests: Sequence[float],
    n: float,
    t: int,
) -> tuple[float, float]:
    """Split day t's expected case count into new-infection and backlog parts.

    Returns (phi_t * nu_t, (phi_t - phi_{t-1}) * (I_{t-1} + R_{t-1})); the two
    add up to the increment of phi_t * (I_t + R_t).
    """
    if t < 1 or t > traj.days:
        raise ValueError(f"day {t} outside the trajectory horizon")
    phi_t = _detected_fraction(phi, cum_tests[t - 1], n)
    phi_prev = _detected_fraction(phi, cum_tests[t - 2], n) if t >= 2 else 0.0
    i = traj.i()
    r = traj.r()
    fresh = phi_t * traj.nu[t - 1]
    backlog = (phi_t - phi_prev) * (i[t - 1] + r[t - 1])
    return float(fresh), float(backlog)
