"""Posterior summarization, multi-region aggregation, and projections.

Every summary starts from per-draw trajectory simulation (vectorized across
draws), so reported bands are full posterior functionals rather than
plug-ins.  Quantiles are computed with numpy's default linear interpolation.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass, field

import numpy as np

from .epi_dynamics import effective_beta  # noqa: F401  (re-exported convenience)
from .sampler import PosteriorDraws

QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class TrajectoryDraws:
    """Per-draw compartment paths on a common date index.

    Arrays are (n_draws, days + 1); index 0 is the state at the start of
    ``first_day``.  ``cum_cases`` holds the observed cumulative confirmed
    cases (summed across regions for aggregates), aligned to days 1..T.
    """

    population: float
    first_day: dt.date
    s: np.ndarray
    i: np.ndarray
    r: np.ndarray
    cum_cases: np.ndarray | None = None
    gamma: np.ndarray | None = None  # per-draw removal rate where shared

    @property
    def n_draws(self) -> int:
        return self.s.shape[0]

    @property
    def days(self) -> int:
        return self.s.shape[1] - 1

    @property
    def nu(self) -> np.ndarray:
        return self.s[:, :-1] - self.s[:, 1:]

    def date_of(self, day: int) -> dt.date:
        return self.first_day + dt.timedelta(days=day - 1)


def simulate_draws(draws: PosteriorDraws, population: float) -> TrajectoryDraws:
    """Vectorized SIR recursion over every posterior draw."""
    beta_cols = [j for j, n in enumerate(draws.param_names) if n.startswith("beta_")]
    horizon = len(beta_cols)
    beta = draws.draws[:, beta_cols]
    gamma = draws.get("gamma")
    s1 = draws.get("s1")
    i1 = draws.get("i1")
    n = draws.n_draws
    s = np.empty((n, horizon + 1))
    i = np.empty((n, horizon + 1))
    r = np.empty((n, horizon + 1))
    s[:, 0] = s1
    i[:, 0] = i1
    r[:, 0] = population - s1 - i1
    for t in range(horizon):
        flow = beta[:, t] / population * i[:, t] * s[:, t]
        s[:, t + 1] = s[:, t] - flow
        i[:, t + 1] = i[:, t] + flow - gamma * i[:, t]
        r[:, t + 1] = r[:, t] + gamma * i[:, t]
    return TrajectoryDraws(
        population=population, first_day=dt.date(2020, 1, 1), s=s, i=i, r=r,
        gamma=gamma,
    )


def _bands(values: np.ndarray, quantiles=QUANTILES) -> np.ndarray:
    """Pointwise quantiles along the draw axis; rows ordered as requested."""
    return np.nanquantile(values, quantiles, axis=0)


@dataclass
class RegionSummary:
    """Quantile bands for the headline quantities of one region fit."""

    region_code: str
    first_day: dt.date
    horizon: int
    quantiles: tuple
    ifr: np.ndarray  # (3,)
    daily_infections: np.ndarray  # (3, T)
    cumulative_incidence: np.ndarray  # (3, T), share of population
    r_t: np.ndarray  # (3, T)
    undercount: np.ndarray  # (3, T), NaN before the first confirmed case
    diagnostics: dict = field(default_factory=dict)

    QUANTITIES = ("daily_infections", "cumulative_incidence", "r_t", "undercount")

    def band(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def date_of(self, day: int) -> dt.date:
        return self.first_day + dt.timedelta(days=day - 1)


def summarize(draws: PosteriorDraws, dataset, quantiles=QUANTILES) -> RegionSummary:
    """Posterior bands for new infections, incidence, r(t), and undercount."""
    traj = simulate_draws(draws, dataset.population)
    beta_cols = [j for j, n in enumerate(draws.param_names) if n.startswith("beta_")]
    beta = draws.draws[:, beta_cols]
    gamma = draws.get("gamma")
    horizon = len(beta_cols)

    cum_inc = (traj.i + traj.r)[:, 1:] / dataset.population
    r_t = beta / gamma[:, None]
    cum_cases = np.asarray(dataset.cum_cases, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        undercount = np.where(
            cum_cases[None, :] > 0,
            (traj.i + traj.r)[:, 1:] / cum_cases[None, :],
            np.nan,
        )

    rh = draws.r_hat
    diag = {
        "r_hat_max": float(np.max(rh)),
        "ess_min": float(np.min(draws.ess)),
        "divergence_rate": draws.divergence_rate,
        "n_draws": draws.n_draws,
    }
    return RegionSummary(
        region_code=dataset.region_code,
        first_day=dataset.first_day,
        horizon=horizon,
        quantiles=tuple(quantiles),
        ifr=np.quantile(draws.get("ifr"), quantiles),
        daily_infections=_bands(traj.nu, quantiles),
        cumulative_incidence=_bands(cum_inc, quantiles),
        r_t=_bands(r_t, quantiles),
        undercount=_bands(undercount, quantiles),
        diagnostics=diag,
    )


def aggregate_regions(fits: list) -> TrajectoryDraws:
    """Sum per-draw trajectories across regions on the common date window.

    ``fits`` is a list of (draws, dataset).  Draw counts are equalized by
    evenly-spaced subsampling to the minimum; the date window is the
    intersection of the regional horizons (day-boundary aligned).
    """
    if not fits:
        raise ValueError("nothing to aggregate")
    trajs = []
    for draws, dataset in fits:
        t = simulate_draws(draws, dataset.population)
        t.first_day = dataset.first_day
        t.cum_cases = np.asarray(dataset.cum_cases, dtype=float)
        trajs.append(t)

    n_min = min(t.n_draws for t in trajs)
    start = max(t.first_day for t in trajs)
    end = min(t.first_day + dt.timedelta(days=t.days) for t in trajs)
    if end <= start:
        raise ValueError("regional date indexes do not overlap")
    days = (end - start).days

    total_pop = sum(t.population for t in trajs)
    shape = (n_min, days + 1)
    s = np.zeros(shape)
    i = np.zeros(shape)
    r = np.zeros(shape)
    cum_cases = np.zeros(days)
    gamma_flow = np.zeros((n_min, days))  # summed gamma * I for effective gamma
    for t in trajs:
        keep = np.round(np.linspace(0, t.n_draws - 1, n_min)).astype(int)
        offset = (start - t.first_day).days
        sl = slice(offset, offset + days + 1)
        s += t.s[keep, sl]
        i += t.i[keep, sl]
        r += t.r[keep, sl]
        gamma_flow += t.gamma[keep, None] * t.i[keep, sl][:, :-1]
        cum_cases += t.cum_cases[offset : offset + days]
    out = TrajectoryDraws(
        population=total_pop, first_day=start + dt.timedelta(days=1),
        s=s, i=i, r=r, cum_cases=cum_cases,
    )
    out.gamma = gamma_flow.sum(axis=1) / np.maximum(
        i[:, :-1].sum(axis=1), 1e-12
    )  # draw-level effective removal rate of the mixture
    return out


def effective_beta_draws(traj: TrajectoryDraws) -> np.ndarray:
    """Per-draw contact rate implied by the susceptible decrements."""
    s, i = traj.s, traj.i
    denom = i[:, :-1] * s[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(
            denom > 0, traj.population * (s[:, :-1] - s[:, 1:]) / denom, np.nan
        )
    return out


@dataclass(frozen=True)
class ProjectionScenario:
    """Forward-simulation assumptions: dose ramp and frozen dynamics.

    ``end_level`` may be a scalar daily second-dose rate or a (lo, hi) pair
    sampled uniformly per draw.  ``frozen_r`` keeps each draw's contact rate
    at its terminal value; ``frozen_undercount`` accrues confirmed cases at
    the terminal confirmed-per-infection rate, shrinking the vaccine-eligible
    pool.
    """

    start_day: dt.date
    horizon: int
    start_level: float = 0.0
    end_level: float | tuple = (500_000.0, 750_000.0)
    ramp_days: int = 50
    frozen_r: bool = True
    frozen_undercount: bool = True

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("projection horizon must be nonnegative")
        lo, hi = self.level_range()
        if lo < 0 or hi < lo:
            raise ValueError("dose levels must be nonnegative and ordered")
        if self.ramp_days < 1:
            raise ValueError("ramp must last at least one day")

    def level_range(self) -> tuple:
        if np.ndim(self.end_level) == 0:
            return float(self.end_level), float(self.end_level)
        lo, hi = self.end_level
        return float(lo), float(hi)


@dataclass
class ProjectionResult:
    scenario: ProjectionScenario
    quantiles: tuple
    daily_infections: np.ndarray  # (3, horizon)
    cumulative_immunity: np.ndarray  # (3, horizon), share of population
    added_infections: np.ndarray  # per-draw total over the horizon

    def added_infections_interval(self, lo=0.25, hi=0.75) -> tuple:
        return (
            float(np.quantile(self.added_infections, lo)),
            float(np.quantile(self.added_infections, hi)),
        )

    def date_of(self, day: int) -> dt.date:
        return self.scenario.start_day + dt.timedelta(days=day)


def project(
    traj: TrajectoryDraws,
    scenario: ProjectionScenario,
    confirmed_cumulative: float | None = None,
    seed: int = 0,
    quantiles=QUANTILES,
) -> ProjectionResult:
    """Forward-simulate every draw from its terminal state under vaccination.

    The contact rate is each draw's terminal effective rate (frozen), doses
    ramp linearly from ``start_level`` to a per-draw end level, and only the
    unconfirmed, unvaccinated pool receives them, with the susceptible share
    moved straight to removed.
    """
    rng = np.random.default_rng(seed)
    n = traj.n_draws
    horizon = scenario.horizon
    beta_eff = effective_beta_draws(traj)
    beta_term = beta_eff[:, -1]
    if traj.gamma is not None:
        gamma = np.asarray(traj.gamma)
    else:
        gamma = (traj.r[:, -1] - traj.r[:, -2]) / np.maximum(traj.i[:, -2], 1e-12)

    if confirmed_cumulative is None:
        if traj.cum_cases is None:
            raise ValueError("need confirmed cumulative cases at projection start")
        confirmed_cumulative = float(traj.cum_cases[-1])

    s = traj.s[:, -1].copy()
    i = traj.i[:, -1].copy()
    r = traj.r[:, -1].copy()
    ever_infected = i + r
    confirmed = np.full(n, confirmed_cumulative)
    # fraction of infections confirmed via testing, held fixed (reciprocal
    # of the terminal undercount)
    confirm_rate = confirmed / np.maximum(ever_infected, 1.0)
    if not scenario.frozen_undercount:
        confirm_rate = np.zeros(n)

    lo, hi = scenario.level_range()
    end_levels = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)

    vacc_cum = np.zeros(n)
    nu = np.empty((n, horizon))
    immunity = np.empty((n, horizon))
    pop = traj.population
    for t in range(horizon):
        ramp = min((t + 1) / scenario.ramp_days, 1.0)
        doses = scenario.start_level + ramp * (end_levels - scenario.start_level)
        flow = beta_term / pop * i * s
        s_next = s - flow
        i_next = i + flow - gamma * i
        r_next = r + gamma * i
        nu[:, t] = flow
        ever_infected = ever_infected + flow
        pool = np.maximum(pop - confirmed - vacc_cum, 1e-9)
        doses_to_s = np.minimum(doses * s / pool, s_next)
        s = s_next - doses_to_s
        i = i_next
        r = r_next + doses_to_s
        confirmed = confirmed + flow * confirm_rate
        vacc_cum = vacc_cum + doses
        immunity[:, t] = (ever_infected + vacc_cum) / pop
    return ProjectionResult(
        scenario=scenario,
        quantiles=tuple(quantiles),
        daily_infections=_bands(nu, quantiles),
        cumulative_immunity=_bands(immunity, quantiles),
        added_infections=nu.sum(axis=1),
    )
