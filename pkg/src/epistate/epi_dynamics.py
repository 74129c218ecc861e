"""Deterministic discrete-time SIR dynamics with a time-varying contact rate.

Day indexing convention used throughout the package: a trajectory over a
horizon of ``days`` data days holds ``days + 1`` states.  Index 0 is the
initial condition (the state at the start of day 1) and index t is the state
at the end of day t.  The contact rate ``beta[t - 1]`` drives the transition
into day t, so ``nu[t - 1] = S_{t-1} - S_t`` is the number of new infections
on day t.

Compartments are real-valued: the model is a deterministic mean-field
recursion, which keeps every downstream likelihood differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SirState:
    """Compartment counts (susceptible, infectious, removed) on one day."""

    s: float
    i: float
    r: float

    def __post_init__(self):
        if self.s < 0 or self.i < 0 or self.r < 0:
            raise ValueError(
                f"negative compartment: S={self.s}, I={self.i}, R={self.r}"
            )

    @property
    def n(self) -> float:
        return self.s + self.i + self.r


@dataclass(frozen=True)
class SirTrajectory:
    """A simulated path of SirStates plus the daily new-infection series.

    ``states`` has one entry per day boundary (length days + 1); ``nu`` has
    one entry per day (length days), with ``nu[j] = states[j].s -
    states[j+1].s``.
    """

    states: tuple[SirState, ...]
    nu: np.ndarray
    population: float

    @property
    def days(self) -> int:
        return len(self.states) - 1

    def s(self) -> np.ndarray:
        return np.array([st.s for st in self.states])

    def i(self) -> np.ndarray:
        return np.array([st.i for st in self.states])

    def r(self) -> np.ndarray:
        return np.array([st.r for st in self.states])


@dataclass(frozen=True)
class ContactPath:
    """Per-day contact rates beta_t and the random-walk step scale sigma."""

    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        if beta.size and beta.min() < 0:
            raise ValueError("contact rates must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class VaccinationSchedule:
    """Daily second-dose counts and the confirmed-case total blocking doses.

    ``confirmed_cumulative`` may be a scalar (held fixed over the horizon) or
    a per-day array of length >= days; people counted there are assumed never
    to receive a dose, so the eligible pool on day t is
    ``N - confirmed_cumulative[t] - cumulative doses given before day t``.
    """

    second_doses: np.ndarray
    confirmed_cumulative: float | np.ndarray = 0.0

    def __post_init__(self):
        doses = np.asarray(self.second_doses, dtype=float)
        object.__setattr__(self, "second_doses", doses)
        if doses.size and doses.min() < 0:
            raise ValueError("second-dose counts must be nonnegative")

    def confirmed_at(self, t: int) -> float:
        conf = self.confirmed_cumulative
        if np.ndim(conf) == 0:
            return float(conf)
        return float(conf[t])


def step(state: SirState, beta: float, gamma: float, n: float) -> SirState:
    """Advance the SIR recursion one day.

    Raises ValueError for beta < 0, gamma outside (0, 1], or when the update
    would overshoot a compartment below zero (possible when beta * I / N > 1,
    where the discrete recursion stops being meaningful).
    """
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    flow = beta / n * state.i * state.s
    s_next = state.s - flow
    i_next = state.i + flow - gamma * state.i
    r_next = state.r + gamma * state.i
    if s_next < 0 or i_next < 0:
        raise ValueError(
            f"update overshoots a compartment below zero (beta={beta}, "
            f"I/N={state.i / n:.4f})"
        )
    return SirState(s_next, i_next, r_next)


def simulate(
    initial: SirState, contacts: ContactPath, gamma: float, n: float, days: int
) -> SirTrajectory:
    """Run the recursion for ``days`` days; beta must have one entry per day."""
    if days != len(contacts.beta):
        raise ValueError(
            f"days ({days}) must equal the contact-path length "
            f"({len(contacts.beta)})"
        )
    states = [initial]
    for t in range(days):
        try:
            states.append(step(states[-1], contacts.beta[t], gamma, n))
        except ValueError as err:
            raise ValueError(f"day {t + 1}: {err}") from err
    s = np.array([st.s for st in states])
    return SirTrajectory(states=tuple(states), nu=s[:-1] - s[1:], population=n)


def simulate_with_vaccination(
    initial: SirState,
    contacts: ContactPath,
    gamma: float,
    schedule: VaccinationSchedule,
    n: float,
    days: int,
) -> SirTrajectory:
    """Simulate with second doses moving susceptibles directly to removed.

    Doses are spread uniformly over the eligible pool (everyone except
    confirmed cases and the already vaccinated), so the susceptible share of
    day t's doses is S_t / pool_t, clamped so S never goes negative.
    """
    if days != len(contacts.beta):
        raise ValueError(
            f"days ({days}) must equal the contact-path length "
            f"({len(contacts.beta)})"
        )
    if len(schedule.second_doses) < days:
        raise ValueError("dose schedule shorter than the simulation horizon")
    states = [initial]
    vaccinated = 0.0
    for t in range(days):
        try:
            nxt = step(states[-1], contacts.beta[t], gamma, n)
        except ValueError as err:
            raise ValueError(f"day {t + 1}: {err}") from err
        pool = n - schedule.confirmed_at(t) - vaccinated
        if pool <= 0:
            raise ValueError(
                f"day {t + 1}: schedule implies a non-positive eligible pool "
                f"({pool:.1f})"
            )
        doses_to_s = schedule.second_doses[t] * states[-1].s / pool
        doses_to_s = min(doses_to_s, nxt.s)
        nxt = SirState(nxt.s - doses_to_s, nxt.i, nxt.r + doses_to_s)
        vaccinated += schedule.second_doses[t]
        states.append(nxt)
    s = np.array([st.s for st in states])
    return SirTrajectory(states=tuple(states), nu=s[:-1] - s[1:], population=n)


def effective_beta(agg: SirTrajectory) -> np.ndarray:
    """Invert the susceptible equation for the per-day contact rate.

    beta_t = N * (S_{t-1} - S_t) / (I_{t-1} * S_{t-1}); days where the
    denominator vanishes get NaN instead of raising.
    """
    if agg.days < 1:
        raise ValueError("trajectory must span at least one day")
    s = agg.s()
    i = agg.i()
    out = np.full(agg.days, np.nan)
    denom = i[:-1] * s[:-1]
    ok = denom > 0
    out[ok] = agg.population * (s[:-1] - s[1:])[ok] / denom[ok]
    return out
