"""Parameter space, priors, coordinate transforms, and the log-posterior.

The sampler works in unconstrained coordinates (see ``_kernels`` for the
layout); this module owns the mapping to the constrained ``ParameterVector``,
the prior specification (including posterior-as-prior chaining between
regions), and the packing of data into the jitted posterior kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import _kernels
from .epi_dynamics import ContactPath, SirState, simulate
from .observation_models import (
    DelayDistribution,
    build_delay_pmf,
    deaths_loglik,
    expected_deaths,
    survey_loglik,
    testing_loglik,
)

NEG_INF = float("-inf")
LOG_2PI = math.log(2.0 * math.pi)

# below this value the contact rate is smoothly bent away from zero instead
# of following the latent walk linearly
BETA_FLOOR = 0.01

SCALAR_PARAMS = ("ifr", "beta1", "sigma", "gamma_inv", "s1", "i1", "phi", "eta")

DEFAULT_DELAY = dict(alpha=21.0, beta=1.1, quantile_cut=0.99)


def default_delay() -> DelayDistribution:
    return build_delay_pmf(**DEFAULT_DELAY)


def soft_floor(w, delta: float = BETA_FLOOR):
    """Identity above ``delta``, smooth positive exponential below it."""
    w = np.asarray(w, dtype=float)
    return np.where(w >= delta, w, delta * np.exp(np.minimum(w, delta) / delta - 1.0))


def soft_floor_inverse(b, delta: float = BETA_FLOOR):
    b = np.asarray(b, dtype=float)
    if np.any(b <= 0):
        raise ValueError("soft-floor values are strictly positive")
    return np.where(b >= delta, b, delta * (1.0 + np.log(np.minimum(b, delta) / delta)))




@dataclass(frozen=True)
class Prior:
    """One scalar prior: uniform, truncated normal, or a chained empirical."""

    kind: str
    lo: float
    hi: float
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "truncated_normal", "empirical"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not self.hi > self.lo:
            raise ValueError("prior upper bound must exceed the lower bound")
        if self.kind != "uniform" and self.sd <= 0:
            raise ValueError("prior sd must be positive")

    @property
    def is_uniform(self) -> bool:
        return self.kind == "uniform"

    def log_normalizer(self) -> float:
        """log of the truncated-normal mass between the bounds."""
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        return float(np.log(stats.norm.cdf(b) - stats.norm.cdf(a)))

    def logpdf(self, value: float) -> float:
        if not self.lo < value < self.hi:
            return NEG_INF
        if self.is_uniform:
            return -math.log(self.hi - self.lo)
        z = (value - self.mean) / self.sd
        return (
            -0.5 * LOG_2PI - math.log(self.sd) - 0.5 * z * z - self.log_normalizer()
        )

    def draw(self, rng: np.random.Generator) -> float:
        if self.is_uniform:
            return float(rng.uniform(self.lo, self.hi))
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        u = rng.uniform(stats.norm.cdf(a), stats.norm.cdf(b))
        return float(self.mean + self.sd * stats.norm.ppf(u))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "lo": self.lo, "hi": self.hi}
        if not self.is_uniform:
            out.update(mean=self.mean, sd=self.sd)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Prior":
        return cls(
            kind=d["kind"],
            lo=float(d["lo"]),
            hi=float(d["hi"]),
            mean=float(d.get("mean", 0.0)),
            sd=float(d.get("sd", 1.0)),
        )


@dataclass(frozen=True)
class PriorSpec:
    """Priors for the eight scalar parameters.

    The contact-path prior beyond beta_1 is the random walk itself
    (increments Normal(0, sigma^2)) and needs no descriptor.  ``gamma_inv``
    is the prior on the mean infectious period 1/gamma.
    """

    priors: dict

    def __post_init__(self):
        missing = set(SCALAR_PARAMS) - set(self.priors)
        extra = set(self.priors) - set(SCALAR_PARAMS)
        if missing or extra:
            raise ValueError(
                f"prior spec must cover exactly {SCALAR_PARAMS}; "
                f"missing={sorted(missing)} extra={sorted(extra)}"
            )

    def __getitem__(self, name: str) -> Prior:
        return self.priors[name]

    def with_prior(self, name: str, prior: Prior) -> "PriorSpec":
        new = dict(self.priors)
        new[name] = prior
        return PriorSpec(new)

    @classmethod
    def default(cls, population: float) -> "PriorSpec":
        n = float(population)
        return cls(
            {
                "ifr": Prior("uniform", 0.0, 0.03),
                "beta1": Prior("uniform", 0.0, 2.0),
                "sigma": Prior("uniform", 0.0, 0.3),
                "gamma_inv": Prior("truncated_normal", 5.5, 11.5, 8.5, 1.5),
                "s1": Prior("uniform", 0.9 * n, n),
                "i1": Prior("uniform", 0.0, 0.001 * n),
                "phi": Prior("uniform", 0.0, 20.0),
                "eta": Prior("uniform", 0.0, 5e4),
            }
        )

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.priors.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls({k: Prior.from_dict(v) for k, v in d.items()})

    def pack(self):
        """Arrays consumed by the posterior kernel, in SCALAR_PARAMS order."""
        kind = np.empty(8, dtype=np.int64)
        lo = np.empty(8)
        hi = np.empty(8)
        mean = np.empty(8)
        sd = np.empty(8)
        lognorm = np.empty(8)
        for k, name in enumerate(SCALAR_PARAMS):
            pr = self.priors[name]
            kind[k] = _kernels.PRIOR_UNIFORM if pr.is_uniform else _kernels.PRIOR_TRUNCNORM
            lo[k] = pr.lo
            hi[k] = pr.hi
            mean[k] = pr.mean
            sd[k] = pr.sd
            lognorm[k] = 0.0 if pr.is_uniform else pr.log_normalizer()
        return kind, lo, hi, mean, sd, lognorm


@dataclass(frozen=True)
class ParameterVector:
    """The constrained unknowns for one region fit."""

    ifr: float
    beta: np.ndarray
    sigma: float
    gamma: float
    s1: float
    i1: float
    phi: float
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    @property
    def gamma_inv(self) -> float:
        return 1.0 / self.gamma

    @property
    def horizon(self) -> int:
        return len(self.beta)

    def validate(self, spec: PriorSpec, population: float) -> None:
        """Raise if any field leaves the prior support."""
        for name in SCALAR_PARAMS:
            pr = spec[name]
            if name == "beta1":
                val = float(self.beta[0])
            elif name == "gamma_inv":
                val = self.gamma_inv
            else:
                val = getattr(self, name)
            if not pr.lo < val < pr.hi:
                raise ValueError(f"{name}={val} outside prior support ({pr.lo}, {pr.hi})")
        if self.beta.min() < 0:
            raise ValueError("contact rates must be nonnegative")
        if self.s1 + self.i1 > population:
            raise ValueError("s1 + i1 exceeds the population")


def log_prior(p: ParameterVector, spec: PriorSpec, population: float) -> float:
    """Constrained-space log prior, including the contact-walk terms.

    The walk density is evaluated on the pre-floor scale (identical to beta
    wherever beta >= BETA_FLOOR), with increments Normal(0, sigma^2).
    """
    total = 0.0
    for name in SCALAR_PARAMS:
        if name == "beta1":
            val = float(p.beta[0])
        elif name == "gamma_inv":
            val = p.gamma_inv
        else:
            val = getattr(p, name)
        term = spec[name].logpdf(val)
        if term == NEG_INF:
            return NEG_INF
        total += term
    if p.s1 + p.i1 > population:
        return NEG_INF
    if p.beta.min() <= 0:
        return NEG_INF
    w = soft_floor_inverse(p.beta)
    dw = np.diff(w)
    total += float(
        np.sum(-0.5 * LOG_2PI - np.log(p.sigma) - dw**2 / (2.0 * p.sigma**2))
    )
    return total


def draw_parameters(
    spec: PriorSpec, horizon: int, population: float, rng: np.random.Generator
) -> ParameterVector:
    """One ParameterVector drawn from the prior (walk increments included).

    The joint (s1, i1) draw is rejection-sampled onto s1 + i1 < N, matching
    the support the posterior kernel constructs.
    """
    vals = {name: spec[name].draw(rng) for name in SCALAR_PARAMS}
    i1_floor = spec["i1"].lo if spec["i1"].lo > 0 else spec["i1"].hi * 1e-6
    while vals["s1"] + vals["i1"] >= population or vals["i1"] <= i1_floor:
        vals["s1"] = spec["s1"].draw(rng)
        vals["i1"] = spec["i1"].draw(rng)
    w1 = float(soft_floor_inverse(vals["beta1"]))
    z = rng.standard_normal(horizon - 1)
    walk = w1 + vals["sigma"] * np.concatenate([[0.0], np.cumsum(z)])
    return ParameterVector(
        ifr=vals["ifr"],
        beta=soft_floor(walk),
        sigma=vals["sigma"],
        gamma=1.0 / vals["gamma_inv"],
        s1=vals["s1"],
        i1=vals["i1"],
        phi=vals["phi"],
        eta=vals["eta"],
    )


class ParamTransform:
    """Bijection between ParameterVector and the unconstrained vector."""

    def __init__(self, spec: PriorSpec, horizon: int, population: float):
        self.spec = spec
        self.horizon = int(horizon)
        self.population = float(population)
        self.dim = self.horizon + 7

    def _bounds(self, name: str, s1: float | None = None) -> tuple[float, float]:
        """Transform-scale bounds: i1 is handled on a log scale."""
        pr = self.spec[name]
        if name == "i1":
            hi = pr.hi if s1 is None else min(pr.hi, self.population - s1)
            lo = pr.lo if pr.lo > 0 else pr.hi * 1e-6
            return math.log(lo), math.log(hi)
        return pr.lo, pr.hi

    def constrain(self, x: np.ndarray) -> ParameterVector:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected vector of dim {self.dim}, got {x.shape}")
        sig = 1.0 / (1.0 + np.exp(-x[:8]))
        vals = {}
        s1 = None
        for k, name in enumerate(SCALAR_PARAMS):
            lo, hi = self._bounds(name, s1)
            vals[name] = lo + (hi - lo) * sig[k]
            if name == "i1":
                vals[name] = math.exp(vals[name])
            if name == "s1":
                s1 = vals[name]
        w1 = float(soft_floor_inverse(vals["beta1"]))
        walk = np.concatenate([[w1], x[8:]])
        beta = soft_floor(walk)
        return ParameterVector(
            ifr=vals["ifr"],
            beta=beta,
            sigma=vals["sigma"],
            gamma=1.0 / vals["gamma_inv"],
            s1=vals["s1"],
            i1=vals["i1"],
            phi=vals["phi"],
            eta=vals["eta"],
        )

    def unconstrain(self, p: ParameterVector) -> np.ndarray:
        if p.horizon != self.horizon:
            raise ValueError("parameter horizon does not match the transform")
        x = np.empty(self.dim)
        s1 = None
        for k, name in enumerate(SCALAR_PARAMS):
            if name == "beta1":
                val = float(p.beta[0])
            elif name == "gamma_inv":
                val = p.gamma_inv
            elif name == "i1":
                val = math.log(p.i1)
            else:
                val = getattr(p, name)
            lo, hi = self._bounds(name, s1)
            if not lo < val < hi:
                raise ValueError(f"{name}={val} outside the open support ({lo}, {hi})")
            u = (val - lo) / (hi - lo)
            x[k] = math.log(u) - math.log1p(-u)
            if name == "s1":
                s1 = val
        w = soft_floor_inverse(p.beta)
        x[8:] = w[1:]
        return x

    def log_jacobian(self, x: np.ndarray) -> float:
        """log |d(constrained)/d(unconstrained)| at x.

        The walk-level coordinates map to the pre-floor path identically, so
        only the eight scalar transforms contribute; i1's log-scale transform
        adds a log(i1) term.
        """
        x = np.asarray(x, dtype=float)
        sig = 1.0 / (1.0 + np.exp(-x[:8]))
        total = 0.0
        s1 = None
        for k, name in enumerate(SCALAR_PARAMS):
            lo, hi = self._bounds(name, s1)
            total += math.log(hi - lo) + math.log(sig[k]) + math.log1p(-sig[k])
            if name == "i1":
                total += lo + (hi - lo) * sig[k]  # log(i1) itself
            if name == "s1":
                s1 = lo + (hi - lo) * sig[k]
        return total


class LogPosterior:
    """Callable target: unconstrained vector -> (log density, gradient).

    Data enter as plain arrays so the object is cheap to pickle into worker
    processes.  Any of the three likelihood channels may be absent (empty
    deaths, no surveys, no periods), in which case the target reduces to the
    prior plus the transform Jacobian.
    """

    def __init__(
        self,
        population: float,
        horizon: int,
        spec: PriorSpec,
        deaths=None,
        surveys=(),
        periods=(),
        delay: DelayDistribution | None = None,
    ):
        self.population = float(population)
        self.horizon = int(horizon)
        self.spec = spec
        self.delay = delay if delay is not None else default_delay()
        self.transform = ParamTransform(spec, self.horizon, self.population)
        self.dim = self.transform.dim
        self.surveys = tuple(surveys)
        self.periods = tuple(periods)

        deaths = np.asarray([] if deaths is None else deaths, dtype=float)
        if deaths.size and len(deaths) != self.horizon:
            raise ValueError("death series length must equal the horizon")
        self._deaths = deaths
        self._lgamma_deaths = gammaln(deaths + 1.0)

        packed = spec.pack()
        (self._pk, self._plo, self._phi, self._pmean, self._psd, self._plnorm) = packed
        self._tau = np.asarray(self.delay.pmf, dtype=float)

        self._sv_kind = np.array(
            [0 if s.kind == "viral" else 1 for s in self.surveys], dtype=np.int64
        )
        self._sv_est = np.array([s.estimate for s in self.surveys], dtype=float)
        self._sv_n = np.array([s.sample_size for s in self.surveys], dtype=float)
        self._sv_lo = np.array([s.window[0] for s in self.surveys], dtype=np.int64)
        self._sv_hi = np.array([s.window[1] for s in self.surveys], dtype=np.int64)
        if self._sv_hi.size and self._sv_hi.max() > self.horizon:
            raise ValueError("survey window exceeds the model horizon")

        self._pe_end = np.array([p.end_day for p in self.periods], dtype=np.int64)
        self._pe_prev = np.array(
            [p.start_day - 1 for p in self.periods], dtype=np.int64
        )
        self._pe_cases = np.array([p.cases for p in self.periods], dtype=float)
        self._pe_tests = np.array([p.tests for p in self.periods], dtype=float)
        cum_end = np.array([p.cum_tests_end for p in self.periods], dtype=float)
        self._pe_qend = np.sqrt(cum_end / self.population)
        self._pe_qprev = np.sqrt(
            np.maximum(cum_end - self._pe_tests, 0.0) / self.population
        )
        if self._pe_end.size and self._pe_end.max() > self.horizon:
            raise ValueError("test period exceeds the model horizon")

    @property
    def kernel_args(self) -> tuple:
        """Packed arguments of the jitted posterior kernel.

        The sampler uses this to run whole trajectories inside numba.
        """
        return (
            self.population,
            self._pk,
            self._plo,
            self._phi,
            self._pmean,
            self._psd,
            self._plnorm,
            self._tau,
            self._deaths,
            self._lgamma_deaths,
            self._sv_kind,
            self._sv_est,
            self._sv_n,
            self._sv_lo,
            self._sv_hi,
            self._pe_end,
            self._pe_prev,
            self._pe_cases,
            self._pe_tests,
            self._pe_qend,
            self._pe_qprev,
            BETA_FLOOR,
        )

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        x = np.ascontiguousarray(x, dtype=float)
        return _kernels.logpost_and_grad(
            x,
            self.population,
            self._pk,
            self._plo,
            self._phi,
            self._pmean,
            self._psd,
            self._plnorm,
            self._tau,
            self._deaths,
            self._lgamma_deaths,
            self._sv_kind,
            self._sv_est,
            self._sv_n,
            self._sv_lo,
            self._sv_hi,
            self._pe_end,
            self._pe_prev,
            self._pe_cases,
            self._pe_tests,
            self._pe_qend,
            self._pe_qprev,
            BETA_FLOOR,
        )

    def value(self, x: np.ndarray) -> float:
        return self(x)[0]

    def reference_value(self, x: np.ndarray) -> float:
        """Slow equivalent of ``value`` composed from the public operations."""
        p = self.transform.constrain(x)
        lp = log_prior(p, self.spec, self.population)
        if lp == NEG_INF:
            return NEG_INF
        total = lp + self.transform.log_jacobian(x)
        try:
            traj = simulate(
                SirState(p.s1, p.i1, self.population - p.s1 - p.i1),
                ContactPath(p.beta, p.sigma),
                p.gamma,
                self.population,
                self.horizon,
            )
        except ValueError:
            return NEG_INF
        if self._deaths.size:
            mu = expected_deaths(traj.nu, p.ifr, self.delay)
            total += deaths_loglik(self._deaths, mu)
        for obs in self.surveys:
            total += survey_loglik(traj, obs)
        if self.periods:
            total += testing_loglik(traj, self.periods, p.phi, p.eta, self.population)
        return total

    def constrain_draws(self, xs: np.ndarray) -> np.ndarray:
        """Map unconstrained draws (n, dim) to constrained rows (n, T + 7)."""
        xs = np.atleast_2d(xs)
        out = np.empty((xs.shape[0], self.horizon + 7))
        for j, x in enumerate(xs):
            p = self.transform.constrain(x)
            out[j, :7] = (p.ifr, p.sigma, p.gamma, p.s1, p.i1, p.phi, p.eta)
            out[j, 7:] = p.beta
        return out

    @property
    def param_names(self) -> list[str]:
        return ["ifr", "sigma", "gamma", "s1", "i1", "phi", "eta"] + [
            f"beta_{t}" for t in range(1, self.horizon + 1)
        ]

    @classmethod
    def from_dataset(cls, dataset, spec: PriorSpec, delay=None) -> "LogPosterior":
        """Build the target from a data_io.RegionDataset."""
        return cls(
            population=dataset.population,
            horizon=dataset.horizon,
            spec=spec,
            deaths=dataset.deaths,
            surveys=dataset.surveys,
            periods=dataset.periods,
            delay=delay,
        )

    def draw_from_prior(self, rng: np.random.Generator) -> ParameterVector:
        return draw_parameters(self.spec, self.horizon, self.population, rng)

    def initial_point(self, rng: np.random.Generator, retries: int = 100) -> np.ndarray:
        """A prior draw with finite posterior density, retried up to ``retries``."""
        for _ in range(retries):
            x = self.transform.unconstrain(self.draw_from_prior(rng))
            if np.isfinite(self(x)[0]):
                return x
        raise RuntimeError(
            f"no finite initialization found in {retries} prior draws"
        )


def log_posterior(x, population, horizon, spec, deaths=None, surveys=(), periods=(),
                  delay=None):
    """One-shot evaluation; build a LogPosterior directly for repeated use."""
    target = LogPosterior(
        population, horizon, spec, deaths=deaths, surveys=surveys, periods=periods,
        delay=delay,
    )
    return target(x)


def fit_dataset(dataset, spec: PriorSpec, cfg, delay=None, workers=None):
    """Sample the posterior for one region dataset; returns PosteriorDraws."""
    from .sampler import sample

    target = LogPosterior.from_dataset(dataset, spec, delay=delay)
    return sample(
        target,
        cfg,
        init=target.initial_point,
        param_names=target.param_names,
        constrain=target.constrain_draws,
        workers=workers,
    )


def chain_posterior_to_prior(draws, param: str, base: Prior) -> Prior:
    """Moment-match posterior draws of one parameter into the next prior.

    Returns an ``empirical`` truncated normal with the draws' mean and sd,
    truncated to the base prior's support.  Requires at least 1000 draws and
    split-Rhat below 1.05 on the parameter.
    """
    from .diagnostics import split_rhat  # local import to avoid a cycle

    values = draws.get(param)
    if values.size < 1000:
        raise ValueError(f"need at least 1000 draws to chain, got {values.size}")
    by_chain = draws.by_chain(param)
    rhat = split_rhat(by_chain)
    if rhat >= 1.05:
        raise ValueError(f"draws for {param!r} have not converged (Rhat={rhat:.3f})")
    sd = float(np.std(values, ddof=1))
    return Prior(
        kind="empirical",
        lo=base.lo,
        hi=base.hi,
        mean=float(np.mean(values)),
        sd=max(sd, 1e-6),
    )
