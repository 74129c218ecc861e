"""Synthetic data generation from known parameters, plus the SBC harness.

``generate`` runs every observation channel generatively (Poisson deaths off
the delay convolution, normal survey estimates, normal period case counts)
so that fits on synthetic data exercise exactly the likelihood the sampler
sees.  ``sbc_run`` wraps the full loop: draw truth from the prior, generate
a dataset, round-trip it through the data_io file formats, fit, and record
the rank of the truth among thinned posterior draws.
"""

from __future__ import annotations

import datetime as dt
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import data_io
from .epi_dynamics import ContactPath, SirState, simulate
from .model import (
    LogPosterior,
    ParameterVector,
    Prior,
    PriorSpec,
    default_delay,
    draw_parameters,
    fit_dataset,
)
from .observation_models import SurveyObservation, expected_deaths
from .sampler import SamplerConfig, sample

RANK_PARAMS = ("ifr", "sigma", "gamma_inv", "s1", "i1", "phi", "eta", "beta_1")


@dataclass(frozen=True)
class GroundTruth:
    """A full parameter vector plus everything needed to generate data."""

    params: ParameterVector
    population: float
    tests_daily: np.ndarray
    survey_plan: tuple = ()  # (kind, sample_size, (start_day, end_day))
    first_day: dt.date = dt.date(2020, 3, 1)
    region_code: str = "SYN"

    def __post_init__(self):
        object.__setattr__(
            self, "tests_daily", np.asarray(self.tests_daily, dtype=float)
        )
        if len(self.tests_daily) != self.params.horizon:
            raise ValueError("tests series length must equal the horizon")
        if self.params.s1 + self.params.i1 > self.population:
            raise ValueError("initial compartments exceed the population")

    @property
    def horizon(self) -> int:
        return self.params.horizon


def logistic_tests(horizon: int, peak: float = 8000.0, midpoint: float = 60.0,
                   rate: float = 0.25) -> np.ndarray:
    """A logistic daily-test ramp, mimicking capacity growth."""
    t = np.arange(1, horizon + 1)
    return np.round(peak / (1.0 + np.exp(-rate * (t - midpoint))))


def sbc_prior(population: float) -> PriorSpec:
    """Desk-scale prior for calibration runs.

    Narrower than the data-analysis default so every draw yields an actual
    epidemic (basic ratio above one at day 1) and generated counts stay far
    from the nonnegativity boundary; self-consistency only requires that the
    generator and the fit share this spec.
    """
    n = float(population)
    return PriorSpec(
        {
            "ifr": Prior("uniform", 0.004, 0.012),
            "beta1": Prior("uniform", 0.25, 0.45),
            "sigma": Prior("uniform", 0.005, 0.02),
            "gamma_inv": Prior("truncated_normal", 5.5, 11.5, 8.5, 1.5),
            "s1": Prior("uniform", 0.99 * n, 0.997 * n),
            "i1": Prior("uniform", 100.0, 800.0),
            "phi": Prior("uniform", 0.4, 1.2),
            "eta": Prior("uniform", 400.0, 1200.0),
        }
    )


def default_truth(horizon: int = 120, population: float = 1e6) -> GroundTruth:
    """The fixed desk-scale scenario used by recovery tests and the CLI."""
    t = np.arange(horizon)
    beta = 0.05 + 0.34 * np.exp(-t / 90.0)
    params = ParameterVector(
        ifr=0.007,
        beta=beta,
        sigma=0.012,
        gamma=1.0 / 8.5,
        s1=0.995 * population,
        i1=300.0,
        phi=0.85,
        eta=800.0,
    )
    return GroundTruth(
        params=params,
        population=population,
        tests_daily=logistic_tests(horizon),
        survey_plan=(
            ("viral", 3605, (55, 59)),
            ("sero", 3518, (55, 59)),
        ),
    )


def simulate_truth(truth: GroundTruth):
    p = truth.params
    initial = SirState(p.s1, p.i1, truth.population - p.s1 - p.i1)
    return simulate(
        initial, ContactPath(p.beta, p.sigma), p.gamma, truth.population,
        truth.horizon,
    )


def generate(truth: GroundTruth, seed: int, l_days: int = 7,
             delay=None) -> data_io.RegionDataset:
    """Draw one synthetic RegionDataset; deterministic per seed."""
    rng = np.random.default_rng(seed)
    delay = delay if delay is not None else default_delay()
    p = truth.params
    n = truth.population
    traj = simulate_truth(truth)
    i_path = traj.i()
    r_path = traj.r()

    mu = expected_deaths(traj.nu, p.ifr, delay)
    deaths = rng.poisson(mu).astype(float)

    cum_tests = np.cumsum(truth.tests_daily)
    phi_t = p.phi * np.sqrt(cum_tests / n)
    a = i_path[1:] + r_path[1:]
    a_prev = i_path[:-1] + r_path[:-1]
    phi_prev = np.concatenate([[0.0], phi_t[:-1]])
    mean_cases = phi_t * a - phi_prev * a_prev
    sd_cases = p.eta * np.sqrt(truth.tests_daily / n)
    cases = np.where(
        truth.tests_daily > 0,
        np.round(mean_cases + sd_cases * rng.standard_normal(truth.horizon)),
        0.0,
    )
    cases = np.maximum(cases, 0.0)

    surveys = []
    for kind, size, window in truth.survey_plan:
        lo, hi = window
        series = i_path if kind == "viral" else r_path
        theta = series[lo : hi + 1].mean() / n
        sd = np.sqrt(theta * (1.0 - theta) / size)
        est = theta + sd * rng.standard_normal()
        while not 0.0 < est < 1.0:  # essentially never at survey scale
            est = theta + sd * rng.standard_normal()
        surveys.append(
            SurveyObservation(kind=kind, estimate=float(est), sample_size=size,
                              window=(lo, hi))
        )

    dataset = data_io.RegionDataset(
        region_code=truth.region_code,
        population=n,
        first_day=truth.first_day,
        deaths=deaths,
        cases=cases,
        tests=truth.tests_daily.copy(),
        surveys=tuple(surveys),
    )
    return replace(dataset, periods=data_io.make_periods(dataset, l_days))


def survey_records_of(dataset: data_io.RegionDataset) -> list:
    """Calendar-dated survey records matching data_io's JSON schema."""
    records = []
    for obs in dataset.surveys:
        records.append(
            {
                "region": dataset.region_code,
                "kind": obs.kind,
                "estimate": obs.estimate,
                "sample_size": obs.sample_size,
                "window_start": dataset.date_of(obs.window[0]),
                "window_end": dataset.date_of(obs.window[1]),
            }
        )
    return records


def write_fixture(truth: GroundTruth, seed: int, outdir, l_days: int = 7):
    """Generate a dataset and write it in the data_io file formats.

    Returns (timeseries_path, surveys_path, dataset).
    """
    dataset = generate(truth, seed, l_days=l_days)
    ts_path = os.path.join(outdir, f"{truth.region_code.lower()}_timeseries.csv")
    sv_path = os.path.join(outdir, f"{truth.region_code.lower()}_surveys.json")
    data_io.write_timeseries_csv(ts_path, [dataset])
    data_io.write_survey_json(sv_path, survey_records_of(dataset))
    return ts_path, sv_path, dataset


def roundtrip_through_files(truth: GroundTruth, seed: int,
                            l_days: int = 7) -> data_io.RegionDataset:
    """Generate, persist, and re-ingest so the full pipeline is exercised."""
    with tempfile.TemporaryDirectory() as tmp:
        ts_path, sv_path, dataset = write_fixture(truth, seed, tmp, l_days)
        raw = data_io.ingest_timeseries(ts_path)[truth.region_code]
        records = data_io.load_survey_records(sv_path)
        end = truth.first_day + dt.timedelta(days=truth.horizon - 1)
        return data_io.build_region_dataset(
            raw,
            truth.population,
            survey_records=records,
            l_days=l_days,
            start=truth.first_day,
            end=end,
        )


@dataclass
class SbcResult:
    """Rank statistics from a calibration run."""

    ranks: dict
    n_levels: int
    coverage_ifr: np.ndarray
    excluded: list
    replications: int

    def uniformity_pvalue(self, param: str, bins: int = 20) -> float:
        return uniformity_pvalue(self.ranks[param], self.n_levels, bins)

    @property
    def coverage_rate(self) -> float:
        return float(np.mean(self.coverage_ifr))


def uniformity_pvalue(ranks, n_levels: int, bins: int = 20) -> float:
    """Chi-square goodness-of-fit p-value for ranks uniform on {0..n_levels-1}."""
    ranks = np.asarray(ranks)
    edges = np.linspace(0, n_levels, bins + 1)
    counts, _ = np.histogram(ranks, bins=edges)
    return float(stats.chisquare(counts).pvalue)


def _sbc_replication(args):
    (spec, cfg, horizon, population, tests_daily, survey_plan, l_days,
     seed_entropy, corrupt, include_data) = args
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_entropy)))
    truth_params = draw_parameters(spec, horizon, population, rng)
    gen_params = truth_params
    if corrupt == "ifr_double":
        gen_params = replace(truth_params, ifr=min(2.0 * truth_params.ifr, 0.5))
    elif corrupt is not None:
        raise ValueError(f"unknown corruption {corrupt!r}")

    gen_seed = int(rng.integers(2**63))
    if include_data:
        truth = GroundTruth(
            params=gen_params,
            population=population,
            tests_daily=tests_daily,
            survey_plan=survey_plan,
        )
        dataset = roundtrip_through_files(truth, gen_seed, l_days)
        draws = fit_dataset(dataset, spec, cfg, workers=1)
    else:
        target = LogPosterior(population, horizon, spec)
        draws = sample(
            target, cfg, init=target.initial_point,
            param_names=target.param_names, constrain=target.constrain_draws,
            workers=1,
        )

    truth_vals = {
        "ifr": truth_params.ifr,
        "sigma": truth_params.sigma,
        "gamma_inv": truth_params.gamma_inv,
        "s1": truth_params.s1,
        "i1": truth_params.i1,
        "phi": truth_params.phi,
        "eta": truth_params.eta,
        "beta_1": float(truth_params.beta[0]),
    }
    rhat_max = max(
        draws.r_hat[draws.index_of(p if p != "gamma_inv" else "gamma")]
        for p in RANK_PARAMS
    )
    out = {"rhat_max": float(rhat_max), "ranks": {}, "covered": False}
    lo, hi = np.quantile(draws.get("ifr"), [0.025, 0.975])
    out["covered"] = bool(lo <= truth_params.ifr <= hi)
    n = draws.n_draws
    for param in RANK_PARAMS:
        vals = draws.get(param)
        thin_idx = np.round(np.linspace(0, n - 1, _RANK_DRAWS)).astype(int)
        out["ranks"][param] = int(np.sum(vals[thin_idx] < truth_vals[param]))
    return out


_RANK_DRAWS = 99  # ranks live on {0..99}: 100 levels, 20 bins of 5


def sbc_run(
    truth_prior: PriorSpec,
    replications: int,
    cfg: SamplerConfig,
    horizon: int = 120,
    population: float = 1e6,
    tests_daily=None,
    survey_plan=(("viral", 3605, (55, 59)), ("sero", 3518, (55, 59))),
    l_days: int = 7,
    seed: int = 0,
    corrupt: str | None = None,
    include_data: bool = True,
    workers: int | None = None,
    rhat_cutoff: float = 1.1,
) -> SbcResult:
    """Simulation-based calibration: rank of truth among posterior draws.

    Replications whose fits show max Rhat above ``rhat_cutoff`` on the ranked
    parameters are excluded from the histograms and reported in ``excluded``.
    ``corrupt="ifr_double"`` doubles the IFR in the generator only (negative
    control: uniformity must then fail for the IFR).
    """
    if replications < 20:
        raise ValueError("SBC needs at least 20 replications")
    if tests_daily is None:
        tests_daily = logistic_tests(horizon)
    jobs = [
        (
            truth_prior, cfg, horizon, population, tests_daily, survey_plan,
            l_days, (seed, rep), corrupt, include_data,
        )
        for rep in range(replications)
    ]
    n_workers = workers
    if n_workers is None:
        n_workers = int(os.environ.get("EPISTATE_MAX_WORKERS", "1"))
    n_workers = max(1, min(n_workers, replications, os.cpu_count() or 1))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_sbc_replication, jobs))
    else:
        results = [_sbc_replication(j) for j in jobs]

    ranks = {p: [] for p in RANK_PARAMS}
    coverage = []
    excluded = []
    for rep, res in enumerate(results):
        if res["rhat_max"] > rhat_cutoff:
            excluded.append(rep)
            continue
        for p in RANK_PARAMS:
            ranks[p].append(res["ranks"][p])
        coverage.append(res["covered"])
    return SbcResult(
        ranks={p: np.asarray(v) for p, v in ranks.items()},
        n_levels=_RANK_DRAWS + 1,
        coverage_ifr=np.asarray(coverage, dtype=bool),
        excluded=excluded,
        replications=replications,
    )
