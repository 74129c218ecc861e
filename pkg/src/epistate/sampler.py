"""Dynamic multinomial no-U-turn HMC with warmup adaptation.

The integrator is the leapfrog with a diagonal mass matrix; trajectories are
built by iterative doubling until the generalized U-turn criterion fires
(Hoffman & Gelman 2014; Betancourt 2017 for the multinomial state selection
and the momentum-sum turning checks).  Warmup combines dual-averaging step
size adaptation with Stan-style expanding windows for the diagonal mass
matrix: an initial step-size-only buffer (15% of warmup), three doubling
variance-estimation windows, and a final step-size-only buffer (10%).

Chains are independent: given a seed, chain c draws its randomness from
``SeedSequence(seed).spawn()[c]``, so results are bit-reproducible whether
chains run sequentially or in parallel worker processes.
"""

from __future__ import annotations

import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .diagnostics import summarize_chains

WORKERS_ENV = "EPISTATE_MAX_WORKERS"


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    total_steps: int = 20_000
    warmup_steps: int = 10_000
    target_accept: float = 0.9
    max_tree_depth: int = 10
    seed: int = 1
    divergence_threshold: float = 1000.0
    mass_matrix: str = "diag"

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must lie in (0, total_steps)")
        if not 0.5 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0.5, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")
        if self.mass_matrix not in ("diag", "dense"):
            raise ValueError("mass_matrix must be 'diag' or 'dense'")

    @property
    def kept_steps(self) -> int:
        return self.total_steps - self.warmup_steps


@dataclass
class PosteriorDraws:
    """Post-warmup draws with chain labels and convergence diagnostics."""

    draws: np.ndarray
    param_names: list
    chain_id: np.ndarray
    divergent: np.ndarray
    r_hat: np.ndarray
    ess: np.ndarray
    n_chains: int
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.draws.shape[0] != self.chain_id.shape[0]:
            raise ValueError("chain_id length must match draw count")
        if self.draws.shape[1] != len(self.param_names):
            raise ValueError("param_names length must match draw width")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def draws_per_chain(self) -> int:
        return self.n_draws // self.n_chains

    @property
    def divergence_rate(self) -> float:
        return float(self.divergent.mean())

    def index_of(self, name: str) -> int:
        return self.param_names.index(name)

    def get(self, name: str) -> np.ndarray:
        """Values of one parameter; 'gamma_inv' derives from 'gamma'."""
        if name == "gamma_inv" and "gamma_inv" not in self.param_names:
            return 1.0 / self.draws[:, self.index_of("gamma")]
        return self.draws[:, self.index_of(name)]

    def by_chain(self, name: str) -> np.ndarray:
        """Values of one parameter reshaped to (n_chains, draws_per_chain)."""
        return self.get(name).reshape(self.n_chains, self.draws_per_chain)


def _sharp(inv_mass: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Velocity for momentum p; inv_mass may be diagonal (1-d) or dense (2-d)."""
    return inv_mass @ p if inv_mass.ndim == 2 else inv_mass * p


def _kinetic(p: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(p @ _sharp(inv_mass, p))


def _sample_momentum(inv_mass, chol, rng, dim):
    """Draw p ~ Normal(0, inv_mass^-1); chol is the Cholesky of inv_mass."""
    z = rng.standard_normal(dim)
    if inv_mass.ndim == 1:
        return z / np.sqrt(inv_mass)
    # cov(p) = inv(L L^T) requires p = L^-T z
    from scipy.linalg import solve_triangular

    return solve_triangular(chol, z, trans="T", lower=True)


def leapfrog(target, x, p, grad, eps, inv_mass):
    """One leapfrog step; returns (x, p, logp, grad)."""
    p_half = p + 0.5 * eps * grad
    x_new = x + eps * _sharp(inv_mass, p_half)
    logp_new, grad_new = target(x_new)
    p_new = p_half + 0.5 * eps * grad_new
    return x_new, p_new, logp_new, grad_new


def find_reasonable_epsilon(target, x, logp, grad, inv_mass, rng, chol=None):
    """Double/halve the step size until the one-step accept ratio crosses 1/2."""
    eps = 1.0
    p = _sample_momentum(inv_mass, chol, rng, len(x))
    h0 = logp - _kinetic(p, inv_mass)
    _, p1, logp1, _ = leapfrog(target, x, p, grad, eps, inv_mass)
    delta = (logp1 - _kinetic(p1, inv_mass)) - h0
    if np.isnan(delta):
        delta = -np.inf
    direction = 1 if delta > np.log(0.5) else -1
    for _ in range(100):
        eps *= 2.0**direction
        _, p1, logp1, _ = leapfrog(target, x, p, grad, eps, inv_mass)
        delta = (logp1 - _kinetic(p1, inv_mass)) - h0
        if np.isnan(delta):
            delta = -np.inf
        if direction * delta <= direction * np.log(0.5):
            break
        if not 1e-10 < eps < 1e7:
            break
    return eps


class _DualAveraging:
    """Nesterov dual averaging of log step size (Hoffman & Gelman 2014)."""

    def __init__(self, eps0, target_accept, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.m = 0
        self.eps = eps0

    def update(self, accept_prob):
        self.m += 1
        frac = 1.0 / (self.m + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_prob)
        log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.h_bar
        w = self.m**-self.kappa
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        self.eps = float(np.exp(log_eps))

    @property
    def adapted_eps(self) -> float:
        return float(np.exp(self.log_eps_bar))


class _Tree:
    """One NUTS subtree: endpoints, momentum sum, and the sampled proposal."""

    __slots__ = (
        "x_minus", "p_minus", "g_minus", "x_plus", "p_plus", "g_plus",
        "x_prop", "logp_prop", "g_prop", "log_w", "p_sum",
        "turning", "divergent", "alpha_sum", "n_alpha", "n_leapfrog",
    )


def _make_leaf(x, p, grad, logp, kin, h0, div_threshold):
    t = _Tree()
    t.x_minus = t.x_plus = t.x_prop = x
    t.p_minus = t.p_plus = t.p_sum = p
    t.g_minus = t.g_plus = t.g_prop = grad
    t.logp_prop = logp
    h = logp - kin
    delta = h - h0
    if np.isnan(delta):
        delta = -np.inf
    t.log_w = delta
    t.divergent = -delta > div_threshold
    t.turning = False
    t.alpha_sum = float(np.exp(min(delta, 0.0)))
    t.n_alpha = 1
    t.n_leapfrog = 1
    return t


def _turning(left, right, inv_mass) -> bool:
    """Generalized U-turn checks on a merged (left=backward, right=forward) pair."""
    sharp_lm = _sharp(inv_mass, left.p_minus)
    sharp_lp = _sharp(inv_mass, left.p_plus)
    sharp_rm = _sharp(inv_mass, right.p_minus)
    sharp_rp = _sharp(inv_mass, right.p_plus)
    rho = left.p_sum + right.p_sum
    if rho @ sharp_lm <= 0 or rho @ sharp_rp <= 0:
        return True
    # boundary checks between the two subtrees
    rho1 = left.p_sum + right.p_minus
    if rho1 @ sharp_lm <= 0 or rho1 @ sharp_rm <= 0:
        return True
    rho2 = right.p_sum + left.p_plus
    if rho2 @ sharp_lp <= 0 or rho2 @ sharp_rp <= 0:
        return True
    return False


def _merge(old, new, direction, inv_mass, rng, biased):
    """Fold subtree ``new`` (built in ``direction``) into ``old``."""
    left, right = (old, new) if direction == 1 else (new, old)
    log_w_tot = np.logaddexp(old.log_w, new.log_w)
    if biased:
        # root-level merges favor the fresh subtree (improves mixing)
        p_new = np.exp(min(new.log_w - old.log_w, 0.0))
    else:
        p_new = np.exp(new.log_w - log_w_tot) if np.isfinite(log_w_tot) else 0.0
    if rng.random() < p_new:
        old.x_prop = new.x_prop
        old.logp_prop = new.logp_prop
        old.g_prop = new.g_prop
    old.x_minus, old.p_minus, old.g_minus = left.x_minus, left.p_minus, left.g_minus
    old.x_plus, old.p_plus, old.g_plus = right.x_plus, right.p_plus, right.g_plus
    old.p_sum = left.p_sum + right.p_sum
    old.log_w = log_w_tot
    old.alpha_sum += new.alpha_sum
    old.n_alpha += new.n_alpha
    old.n_leapfrog += new.n_leapfrog
    old.divergent |= new.divergent
    old.turning = _turning(left, right, inv_mass)
    return old


def _build_tree(target, depth, x, p, grad, direction, eps, h0, inv_mass, rng,
                div_threshold):
    """Recursively build a subtree of 2^depth leapfrog states."""
    if depth == 0:
        x1, p1, logp1, g1 = leapfrog(target, x, p, grad, direction * eps, inv_mass)
        return _make_leaf(x1, p1, g1, logp1, _kinetic(p1, inv_mass), h0, div_threshold)
    first = _build_tree(
        target, depth - 1, x, p, grad, direction, eps, h0, inv_mass, rng,
        div_threshold,
    )
    if first.turning or first.divergent:
        return first
    if direction == 1:
        x2, p2, g2 = first.x_plus, first.p_plus, first.g_plus
    else:
        x2, p2, g2 = first.x_minus, first.p_minus, first.g_minus
    second = _build_tree(
        target, depth - 1, x2, p2, g2, direction, eps, h0, inv_mass, rng,
        div_threshold,
    )
    # accumulate stats even if the far half stops the trajectory
    if second.turning or second.divergent:
        first.alpha_sum += second.alpha_sum
        first.n_alpha += second.n_alpha
        first.n_leapfrog += second.n_leapfrog
        first.divergent |= second.divergent
        first.turning = True
        return first
    return _merge(first, second, direction, inv_mass, rng, biased=False)


def _nuts_transition(target, x, logp, grad, eps, inv_mass, max_depth, rng,
                     div_threshold, chol=None):
    p0 = _sample_momentum(inv_mass, chol, rng, len(x))
    h0 = logp - _kinetic(p0, inv_mass)
    tree = _make_leaf(x, p0, grad, logp, _kinetic(p0, inv_mass), h0, div_threshold)
    # the anchor state is not a fresh leapfrog step
    tree.log_w = 0.0
    tree.divergent = False
    tree.alpha_sum = 0.0
    tree.n_alpha = 0
    tree.n_leapfrog = 0
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction == 1:
            xe, pe, ge = tree.x_plus, tree.p_plus, tree.g_plus
        else:
            xe, pe, ge = tree.x_minus, tree.p_minus, tree.g_minus
        sub = _build_tree(
            target, depth, xe, pe, ge, direction, eps, h0, inv_mass, rng,
            div_threshold,
        )
        if sub.turning or sub.divergent:
            tree.alpha_sum += sub.alpha_sum
            tree.n_alpha += sub.n_alpha
            tree.n_leapfrog += sub.n_leapfrog
            tree.divergent |= sub.divergent
            break
        tree = _merge(tree, sub, direction, inv_mass, rng, biased=True)
        depth += 1
        if tree.turning:
            break
    accept = tree.alpha_sum / max(tree.n_alpha, 1)
    return (
        tree.x_prop, tree.logp_prop, tree.g_prop, accept, tree.n_leapfrog,
        tree.divergent, depth,
    )


def _mass_windows(warmup: int):
    """(start, end) spans of the variance-estimation windows."""
    init = int(0.15 * warmup)
    term = int(0.10 * warmup)
    span = warmup - init - term
    if span < 40:
        return []
    w1 = span // 7
    w2 = 2 * w1
    w3 = span - w1 - w2
    a = init
    return [(a, a + w1), (a + w1, a + w1 + w2), (a + w1 + w2, a + span)]


class _MassEstimator:
    """Accumulates draws within one warmup window into a mass estimate."""

    def __init__(self, dim: int, dense: bool):
        self.dense = dense
        self.count = 0
        self.sum = np.zeros(dim)
        self.sum_sq = np.zeros((dim, dim)) if dense else np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.count += 1
        self.sum += x
        if self.dense:
            self.sum_sq += np.outer(x, x)
        else:
            self.sum_sq += x * x

    def estimate(self):
        """Shrunk covariance (or variance vector) and its Cholesky factor."""
        n = self.count
        mean = self.sum / n
        shrink = n / (n + 5.0)
        floor = 1e-3 * (5.0 / (n + 5.0))
        if self.dense:
            cov = (self.sum_sq - n * np.outer(mean, mean)) / (n - 1)
            inv_mass = shrink * cov + floor * np.eye(len(mean))
            try:
                chol = np.linalg.cholesky(inv_mass)
            except np.linalg.LinAlgError:
                inv_mass = np.maximum(np.diag(inv_mass), 1e-10)
                chol = None
            return inv_mass, chol
        var = (self.sum_sq - n * mean**2) / (n - 1)
        return shrink * var + floor, None


def _run_chain(target, x0, cfg: SamplerConfig, seed_seq) -> dict:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    dim = len(x0)
    x = np.ascontiguousarray(x0, dtype=float)
    logp, grad = target(x)
    if not np.isfinite(logp):
        raise ValueError("initial point has non-finite log density")

    # targets exposing their jitted kernel run whole trajectories in numba
    fast_args = None
    if cfg.mass_matrix == "diag" and hasattr(target, "kernel_args"):
        fast_args = target.kernel_args
        rng_state = seed_seq.generate_state(1, np.uint64)

    inv_mass = np.ones(dim)
    chol = None
    eps = find_reasonable_epsilon(target, x, logp, grad, inv_mass, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    windows = _mass_windows(cfg.warmup_steps)
    win_idx = 0
    est = _MassEstimator(dim, cfg.mass_matrix == "dense")

    kept = cfg.kept_steps
    draws = np.empty((kept, dim))
    divergent = np.zeros(kept, dtype=bool)
    accept_stats = np.empty(cfg.total_steps)
    depth_hits = 0
    n_grad = 0

    for step in range(cfg.total_steps):
        warm = step < cfg.warmup_steps
        if fast_args is not None:
            x, logp, grad, accept, n_leap, div, depth = _kernels.nuts_transition(
                x, logp, grad, da.eps if warm else eps, inv_mass,
                cfg.max_tree_depth, cfg.divergence_threshold, rng_state,
                *fast_args,
            )
        else:
            x, logp, grad, accept, n_leap, div, depth = _nuts_transition(
                target, x, logp, grad, da.eps if warm else eps, inv_mass,
                cfg.max_tree_depth, rng, cfg.divergence_threshold, chol,
            )
        accept_stats[step] = accept
        n_grad += n_leap
        if depth >= cfg.max_tree_depth:
            depth_hits += 1
        if warm:
            da.update(accept)
            if win_idx < len(windows):
                lo, hi = windows[win_idx]
                if lo <= step < hi:
                    est.add(x)
                if step == hi - 1 and est.count > 1:
                    inv_mass, chol = est.estimate()
                    est = _MassEstimator(dim, cfg.mass_matrix == "dense")
                    win_idx += 1
                    eps0 = find_reasonable_epsilon(
                        target, x, logp, grad, inv_mass, rng, chol
                    )
                    da = _DualAveraging(eps0, cfg.target_accept)
            if step == cfg.warmup_steps - 1:
                eps = da.adapted_eps
        else:
            draws[step - cfg.warmup_steps] = x
            divergent[step - cfg.warmup_steps] = div

    return {
        "draws": draws,
        "divergent": divergent,
        "step_size": eps,
        "inv_mass": inv_mass,
        "accept_mean": float(accept_stats[cfg.warmup_steps :].mean()),
        "max_depth_hits": depth_hits,
        "n_gradient_evals": n_grad,
    }


def _chain_job(args):
    target, x0, cfg, seed_seq = args
    return _run_chain(target, x0, cfg, seed_seq)


def _resolve_workers(cfg_chains: int, workers) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, min(workers, cfg_chains, os.cpu_count() or 1))


def sample(target, cfg: SamplerConfig, init, param_names=None, constrain=None,
           workers=None) -> PosteriorDraws:
    """Run NUTS chains against ``target`` (callable x -> (logp, grad)).

    ``init`` is a point shared by all chains, an array of per-chain points,
    or a callable(rng) drawing one point per chain.  ``constrain`` optionally
    maps the raw draw matrix into reporting coordinates before diagnostics.
    Given the same config and seed the result is bit-identical, regardless
    of how many worker processes are used.
    """
    seed_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    inits = []
    for c in range(cfg.chains):
        if callable(init):
            rng = np.random.Generator(np.random.PCG64(seed_seqs[c].spawn(1)[0]))
            inits.append(np.asarray(init(rng), dtype=float))
        else:
            arr = np.asarray(init, dtype=float)
            inits.append(arr[c] if arr.ndim == 2 else arr)

    jobs = [(target, inits[c], cfg, seed_seqs[c]) for c in range(cfg.chains)]
    n_workers = _resolve_workers(cfg.chains, workers)
    if n_workers > 1:
        try:
            pickle.dumps(target)
        except Exception:
            n_workers = 1
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]

    kept = cfg.kept_steps
    raw = np.stack([r["draws"] for r in results])  # (chains, kept, dim)
    if constrain is not None:
        mapped = np.stack([constrain(raw[c]) for c in range(cfg.chains)])
    else:
        mapped = raw
    if param_names is None:
        param_names = [f"x{j}" for j in range(mapped.shape[2])]
    r_hat, ess = summarize_chains(mapped)
    flat = mapped.reshape(cfg.chains * kept, mapped.shape[2])
    chain_id = np.repeat(np.arange(cfg.chains), kept)
    divergent = np.concatenate([r["divergent"] for r in results])
    stats = {
        "seed": cfg.seed,
        "step_size": [r["step_size"] for r in results],
        "accept_mean": [r["accept_mean"] for r in results],
        "max_depth_hits": [r["max_depth_hits"] for r in results],
        "n_gradient_evals": [r["n_gradient_evals"] for r in results],
    }
    return PosteriorDraws(
        draws=flat,
        param_names=list(param_names),
        chain_id=chain_id,
        divergent=divergent,
        r_hat=r_hat,
        ess=ess,
        n_chains=cfg.chains,
        stats=stats,
    )


def diagnostics(draws: PosteriorDraws) -> dict:
    """Per-parameter split-Rhat and rank-normalized ESS.

    Requires at least 2 chains and 100 kept draws per chain.
    """
    if draws.n_chains < 2:
        raise ValueError("Rhat needs at least 2 chains")
    if draws.draws_per_chain < 100:
        raise ValueError("diagnostics need at least 100 draws per chain")
    return {
        name: (float(draws.r_hat[j]), float(draws.ess[j]))
        for j, name in enumerate(draws.param_names)
    }
