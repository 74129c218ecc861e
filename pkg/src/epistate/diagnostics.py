"""Convergence diagnostics: split-Rhat and rank-based effective sample size.

Both follow the recommendations of Vehtari, Gelman, Simpson, Carpenter and
Buerkner (2021): chains are split in half, and the ESS is computed on
rank-normalized draws with Geyer's initial monotone sequence truncation.
"""

from __future__ import annotations

import numpy as np
from scipy import stats


def _split_chains(chains: np.ndarray) -> np.ndarray:
    """Halve each chain, doubling the chain count (drops an odd last draw)."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    half = chains.shape[1] // 2
    return np.vstack([chains[:, :half], chains[:, -half:]])


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    """Map draws to normal scores through their pooled fractional ranks."""
    flat = chains.reshape(-1)
    ranks = stats.rankdata(flat, method="average")
    # Blom (1958) offset keeps the extreme scores finite
    z = stats.norm.ppf((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(chains.shape)


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction on split chains.

    ``chains`` has shape (n_chains, n_draws).  Values near 1 indicate the
    between-chain variance matches the within-chain variance.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[0] < 2:
        raise ValueError("split-Rhat needs at least 2 chains")
    if chains.shape[1] < 4:
        raise ValueError("split-Rhat needs at least 4 draws per chain")
    split = _split_chains(chains)
    n = split.shape[1]
    chain_means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = n * chain_means.var(ddof=1)
    if within == 0:
        return float("inf") if between > 0 else 1.0
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _ess_single(chains: np.ndarray) -> float:
    """Multi-chain ESS via pairwise autocorrelation sums (Geyer truncation)."""
    m, n = chains.shape
    if np.ptp(chains) == 0:
        return float(chains.size)
    # per-chain autocovariance by FFT
    centered = chains - chains.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real / n
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)

    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and (rho_even + rho_odd) > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # enforce monotone decreasing pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho[: max_t + 1].sum() + rho[max_t + 1]
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_rank(chains: np.ndarray) -> float:
    """Rank-normalized bulk effective sample size.

    ``chains`` has shape (n_chains, n_draws); chains are split before rank
    normalization, so autocorrelation and poor mixing both reduce the result.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    if chains.shape[1] < 8:
        raise ValueError("ESS needs at least 8 draws per chain")
    return _ess_single(_rank_normalize(_split_chains(chains)))


def summarize_chains(chains_3d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-parameter (rhat, ess) for draws shaped (n_chains, n_draws, dim)."""
    arr = np.asarray(chains_3d, dtype=float)
    if arr.ndim != 3:
        raise ValueError("expected draws shaped (chains, draws, dim)")
    dim = arr.shape[2]
    rhat = np.empty(dim)
    ess = np.empty(dim)
    for j in range(dim):
        rhat[j] = split_rhat(arr[:, :, j])
        ess[j] = ess_rank(arr[:, :, j])
    return rhat, ess
