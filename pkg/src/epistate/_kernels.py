"""Numba-compiled hot path: log-posterior value and gradient in one sweep.

The sampler evaluates the posterior millions of times per fit, so the full
composition (unconstrained coordinates -> constrained parameters -> SIR
recursion -> likelihood terms) lives in a single jitted function together
with its hand-derived adjoint (reverse-mode) pass.  ``model.LogPosterior``
owns the argument packing and provides a slow reference implementation built
from the public-module operations; the two are pinned together by tests.

Unconstrained layout (dim = T + 7):
  x[0] ifr          logit-affine on its prior support
  x[1] beta_1       logit-affine
  x[2] sigma        logit-affine
  x[3] gamma_inv    logit-affine
  x[4] s1           logit-affine
  x[5] i1           logit-affine in log space on (i1_lo, min(i1_hi, N - s1))
  x[6] phi          logit-affine
  x[7] eta          logit-affine
  x[8:] w_2..w_T    the latent contact walk itself (centered)

i1 lives on a log scale because the data constrain the epidemic's launch
phase, which is linear in log(i1): a linear-scale coordinate would bend that
constraint into a curved ridge.  When its prior lower bound is zero the
transform floors the support at 1e-6 of the upper bound (a measure-1e-6
sliver of the uniform prior with no epidemiological content).

The contact path is beta_t = floor(w_t) with w_1 determined by beta_1 and
the walk prior Normal(w_{t+1}; w_t, sigma^2) evaluated directly on the
coordinates.  The centered form is deliberate: the observed epidemic pins
weighted sums of the early path extremely tightly, and those constraints
are linear in w but bilinear in the non-centered (sigma, increments)
coordinates, which curves the posterior and stalls gradient-based samplers.
floor(w) = w above ``delta`` and delta * exp(w/delta - 1) below it, keeping
beta positive while leaving the walk untouched at ordinary values.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)

PRIOR_UNIFORM = 0
PRIOR_TRUNCNORM = 1


@njit(cache=True)
def simulate_sir(s1, i1, r1, beta, gamma, pop):
    """Forward SIR recursion; returns (S, I, R, nu, ok)."""
    T = beta.shape[0]
    S = np.empty(T + 1)
    I = np.empty(T + 1)
    R = np.empty(T + 1)
    nu = np.empty(T)
    S[0] = s1
    I[0] = i1
    R[0] = r1
    for t in range(T):
        flow = beta[t] / pop * I[t] * S[t]
        nu[t] = flow
        S[t + 1] = S[t] - flow
        I[t + 1] = I[t] + flow - gamma * I[t]
        R[t + 1] = R[t] + gamma * I[t]
        if S[t + 1] < 0.0 or I[t + 1] < 0.0:
            return S, I, R, nu, False
    return S, I, R, nu, True


@njit(cache=True)
def logpost_and_grad(
    x,
    pop,
    prior_kind,
    prior_lo,
    prior_hi,
    prior_mean,
    prior_sd,
    prior_lognorm,
    tau,
    deaths,
    lgamma_deaths,
    sv_kind,
    sv_est,
    sv_n,
    sv_lo,
    sv_hi,
    pe_end,
    pe_prev,
    pe_cases,
    pe_tests,
    pe_qend,
    pe_qprev,
    delta,
):
    T = x.shape[0] - 7
    dim = x.shape[0]
    grad = np.zeros(dim)

    # ---- scalar transforms (order matters: s1 before i1's dynamic bound)
    sig = np.empty(8)
    c = np.empty(8)
    width = np.empty(8)
    logjac = 0.0
    i1_llo = 0.0
    i1_lhi = 0.0
    for k in range(8):
        s = 1.0 / (1.0 + np.exp(-x[k]))
        sig[k] = s
        if k == 5:
            hi = prior_hi[5]
            if pop - c[4] < hi:
                hi = pop - c[4]
            if prior_lo[5] > 0.0:
                i1_llo = np.log(prior_lo[5])
            else:
                i1_llo = np.log(prior_hi[5] * 1e-6)
            i1_lhi = np.log(hi)
            width[5] = i1_lhi - i1_llo
            c[5] = np.exp(i1_llo + width[5] * s)
            logjac += (
                np.log(c[5]) + np.log(width[5]) + np.log(s) + np.log(1.0 - s)
            )
        else:
            width[k] = prior_hi[k] - prior_lo[k]
            c[k] = prior_lo[k] + width[k] * s
            logjac += np.log(width[k]) + np.log(s) + np.log(1.0 - s)
    if not np.isfinite(logjac):
        return -np.inf, grad

    ifr = c[0]
    beta1 = c[1]
    sigma = c[2]
    ginv = c[3]
    s1 = c[4]
    i1 = c[5]
    phi = c[6]
    eta = c[7]
    gamma = 1.0 / ginv

    # ---- priors in constrained coordinates
    logprior = 0.0
    for k in range(8):
        if prior_kind[k] == PRIOR_UNIFORM:
            logprior += -np.log(prior_hi[k] - prior_lo[k])
        else:
            zk = (c[k] - prior_mean[k]) / prior_sd[k]
            logprior += (
                -0.5 * LOG_2PI
                - np.log(prior_sd[k])
                - 0.5 * zk * zk
                - prior_lognorm[k]
            )

    # ---- contact path (walk levels are coordinates; w_1 comes from beta_1)
    if beta1 >= delta:
        w1 = beta1
    else:
        w1 = delta * (1.0 + np.log(beta1 / delta))
    w = np.empty(T)
    beta = np.empty(T)
    fprime = np.empty(T)
    w[0] = w1
    for t in range(1, T):
        w[t] = x[8 + t - 1]
    sig2 = sigma * sigma
    ssq = 0.0
    for t in range(1, T):
        dw = w[t] - w[t - 1]
        ssq += dw * dw
    logprior += (T - 1) * (-0.5 * LOG_2PI - np.log(sigma)) - ssq / (2.0 * sig2)
    for t in range(T):
        if w[t] >= delta:
            beta[t] = w[t]
            fprime[t] = 1.0
        else:
            e = delta * np.exp(w[t] / delta - 1.0)
            beta[t] = e
            fprime[t] = e / delta

    # ---- trajectory
    S, I, R, nu, ok = simulate_sir(s1, i1, pop - s1 - i1, beta, gamma, pop)
    if not ok:
        return -np.inf, np.zeros(dim)

    loglik = 0.0
    s_bar = np.zeros(T + 1)
    i_bar = np.zeros(T + 1)
    r_bar = np.zeros(T + 1)
    nu_bar = np.zeros(T)
    c_bar = np.zeros(8)

    # ---- deaths: Poisson around ifr * (nu convolved with tau)
    n_deaths = deaths.shape[0]
    m = tau.shape[0] - 1
    if n_deaths > 0:
        g_mu = np.empty(n_deaths)
        for t in range(n_deaths):
            conv = 0.0
            k0 = t - m
            if k0 < 0:
                k0 = 0
            for k in range(k0, t + 1):
                conv += nu[k] * tau[t - k]
            mu = ifr * conv
            if mu <= 0.0:
                if deaths[t] > 0.0:
                    return -np.inf, np.zeros(dim)
                g_mu[t] = -1.0
            else:
                loglik += deaths[t] * np.log(mu) - mu - lgamma_deaths[t]
                g_mu[t] = deaths[t] / mu - 1.0
            c_bar[0] += g_mu[t] * conv
        for t in range(n_deaths):
            g = ifr * g_mu[t]
            k0 = t - m
            if k0 < 0:
                k0 = 0
            for k in range(k0, t + 1):
                nu_bar[k] += g * tau[t - k]

    # ---- surveys: normal around the window-mean prevalence
    for q in range(sv_kind.shape[0]):
        lo = sv_lo[q]
        hi = sv_hi[q]
        ndays = hi - lo + 1
        tot = 0.0
        if sv_kind[q] == 0:
            for t in range(lo, hi + 1):
                tot += I[t]
        else:
            for t in range(lo, hi + 1):
                tot += R[t]
        theta = tot / (ndays * pop)
        if theta <= 0.0 or theta >= 1.0:
            return -np.inf, np.zeros(dim)
        v = theta * (1.0 - theta) / sv_n[q]
        d = sv_est[q] - theta
        loglik += -0.5 * (LOG_2PI + np.log(v)) - d * d / (2.0 * v)
        vp = (1.0 - 2.0 * theta) / sv_n[q]
        dll = -vp / (2.0 * v) + d / v + d * d * vp / (2.0 * v * v)
        wq = dll / (ndays * pop)
        if sv_kind[q] == 0:
            for t in range(lo, hi + 1):
                i_bar[t] += wq
        else:
            for t in range(lo, hi + 1):
                r_bar[t] += wq

    # ---- testing: normal around the increment of phi_t * (I_t + R_t)
    for p in range(pe_end.shape[0]):
        e = pe_end[p]
        ep = pe_prev[p]
        phi_e = phi * pe_qend[p]
        phi_p = phi * pe_qprev[p]
        a_e = I[e] + R[e]
        a_p = I[ep] + R[ep]
        mean = phi_e * a_e - phi_p * a_p
        v = eta * eta * pe_tests[p] / pop
        d = pe_cases[p] - mean
        loglik += -0.5 * (LOG_2PI + np.log(v)) - d * d / (2.0 * v)
        gm = d / v
        gv = -0.5 / v + d * d / (2.0 * v * v)
        c_bar[6] += gm * (pe_qend[p] * a_e - pe_qprev[p] * a_p)
        c_bar[7] += gv * 2.0 * eta * pe_tests[p] / pop
        i_bar[e] += gm * phi_e
        r_bar[e] += gm * phi_e
        i_bar[ep] -= gm * phi_p
        r_bar[ep] -= gm * phi_p

    # ---- prior gradients
    for k in range(8):
        if prior_kind[k] == PRIOR_TRUNCNORM:
            c_bar[k] += -(c[k] - prior_mean[k]) / (prior_sd[k] * prior_sd[k])

    # ---- adjoint of the SIR recursion
    gamma_bar = 0.0
    beta_bar = np.empty(T)
    for t in range(T - 1, -1, -1):
        f_bar = i_bar[t + 1] - s_bar[t + 1] + nu_bar[t]
        s_bar[t] += s_bar[t + 1] + f_bar * beta[t] * I[t] / pop
        i_bar[t] += (
            i_bar[t + 1] * (1.0 - gamma)
            + r_bar[t + 1] * gamma
            + f_bar * beta[t] * S[t] / pop
        )
        r_bar[t] += r_bar[t + 1]
        beta_bar[t] = f_bar * I[t] * S[t] / pop
        gamma_bar += (r_bar[t + 1] - i_bar[t + 1]) * I[t]
    c_bar[4] += s_bar[0] - r_bar[0]
    c_bar[5] += i_bar[0] - r_bar[0]
    c_bar[3] += gamma_bar * (-1.0 / (ginv * ginv))

    # ---- adjoint of the contact path: likelihood via the floor map plus the
    # walk-prior terms coupling neighboring levels, sigma, and beta_1
    for t in range(T):
        wb = beta_bar[t] * fprime[t]
        if t >= 1:
            wb -= (w[t] - w[t - 1]) / sig2
        if t <= T - 2:
            wb += (w[t + 1] - w[t]) / sig2
        if t == 0:
            if beta1 >= delta:
                c_bar[1] += wb
            else:
                c_bar[1] += wb * delta / beta1
        else:
            grad[8 + t - 1] += wb
    c_bar[2] += -(T - 1) / sigma + ssq / (sig2 * sigma)

    # ---- map back to unconstrained coordinates
    for k in range(8):
        if k == 5:
            di1_dx5 = c[5] * width[5] * sig[5] * (1.0 - sig[5])
            grad[5] += (
                c_bar[5] * di1_dx5
                + width[5] * sig[5] * (1.0 - sig[5])
                + (1.0 - 2.0 * sig[5])
            )
        else:
            dcdx = width[k] * sig[k] * (1.0 - sig[k])
            grad[k] += c_bar[k] * dcdx + (1.0 - 2.0 * sig[k])
    if pop - s1 < prior_hi[5]:
        # i1's upper bound is N - s1 here: the bound, the value, and the
        # Jacobian terms all depend on x[4]
        bound = pop - s1
        di1_ds1 = -c[5] * sig[5] / bound
        dlj_ds1 = -sig[5] / bound - 1.0 / (bound * width[5])
        ds1_dx4 = width[4] * sig[4] * (1.0 - sig[4])
        grad[4] += (c_bar[5] * di1_ds1 + dlj_ds1) * ds1_dx4

    logp = logprior + loglik + logjac
    if not np.isfinite(logp):
        return -np.inf, np.zeros(dim)
    return logp, grad


# ---------------------------------------------------------------------------
# Jitted NUTS transition against the posterior kernel.
#
# The sampler's generic Python tree builder accepts any target callable, but
# its per-leapfrog overhead dominates on this posterior (trajectories of
# hundreds of steps are routine: the data pin curved combinations of the
# early contact path extremely tightly).  This mirror of the recursive
# builder runs the whole trajectory inside numba, calling logpost_and_grad
# directly.  Randomness comes from an inline splitmix64 stream so the
# transition is deterministic given its integer state.
# ---------------------------------------------------------------------------

_U64_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_MIX2 = np.uint64(0x94D049BB133111EB)
_U53_SCALE = 1.0 / 9007199254740992.0  # 2^-53


@njit(cache=True)
def _rng_uniform(state):
    """splitmix64 step; returns (new_state, uniform in [0, 1))."""
    state = state + _U64_GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    z = z ^ (z >> np.uint64(31))
    return state, (z >> np.uint64(11)) * _U53_SCALE


@njit(cache=True)
def _rng_normals(state, out):
    """Fill ``out`` with standard normals (Box-Muller)."""
    n = out.shape[0]
    i = 0
    while i < n:
        state, u1 = _rng_uniform(state)
        state, u2 = _rng_uniform(state)
        radius = np.sqrt(-2.0 * np.log(1.0 - u1))
        angle = 2.0 * np.pi * u2
        out[i] = radius * np.cos(angle)
        i += 1
        if i < n:
            out[i] = radius * np.sin(angle)
            i += 1
    return state


@njit(cache=True)
def _turn3(inv_mass, p_lm, p_lp, p_rm, p_rp, psum_l, psum_r):
    """The three generalized U-turn checks for a (left, right) block pair."""
    dim = p_lm.shape[0]
    t1 = 0.0
    t2 = 0.0
    t3 = 0.0
    t4 = 0.0
    t5 = 0.0
    t6 = 0.0
    for j in range(dim):
        rho = psum_l[j] + psum_r[j]
        rho1 = psum_l[j] + p_rm[j]
        rho2 = psum_r[j] + p_lp[j]
        t1 += rho * inv_mass[j] * p_lm[j]
        t2 += rho * inv_mass[j] * p_rp[j]
        t3 += rho1 * inv_mass[j] * p_lm[j]
        t4 += rho1 * inv_mass[j] * p_rm[j]
        t5 += rho2 * inv_mass[j] * p_lp[j]
        t6 += rho2 * inv_mass[j] * p_rp[j]
    return (
        t1 <= 0.0 or t2 <= 0.0 or t3 <= 0.0 or t4 <= 0.0 or t5 <= 0.0 or t6 <= 0.0
    )


@njit(cache=True)
def nuts_transition(
    x,
    logp,
    grad,
    eps,
    inv_mass,
    max_depth,
    div_threshold,
    rng_state_arr,
    pop,
    prior_kind,
    prior_lo,
    prior_hi,
    prior_mean,
    prior_sd,
    prior_lognorm,
    tau,
    deaths,
    lgamma_deaths,
    sv_kind,
    sv_est,
    sv_n,
    sv_lo,
    sv_hi,
    pe_end,
    pe_prev,
    pe_cases,
    pe_tests,
    pe_qend,
    pe_qprev,
    delta,
):
    """One dynamic-HMC transition; mirrors the generic Python tree builder."""
    dim = x.shape[0]
    rng_state = rng_state_arr[0]
    p0 = np.empty(dim)
    rng_state = _rng_normals(rng_state, p0)
    for j in range(dim):
        p0[j] = p0[j] / np.sqrt(inv_mass[j])
    kin0 = 0.0
    for j in range(dim):
        kin0 += inv_mass[j] * p0[j] * p0[j]
    h0 = logp - 0.5 * kin0

    # main tree state
    x_minus = x.copy()
    p_minus = p0.copy()
    g_minus = grad.copy()
    x_plus = x.copy()
    p_plus = p0.copy()
    g_plus = grad.copy()
    x_prop = x.copy()
    logp_prop = logp
    g_prop = grad.copy()
    log_w = 0.0
    psum = p0.copy()

    divergent = False
    alpha_sum = 0.0
    n_alpha = 0
    n_leaf_total = 0
    depth_reached = 0

    # checkpoint slots for the in-subtree dyadic U-turn checks
    ck_p = np.empty((max_depth + 1, dim))
    ck_prev = np.empty((max_depth + 1, dim))
    ck_prefix = np.empty((max_depth + 1, dim))

    for depth in range(max_depth):
        rng_state, u_dir = _rng_uniform(rng_state)
        forward = u_dir < 0.5
        if forward:
            cx = x_plus.copy()
            cp = p_plus.copy()
            cg = g_plus.copy()
            eps_d = eps
        else:
            cx = x_minus.copy()
            cp = p_minus.copy()
            cg = g_minus.copy()
            eps_d = -eps

        n_leaf = 1 << depth
        s_logw = -np.inf
        s_psum = np.zeros(dim)
        s_prefix = np.zeros(dim)
        s_xprop = cx.copy()
        s_lprop = -np.inf
        s_gprop = cg.copy()
        s_turn = False
        s_div = False
        s_pfirst = cp.copy()  # overwritten at leaf 0
        p_prev = cp.copy()

        for i in range(n_leaf):
            # one leapfrog step from the current endpoint (buffers in place;
            # everything that outlives the loop is copied out)
            for j in range(dim):
                cp[j] = cp[j] + 0.5 * eps_d * cg[j]
                cx[j] = cx[j] + eps_d * inv_mass[j] * cp[j]
            lp, cg = logpost_and_grad(
                cx, pop, prior_kind, prior_lo, prior_hi, prior_mean, prior_sd,
                prior_lognorm, tau, deaths, lgamma_deaths, sv_kind,
                sv_est, sv_n, sv_lo, sv_hi, pe_end, pe_prev, pe_cases,
                pe_tests, pe_qend, pe_qprev, delta,
            )
            kin = 0.0
            for j in range(dim):
                cp[j] = cp[j] + 0.5 * eps_d * cg[j]
                kin += inv_mass[j] * cp[j] * cp[j]
            n_leaf_total += 1
            dh = (lp - 0.5 * kin) - h0
            if np.isnan(dh):
                dh = -np.inf
            if dh < 0.0:
                alpha_sum += np.exp(dh)
            else:
                alpha_sum += 1.0
            n_alpha += 1
            if -dh > div_threshold:
                s_div = True
                break

            # progressive multinomial sampling within the subtree
            new_logw = np.logaddexp(s_logw, dh)
            rng_state, u_sel = _rng_uniform(rng_state)
            if np.log(u_sel) < dh - new_logw:
                s_xprop = cx.copy()
                s_lprop = lp
                s_gprop = cg.copy()
            s_logw = new_logw

            if i == 0:
                s_pfirst = cp.copy()

            # checkpoint this leaf as the open start of blocks 2^0..2^tz(i)
            tz = depth if i == 0 else 0
            if i != 0:
                ii = i
                while ii % 2 == 0:
                    tz += 1
                    ii >>= 1
            for k in range(min(tz, depth) + 1):
                ck_p[k] = cp
                ck_prefix[k] = s_prefix
                ck_prev[k] = p_prev
            for j in range(dim):
                s_prefix[j] += cp[j]
                p_prev[j] = cp[j]

            # close every dyadic block ending at this leaf
            k = 1
            while k <= depth and (i + 1) % (1 << k) == 0:
                psum_l = ck_prefix[k - 1] - ck_prefix[k]
                psum_r = s_prefix - ck_prefix[k - 1]
                if _turn3(
                    inv_mass, ck_p[k], ck_prev[k - 1], ck_p[k - 1], cp,
                    psum_l, psum_r,
                ):
                    s_turn = True
                    break
                k += 1
            if s_turn:
                break

        s_psum = s_prefix
        if s_div or s_turn:
            divergent = divergent or s_div
            break

        # biased root-level multinomial merge
        rng_state, u_sel = _rng_uniform(rng_state)
        if np.log(u_sel) < s_logw - log_w:
            x_prop = s_xprop.copy()
            logp_prop = s_lprop
            g_prop = s_gprop.copy()
        log_w = np.logaddexp(log_w, s_logw)

        # U-turn checks across the merged tree, oriented by time
        if forward:
            turned = _turn3(
                inv_mass, p_minus, p_plus, s_pfirst, cp, psum, s_psum
            )
            x_plus = cx.copy()
            p_plus = cp.copy()
            g_plus = cg.copy()
        else:
            turned = _turn3(
                inv_mass, cp, s_pfirst, p_minus, p_plus, s_psum, psum
            )
            x_minus = cx.copy()
            p_minus = cp.copy()
            g_minus = cg.copy()
        psum = psum + s_psum
        depth_reached = depth + 1
        if turned:
            break

    accept = alpha_sum / n_alpha if n_alpha > 0 else 0.0
    rng_state_arr[0] = rng_state
    return (
        x_prop, logp_prop, g_prop, accept, n_leaf_total, divergent,
        depth_reached,
    )
