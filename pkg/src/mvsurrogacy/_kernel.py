"""Compiled Metropolis-within-Gibbs sweep.

One sweep, in order:

1. random-walk Metropolis on each scale parameter (log tau / log psi,
   logit-rescaled rho), targeting the likelihood with the latent effects
   integrated out;
2. the location vector (eta1, lambda20, lambda30) from its Gaussian full
   conditional, again with latents integrated out;
3. each study's latent effect vector from its exact multivariate normal
   conditional;
4. (alt structure) (lambda30, lambda31, lambda32) given the latents;
5. imputation of masked observations given latents and observed data.

Steps 1-2 draw from conditionals of the marginal posterior and step 3
immediately redraws the latents, so the sweep leaves the joint posterior
invariant. Random numbers are supplied by the caller in blocks.
"""

import math

import numpy as np
from numba import njit

BIVARIATE, MAIN, ALT, UNSTRUCTURED = 0, 1, 2, 3
LOG, LOGIT = 0, 1
BATCH = 50


@njit(cache=True)
def coefficients(p, code, A, c, D):
    """Fill the regression form; returns False if a conditional variance is not positive."""
    for i in range(3):
        c[i] = p[i]
        for j in range(3):
            A[i, j] = 0.0
    t1, t2, t3 = p[5], p[6], p[7]
    r12, r13, r23 = p[8], p[9], p[10]
    D[0] = t1 * t1
    D[2] = 1.0
    if code == ALT:
        D[1] = t2 * t2
        A[2, 0] = p[3]
        A[2, 1] = p[4]
        D[2] = p[11] * p[11]
    else:
        l21 = r12 * t2 / t1
        A[1, 0] = l21
        D[1] = t2 * t2 - l21 * l21 * t1 * t1
        if code == MAIN:
            l32 = r23 * t3 / t2
            A[2, 1] = l32
            D[2] = t3 * t3 - l32 * l32 * t2 * t2
        elif code == UNSTRUCTURED:
            det = 1.0 - r12 * r12
            b1 = (r13 - r12 * r23) / det
            b2 = (r23 - r12 * r13) / det
            A[2, 0] = b1 * t3 / t1
            A[2, 1] = b2 * t3 / t2
            D[2] = t3 * t3 * (1.0 - (b1 * r13 + b2 * r23))
    for i in range(3):
        if not (D[i] > 0.0) or not math.isfinite(D[i]):
            return False
    return True


@njit(cache=True)
def moments(A, c, D, d, G, m0, T, B):
    """Mean m0, covariance T and precision B of the true effects."""
    for i in range(3):
        for j in range(3):
            G[i, j] = 0.0
    G[0, 0] = 1.0
    G[1, 1] = 1.0
    G[2, 2] = 1.0
    G[1, 0] = A[1, 0]
    G[2, 1] = A[2, 1]
    G[2, 0] = A[2, 0] + A[2, 1] * A[1, 0]
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += G[i, j] * c[j]
        m0[i] = s
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                s += G[i, k] * D[k] * G[j, k]
            T[i, j] = s
    # B = (I - A)^T diag(1/D) (I - A)
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                aki = (1.0 if k == i else 0.0) - A[k, i]
                akj = (1.0 if k == j else 0.0) - A[k, j]
                s += aki * akj / D[k]
            B[i, j] = s


@njit(cache=True)
def cholesky(M, k, L):
    for i in range(k):
        for j in range(i + 1):
            s = M[i, j]
            for q in range(j):
                s -= L[i, q] * L[j, q]
            if i == j:
                if not (s > 0.0):
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
        for j in range(i + 1, k):
            L[i, j] = 0.0
    return True


@njit(cache=True)
def chol_solve(L, k, b, x):
    """Solve (L L^T) x = b."""
    for i in range(k):
        s = b[i]
        for q in range(i):
            s -= L[i, q] * x[q]
        x[i] = s / L[i, i]
    for i in range(k - 1, -1, -1):
        s = x[i]
        for q in range(i + 1, k):
            s -= L[q, i] * x[q]
        x[i] = s / L[i, i]


@njit(cache=True)
def back_noise(L, k, z, out):
    """out = L^{-T} z, a draw with covariance (L L^T)^{-1}."""
    for i in range(k - 1, -1, -1):
        s = z[i]
        for q in range(i + 1, k):
            s -= L[q, i] * out[q]
        out[i] = s / L[i, i]


@njit(cache=True)
def marginal(y, S, nobs, oidx, m0, T, want_stats, H, g):
    """Log likelihood of the observed effects with latents integrated out.

    With ``want_stats`` also accumulates H = sum S_i' V_i^-1 S_i and
    g = sum S_i' V_i^-1 y_i for the location update. Returns -inf when a
    marginal covariance is not positive definite.
    """
    n = y.shape[0]
    V = np.empty((3, 3))
    L = np.empty((3, 3))
    r = np.empty(3)
    x = np.empty(3)
    e = np.empty(3)
    col = np.empty(3)
    ll = 0.0
    if want_stats:
        H[:, :] = 0.0
        g[:] = 0.0
    for i in range(n):
        k = nobs[i]
        for a in range(k):
            ia = oidx[i, a]
            r[a] = y[i, ia] - m0[ia]
            for b in range(k):
                ib = oidx[i, b]
                V[a, b] = T[ia, ib] + S[i, ia, ib]
        if not cholesky(V, k, L):
            return -np.inf
        chol_solve(L, k, r, x)
        q = 0.0
        for a in range(k):
            q += r[a] * x[a]
            ll -= math.log(L[a, a])
        ll -= 0.5 * q
        if want_stats:
            # V^-1 y and the columns of V^-1
            for a in range(k):
                e[a] = y[i, oidx[i, a]]
            chol_solve(L, k, e, x)
            for a in range(k):
                g[oidx[i, a]] += x[a]
            for b in range(k):
                for a in range(k):
                    e[a] = 1.0 if a == b else 0.0
                chol_solve(L, k, e, col)
                for a in range(k):
                    H[oidx[i, a], oidx[i, b]] += col[a]
    return ll


@njit(cache=True)
def log_prior(p, mh_slot, mh_kind, mh_lo, mh_hi, tau_var):
    """Log prior of the scale parameters on the transformed (sampling) scale."""
    lp = 0.0
    for j in range(mh_slot.shape[0]):
        v = p[mh_slot[j]]
        if mh_kind[j] == LOG:
            if not (v > 0.0):
                return -np.inf
            lp += -0.5 * v * v / tau_var + math.log(v)
        else:
            u = (v - mh_lo[j]) / (mh_hi[j] - mh_lo[j])
            if not (0.0 < u < 1.0):
                return -np.inf
            lp += math.log(u) + math.log(1.0 - u)
    return lp


@njit(cache=True)
def to_unconstrained(v, kind, lo, hi):
    if kind == LOG:
        return math.log(v)
    u = (v - lo) / (hi - lo)
    return math.log(u) - math.log(1.0 - u)


@njit(cache=True)
def from_unconstrained(z, kind, lo, hi):
    if kind == LOG:
        return math.exp(z)
    if z >= 0:
        u = 1.0 / (1.0 + math.exp(-z))
    else:
        ez = math.exp(z)
        u = ez / (1.0 + ez)
    return lo + (hi - lo) * u


@njit(cache=True)
def log_target(p, code, d, y, S, nobs, oidx, mh_slot, mh_kind, mh_lo, mh_hi, tau_var,
               A, c, D, G, m0, T, B, H, g):
    lp = log_prior(p, mh_slot, mh_kind, mh_lo, mh_hi, tau_var)
    if lp == -np.inf:
        return -np.inf
    if not coefficients(p, code, A, c, D):
        return -np.inf
    moments(A, c, D, d, G, m0, T, B)
    return lp + marginal(y, S, nobs, oidx, m0, T, False, H, g)


@njit(cache=True, nogil=True)
def run_block(code, d, y, obs, S, W, Wy, nobs, oidx, imp, K, Lc,
              mh_slot, mh_kind, mh_lo, mh_hi, tau_var, loc_var,
              upd_scales, upd_locs,
              p, mu, yimp, scale, acc_batch, acc_total, counters,
              t_start, t_end, burn, thin, adapt_end,
              normals, unifs, p_out, mu_out, yimp_out, status):
    n = y.shape[0]
    n_mh = mh_slot.shape[0]
    A = np.zeros((3, 3))
    c = np.zeros(3)
    D = np.ones(3)
    G = np.zeros((3, 3))
    m0 = np.zeros(3)
    T = np.zeros((3, 3))
    B = np.zeros((3, 3))
    H = np.zeros((3, 3))
    g = np.zeros(3)
    P = np.zeros((3, 3))
    L = np.zeros((3, 3))
    bvec = np.zeros(3)
    mean = np.zeros(3)
    noise = np.zeros(3)
    z3 = np.zeros(3)
    prop = p.copy()
    off_beta = n_mh
    off_slope = n_mh + 3
    off_mu = n_mh + 6
    off_imp = off_mu + n * d

    for t in range(t_start, t_end):
        row = t - t_start
        # 1. scale parameters
        if upd_scales:
            cur = log_target(p, code, d, y, S, nobs, oidx, mh_slot, mh_kind, mh_lo, mh_hi, tau_var,
                             A, c, D, G, m0, T, B, H, g)
            for j in range(n_mh):
                s = mh_slot[j]
                for q in range(12):
                    prop[q] = p[q]
                zc = to_unconstrained(p[s], mh_kind[j], mh_lo[j], mh_hi[j])
                prop[s] = from_unconstrained(zc + scale[j] * normals[row, j], mh_kind[j], mh_lo[j], mh_hi[j])
                new = log_target(prop, code, d, y, S, nobs, oidx, mh_slot, mh_kind, mh_lo, mh_hi, tau_var,
                                 A, c, D, G, m0, T, B, H, g)
                accepted = 0
                if new > -np.inf and math.log(unifs[row, j]) < new - cur:
                    p[s] = prop[s]
                    cur = new
                    accepted = 1
                if t < adapt_end:
                    acc_batch[j] += accepted
                else:
                    acc_total[j] += accepted
            if t < adapt_end and (t + 1) % BATCH == 0:
                nb = (t + 1) // BATCH
                delta = min(0.5, 1.0 / math.sqrt(nb))
                for j in range(n_mh):
                    rate = acc_batch[j] / BATCH
                    if rate < 0.2:
                        scale[j] *= math.exp(-delta)
                    elif rate > 0.5:
                        scale[j] *= math.exp(delta)
                    acc_batch[j] = 0
            if t >= adapt_end:
                counters[0] += 1

        coefficients(p, code, A, c, D)
        moments(A, c, D, d, G, m0, T, B)

        # 2. locations, latents integrated out
        if upd_locs:
            marginal(y, S, nobs, oidx, m0, T, True, H, g)
            # Q = I/loc_var + G' H G ; h = G' g
            for a in range(d):
                s = 0.0
                for k in range(d):
                    s += G[k, a] * g[k]
                bvec[a] = s
                for b in range(d):
                    s = 0.0
                    for k in range(d):
                        for l in range(d):
                            s += G[k, a] * H[k, l] * G[l, b]
                    P[a, b] = s + (1.0 / loc_var if a == b else 0.0)
            if not cholesky(P, d, L):
                status[0] = 2
                status[1] = t
                return
            chol_solve(L, d, bvec, mean)
            for a in range(d):
                z3[a] = normals[row, off_beta + a]
            back_noise(L, d, z3, noise)
            for a in range(d):
                p[a] = mean[a] + noise[a]
            coefficients(p, code, A, c, D)
            moments(A, c, D, d, G, m0, T, B)

        # 3. latent effects
        for a in range(d):
            s = 0.0
            for b in range(d):
                s += B[a, b] * m0[b]
            mean[a] = s
        for i in range(n):
            for a in range(d):
                bvec[a] = Wy[i, a] + mean[a]
                for b in range(d):
                    P[a, b] = W[i, a, b] + B[a, b]
            if not cholesky(P, d, L):
                status[0] = 2
                status[1] = t
                return
            chol_solve(L, d, bvec, z3)
            for a in range(d):
                mu[i, a] = z3[a]
                bvec[a] = normals[row, off_mu + i * d + a]
            back_noise(L, d, bvec, noise)
            for a in range(d):
                mu[i, a] += noise[a]

        # 4. alt structure: regression of mu3 on (mu1, mu2)
        if code == ALT and upd_locs:
            ip = 1.0 / (p[11] * p[11])
            for a in range(3):
                bvec[a] = 0.0
                for b in range(3):
                    P[a, b] = 1.0 / loc_var if a == b else 0.0
            xs = np.empty(3)
            for i in range(n):
                xs[0], xs[1], xs[2] = 1.0, mu[i, 0], mu[i, 1]
                for a in range(3):
                    bvec[a] += xs[a] * mu[i, 2] * ip
                    for b in range(3):
                        P[a, b] += xs[a] * xs[b] * ip
            if not cholesky(P, 3, L):
                status[0] = 2
                status[1] = t
                return
            chol_solve(L, 3, bvec, mean)
            for a in range(3):
                z3[a] = normals[row, off_slope + a]
            back_noise(L, 3, z3, noise)
            p[2] = mean[0] + noise[0]
            p[3] = mean[1] + noise[1]
            p[4] = mean[2] + noise[2]

        # 5. imputation of masked observations
        for i in range(n):
            for a in range(d):
                if imp[i, a]:
                    s = mu[i, a]
                    for b in range(d):
                        if obs[i, b]:
                            s += K[i, a, b] * (y[i, b] - mu[i, b])
                        if imp[i, b]:
                            s += Lc[i, a, b] * normals[row, off_imp + i * d + b]
                    yimp[i, a] = s
                else:
                    yimp[i, a] = np.nan

        bad = False
        for q in range(12):
            if not math.isfinite(p[q]):
                bad = True
        for i in range(n):
            for a in range(d):
                if not math.isfinite(mu[i, a]):
                    bad = True
        if bad:
            status[0] = 1
            status[1] = t
            return

        if t >= burn and (t - burn) % thin == 0:
            k = (t - burn) // thin
            for q in range(12):
                p_out[k, q] = p[q]
            for i in range(n):
                for a in range(d):
                    mu_out[k, i, a] = mu[i, a]
                    yimp_out[k, i, a] = yimp[i, a]
