import numpy as np
import pytest

from mvsurrogacy.data import StudyEffects, TherapyClass


def study(sid, effect, var, cls=TherapyClass.SystemicChemo, crossover=None):
    return StudyEffects(sid, cls, tuple(effect), tuple(var), crossover)


def gaussian_posterior(y_obs, S_obs, obs_idx, m0, T):
    """Closed-form N(mu | m0, T) x N(y_obs | mu[obs_idx], S_obs) posterior."""
    d = len(m0)
    P = np.zeros((d, d))
    h = np.linalg.solve(T, m0)
    if len(obs_idx):
        Sinv = np.linalg.inv(S_obs)
        P[np.ix_(obs_idx, obs_idx)] += Sinv
        h[obs_idx] += Sinv @ y_obs
    cov = np.linalg.inv(np.linalg.inv(T) + P)
    return cov @ h, cov


@pytest.fixture
def five_studies():
    rng = np.random.default_rng(11)
    out = []
    for i in range(5):
        eff = rng.normal([0.1, -0.2, -0.1], [0.4, 0.2, 0.1])
        var = rng.uniform(0.01, 0.05, 3)
        if i == 3:
            eff[2], var[2] = np.nan, np.nan
        out.append(study(f"T{i}", [None if np.isnan(e) else float(e) for e in eff],
                         [None if np.isnan(v) else float(v) for v in var]))
    return out


def simulate_ipd(n, seed, identical_times=False):
    """Two-arm trial with responder status, PFS and OS drawn independently."""
    from mvsurrogacy.data import IpdRecord

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        arm = i % 2
        resp = bool(rng.random() < 0.3 + 0.1 * arm)
        pfs = float(rng.exponential(6 * (1 + 0.3 * arm)))
        pev = bool(rng.random() < 0.9)
        os_, oev = (pfs, pev) if identical_times else (float(rng.exponential(15 * (1 + 0.2 * arm))),
                                                        bool(rng.random() < 0.8))
        out.append(IpdRecord(str(i), arm, resp, pfs, pev, os_, oev))
    return out
