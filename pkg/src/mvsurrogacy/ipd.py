"""Within-study correlations from individual patient data by bootstrap."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._rng import stream
from .data import IpdRecord, WithinCorrelations, compute_log_or

log = logging.getLogger(__name__)

MAX_DISCARD = 0.05


class NonIdentifiable(ValueError):
    pass


class NewtonDivergence(RuntimeError):
    def __init__(self, message: str, trace: list[tuple[float, float]]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class BootstrapConfig:
    n_resamples: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.n_resamples < 2:
            raise ValueError("n_resamples must be at least 2")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class _Arrays:
    arm: np.ndarray
    responder: np.ndarray
    pfs_time: np.ndarray
    pfs_event: np.ndarray
    os_time: np.ndarray
    os_event: np.ndarray


def _arrays(ipd: Sequence[IpdRecord]) -> _Arrays:
    def col(attr, default):
        return np.array([default if getattr(r, attr) is None else getattr(r, attr) for r in ipd], dtype=float)

    return _Arrays(
        arm=np.array([r.arm for r in ipd], dtype=np.int64),
        responder=col("responder", np.nan),
        pfs_time=col("pfs_time", np.nan),
        pfs_event=col("pfs_event", np.nan),
        os_time=col("os_time", np.nan),
        os_event=col("os_event", np.nan),
    )


def _risk_table(time: np.ndarray, event: np.ndarray, arm: np.ndarray):
    """Per distinct event time: events in arm 1, all events, at-risk counts per arm."""
    ev = event > 0
    if not ev.any():
        raise NonIdentifiable("no events")
    for a in (0, 1):
        if not (ev & (arm == a)).any():
            raise NonIdentifiable(f"non-identifiable: no events in arm {a}")
    u, inv = np.unique(time[ev], return_inverse=True)
    d_all = np.bincount(inv, minlength=len(u)).astype(float)
    d_1 = np.bincount(inv, weights=(arm[ev] == 1).astype(float), minlength=len(u))
    t0 = np.sort(time[arm == 0])
    t1 = np.sort(time[arm == 1])
    r0 = (len(t0) - np.searchsorted(t0, u, side="left")).astype(float)
    r1 = (len(t1) - np.searchsorted(t1, u, side="left")).astype(float)
    return d_1, d_all, r0, r1


def _cox_binary(time, event, arm, tol=1e-8, max_iter=50) -> float:
    """Newton-Raphson on the Breslow partial likelihood with one 0/1 covariate."""
    d1, d, r0, r1 = _risk_table(time, event, arm)

    def score(beta):
        e = np.exp(beta)
        denom = r0 + r1 * e
        p = r1 * e / denom
        ll = float(np.sum(d1 * beta - d * np.log(denom)))
        return ll, float(np.sum(d1 - d * p)), float(np.sum(d * p * (1 - p)))

    # The score decreases in beta; a finite maximum needs it positive as
    # beta -> -inf and negative as beta -> +inf. Otherwise the likelihood is
    # monotone and Newton would just creep off until the score underflows.
    finite = np.sum(d1 - d * (r0 == 0)) > 0 and np.sum(d1 - d * (r1 > 0)) < 0

    beta = 0.0
    ll, grad, info = score(beta)
    trace = [(beta, grad)]
    for _ in range(max_iter):
        if abs(grad) < tol:
            if not finite:
                raise NewtonDivergence(f"monotone partial likelihood, no finite estimate (beta={beta:.3g})", trace)
            return beta
        if info <= 0:
            raise NewtonDivergence("partial likelihood information vanished", trace)
        step = grad / info
        new = beta + step
        new_ll, new_grad, new_info = score(new)
        halvings = 0
        # halve only on a decrease that exceeds round-off in the log likelihood
        while new_ll < ll - 1e-12 * (1 + abs(ll)) and halvings < 30:
            step /= 2
            new = beta + step
            new_ll, new_grad, new_info = score(new)
            halvings += 1
        beta, ll, grad, info = new, new_ll, new_grad, new_info
        trace.append((beta, grad))
        if abs(beta) > 30:
            raise NewtonDivergence(f"Newton iterates diverged (beta={beta:.3g})", trace)
    if abs(grad) < tol and finite:
        return beta
    raise NewtonDivergence(f"no convergence in {max_iter} iterations (gradient {grad:.3g})", trace)


def fit_log_hr(ipd: Sequence[IpdRecord], endpoint: str) -> float:
    """Log hazard ratio (experimental vs control) from a Cox model with a
    single arm covariate, Breslow ties."""
    endpoint = endpoint.lower()
    if endpoint not in ("pfs", "os"):
        raise ValueError("endpoint must be 'pfs' or 'os'")
    a = _arrays(ipd)
    time, event = getattr(a, f"{endpoint}_time"), getattr(a, f"{endpoint}_event")
    keep = ~np.isnan(time)
    return _cox_binary(time[keep], event[keep], a.arm[keep])


def _log_or(responder: np.ndarray, arm: np.ndarray) -> float:
    if np.isnan(responder).any():
        raise ValueError("responder status missing")
    r, g = responder, arm
    n_t, n_c = int((g == 1).sum()), int((g == 0).sum())
    r_t, r_c = int(r[g == 1].sum()), int(r[g == 0].sum())
    return compute_log_or(r_t, n_t, r_c, n_c)[0]


def fit_log_or_ipd(ipd: Sequence[IpdRecord]) -> float:
    """Log odds ratio of response from the aggregated 2x2 table."""
    a = _arrays(ipd)
    return _log_or(a.responder, a.arm)


@dataclass
class BootstrapResult:
    correlations: WithinCorrelations
    n_used: int
    n_failed: int
    statistics: np.ndarray  # (n_used, 3): log OR, log HR PFS, log HR OS


def _resample_stats(a: _Arrays, idx: np.ndarray) -> tuple[float, float, float]:
    arm = a.arm[idx]
    return (
        _log_or(a.responder[idx], arm),
        _cox_binary(a.pfs_time[idx], a.pfs_event[idx], arm),
        _cox_binary(a.os_time[idx], a.os_event[idx], arm),
    )


def bootstrap_effects(ipd: Sequence[IpdRecord], cfg: BootstrapConfig) -> BootstrapResult:
    """Stratified (by arm) bootstrap of the three treatment-effect estimates."""
    a = _arrays(ipd)
    for name in ("responder", "pfs_time", "os_time"):
        if np.isnan(getattr(a, name)).any():
            raise ValueError(f"{name} missing for some patients; all three outcomes are required")
    arms = [np.flatnonzero(a.arm == g) for g in (0, 1)]
    if any(len(ix) == 0 for ix in arms):
        raise ValueError("both arms need patients")
    rows, failed = [], 0
    for b in range(cfg.n_resamples):
        rng = stream(cfg.seed, "bootstrap", b)
        idx = np.concatenate([ix[rng.integers(0, len(ix), size=len(ix))] for ix in arms])
        try:
            rows.append(_resample_stats(a, idx))
        except (ValueError, NewtonDivergence):
            failed += 1
    if failed > MAX_DISCARD * cfg.n_resamples:
        raise RuntimeError(f"{failed} of {cfg.n_resamples} resamples failed (limit {MAX_DISCARD:.0%})")
    if len(rows) < 2:
        raise RuntimeError("fewer than 2 successful resamples")
    if failed:
        log.warning("discarded %d failed resamples", failed)
    stats = np.array(rows)
    r = np.corrcoef(stats, rowvar=False)
    r = np.clip(np.nan_to_num(r, nan=0.0), -1.0, 1.0)
    return BootstrapResult(WithinCorrelations(rho_12=float(r[0, 1]), rho_13=float(r[0, 2]),
                                              rho_23=float(r[1, 2])),
                           len(rows), failed, stats)


def estimate_within_correlations(ipd: Sequence[IpdRecord], cfg: BootstrapConfig) -> WithinCorrelations:
    """Pearson correlations of (log OR TR, log HR PFS, log HR OS) across
    stratified bootstrap resamples of patients."""
    return bootstrap_effects(ipd, cfg).correlations
