"""Numeric convergence checks: split R-hat, effective sample size and
autocorrelation of stored draws."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .sampler import PosteriorChains

RHAT_MAX = 1.05
ESS_MIN = 400.0
LAGS = (1, 5, 10, 50)
MIN_DRAWS = 100
DERIVED_TRACKED = ("lambda21", "lambda32", "psi2_sq", "psi3_sq")


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of a 1-D series at all lags (biased, FFT-based)."""
    n = len(x)
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / n


def autocorr(x: np.ndarray, lags=LAGS) -> dict[int, float]:
    """Lag-k autocorrelations of one series averaged over chains.

    ``x`` is (chains, draws). Lags beyond the series length are NaN.
    """
    x = np.atleast_2d(x)
    n = x.shape[1]
    rows = []
    for chain in x:
        ac = _autocov(chain)
        rows.append(ac / ac[0] if ac[0] > 0 else np.zeros_like(ac))
    mean = np.mean(rows, axis=0)
    return {k: float(mean[k]) if k < n else float("nan") for k in lags}


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, -half:]], axis=0)


def rhat(x: np.ndarray) -> float:
    """Split potential scale reduction for a (chains, draws) array.

    Values below 1 arise only from sampling noise in the between-chain
    variance and are reported as 1.
    """
    s = _split(np.atleast_2d(np.asarray(x, dtype=float)))
    m, n = s.shape
    w = s.var(axis=1, ddof=1).mean()
    b = n * s.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(max(1.0, np.sqrt(var_plus / w)))


def ess(x: np.ndarray) -> float:
    """Effective sample size with Geyer's initial monotone sequence,
    pooled over split chains and capped at the number of draws."""
    s = _split(np.atleast_2d(np.asarray(x, dtype=float)))
    m, n = s.shape
    total = float(np.asarray(x).size)
    if n < 4:
        return total
    acov = np.array([_autocov(c) for c in s])
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    if w == 0:
        return total
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += s.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum adjacent pairs while positive, then enforce monotone decrease
    pairs = []
    t = 0
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p <= 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(min(m * n / tau, total))


@dataclass
class ParamDiagnostics:
    rhat: float | None
    ess: float
    autocorr: dict[int, float]
    degenerate: bool = False


@dataclass
class DiagnosticsReport:
    params: dict[str, ParamDiagnostics]
    acceptance: dict[str, list[float]]
    flags: list[str]
    warnings: list[str] = field(default_factory=list)
    n_chains: int = 0
    n_draws: int = 0
    rhat_max: float = RHAT_MAX
    ess_min: float = ESS_MIN

    @property
    def passed(self) -> bool:
        return not any(not f.endswith(": degenerate") for f in self.flags)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "thresholds": {"rhat_max": self.rhat_max, "ess_min": self.ess_min},
            "flags": list(self.flags),
            "warnings": list(self.warnings),
            "acceptance": self.acceptance,
            "params": {
                name: {
                    "rhat": p.rhat,
                    "ess": p.ess,
                    "autocorr": {str(k): None if np.isnan(v) else v for k, v in p.autocorr.items()},
                    "degenerate": p.degenerate,
                }
                for name, p in self.params.items()
            },
        }


def tracked(chains: PosteriorChains, latents: bool = False) -> dict[str, np.ndarray]:
    """Scalars assessed by default: free hyperparameters and the main
    derived slopes/conditional variances; optionally every latent effect."""
    out = {name: chains.draws(name) for name in chains.spec.free_params()}
    der = chains.derived()
    for name in DERIVED_TRACKED:
        # skip structural zeros such as lambda21 under the alternative structure
        if name in der and name not in out and np.ptp(der[name]) > 0:
            out[name] = np.broadcast_to(der[name], chains.params.shape[:2])
    if latents:
        for i, sid in enumerate(chains.study_ids):
            for j, k in enumerate(chains.spec.outcomes):
                out[f"mu[{sid}][{k.name}]"] = chains.mu[:, :, i, j]
    return out


def assess_draws(draws: dict[str, np.ndarray], acceptance: dict[str, list[float]] | None = None,
                 rhat_max: float = RHAT_MAX, ess_min: float = ESS_MIN) -> DiagnosticsReport:
    """Diagnostics for named (chains, draws) arrays."""
    shapes = {np.atleast_2d(v).shape for v in draws.values()}
    if len(shapes) != 1:
        raise ValueError("all parameters need the same (chains, draws) shape")
    n_chains, n_draws = shapes.pop()
    if n_draws < MIN_DRAWS:
        raise ValueError(f"at least {MIN_DRAWS} retained draws per chain are needed, got {n_draws}")
    notes = []
    if n_chains < 2:
        notes.append("single chain: R-hat unavailable")
        warnings.warn(notes[-1], stacklevel=2)
    params, flags = {}, []
    for name, x in draws.items():
        x = np.atleast_2d(np.asarray(x, dtype=float))
        degenerate = bool(np.ptp(x) == 0)
        if degenerate:
            r = 1.0 if n_chains > 1 else None
            e = float(x.size)
            ac = {k: float("nan") for k in LAGS}
            flags.append(f"{name}: degenerate")
        else:
            r = rhat(x) if n_chains > 1 else None
            e = ess(x)
            ac = autocorr(x)
            if r is not None and r > rhat_max:
                flags.append(f"{name}: rhat {r:.3f} > {rhat_max}")
            if e < ess_min:
                flags.append(f"{name}: ess {e:.0f} < {ess_min:.0f}")
        params[name] = ParamDiagnostics(r, e, ac, degenerate)
    return DiagnosticsReport(params, dict(acceptance or {}), flags, notes, n_chains, n_draws, rhat_max, ess_min)


def assess(chains: PosteriorChains, latents: bool = False, rhat_max: float = RHAT_MAX,
           ess_min: float = ESS_MIN) -> DiagnosticsReport:
    """Split R-hat, ESS and autocorrelations for the tracked scalars,
    flagging R-hat above ``rhat_max`` and ESS below ``ess_min``."""
    return assess_draws(tracked(chains, latents), chains.acceptance, rhat_max, ess_min)
