"""Fitting the bivariate/trivariate random-effects model by MCMC."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernel
from ._rng import derive_seed, stream
from .data import OutcomeKind, StudyEffects, WithinCorrelations, covariance_over
from .model import (
    ALT, SLOT, SLOTS, HyperParams, McmcConfig, ModelSpec,
    between_cov, chain_coefficients, spec_from_dict, spec_to_dict,
)

BLOCK = 2000
INIT_SCALE = 0.5
TAU_FLOOR = 0.01

Mask = Mapping[str, Sequence[OutcomeKind]]


@dataclass
class _Prepared:
    """Model-ready arrays, studies sorted by study_id."""

    study_ids: tuple[str, ...]
    y: np.ndarray       # (n, d), 0 where unobserved
    obs: np.ndarray     # (n, d) bool
    S: np.ndarray       # within covariance over observed coordinates, embedded
    W: np.ndarray       # its inverse, embedded
    Wy: np.ndarray
    nobs: np.ndarray
    oidx: np.ndarray
    imp: np.ndarray     # masked coordinates with a known variance
    K: np.ndarray
    Lc: np.ndarray


def _prepare(data: Sequence[StudyEffects], rho_w: WithinCorrelations, spec: ModelSpec,
             mask: Mask | None) -> _Prepared:
    mask = {k: set(v) for k, v in (mask or {}).items()}
    unknown = set(mask) - {s.study_id for s in data}
    if unknown:
        raise ValueError(f"mask refers to unknown studies {sorted(unknown)}")
    kinds = spec.outcomes
    d = len(kinds)
    rows = []
    for s in sorted(data, key=lambda s: s.study_id):
        hidden = mask.get(s.study_id, set())
        obs = [s.has(k) and k not in hidden for k in kinds]
        imp = [s.has(k) and k in hidden for k in kinds]
        if any(obs) or any(imp):
            rows.append((s, obs, imp))
    if len(rows) < 3:
        raise ValueError(f"at least 3 studies reporting the modelled outcomes are needed, got {len(rows)}")
    for j, k in enumerate(kinds):
        if not any(r[1][j] for r in rows):
            raise ValueError(f"outcome never observed: {k.name}")

    n = len(rows)
    y = np.zeros((n, d))
    obs = np.zeros((n, d), dtype=np.bool_)
    imp = np.zeros((n, d), dtype=np.bool_)
    S = np.zeros((n, d, d))
    W = np.zeros((n, d, d))
    Wy = np.zeros((n, d))
    nobs = np.zeros(n, dtype=np.int64)
    oidx = np.zeros((n, d), dtype=np.int64)
    K = np.zeros((n, d, d))
    Lc = np.zeros((n, d, d))
    for i, (s, o, m) in enumerate(rows):
        known = [j for j in range(d) if o[j] or m[j]]
        full = covariance_over(s, [kinds[j] for j in known], rho_w)
        pos = {j: a for a, j in enumerate(known)}
        oi = [j for j in range(d) if o[j]]
        mi = [j for j in range(d) if m[j]]
        obs[i] = o
        imp[i] = m
        nobs[i] = len(oi)
        oidx[i, : len(oi)] = oi
        for j in oi:
            y[i, j] = s.effect[kinds[j]]
        if oi:
            so = full[np.ix_([pos[j] for j in oi], [pos[j] for j in oi])]
            wo = np.linalg.inv(so)
            S[i][np.ix_(oi, oi)] = so
            W[i][np.ix_(oi, oi)] = wo
            Wy[i] = W[i] @ y[i]
        if mi:
            smm = full[np.ix_([pos[j] for j in mi], [pos[j] for j in mi])]
            if oi:
                smo = full[np.ix_([pos[j] for j in mi], [pos[j] for j in oi])]
                so = full[np.ix_([pos[j] for j in oi], [pos[j] for j in oi])]
                k_mo = smo @ np.linalg.inv(so)
                cond = smm - k_mo @ smo.T
                K[i][np.ix_(mi, oi)] = k_mo
            else:
                cond = smm
            Lc[i][np.ix_(mi, mi)] = np.linalg.cholesky(0.5 * (cond + cond.T))
    return _Prepared(tuple(r[0].study_id for r in rows), y, obs, S, W, Wy, nobs, oidx, imp, K, Lc)


@dataclass
class InitialState:
    theta: HyperParams
    latents: np.ndarray
    ls_slopes: dict[str, float]


def _ls(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if len(x) < 2 or np.ptp(x) == 0:
        return float(np.mean(y)) if len(y) else 0.0, 0.0
    slope, intercept = np.polyfit(x, y, 1)
    return float(intercept), float(slope)


def _initialize(prep: _Prepared, spec: ModelSpec, seed: int, chain: int) -> InitialState:
    d = spec.dim
    y, obs = prep.y, prep.obs
    means = np.array([y[obs[:, k], k].mean() for k in range(d)])
    sds = np.array([y[obs[:, k], k].std(ddof=1) if obs[:, k].sum() > 1 else 0.0 for k in range(d)])
    taus = np.maximum(sds, TAU_FLOOR)

    ls: dict[str, float] = {}
    both = obs[:, 0] & obs[:, 1]
    ls["lambda21"] = _ls(y[both, 0], y[both, 1])[1]
    if d == 3:
        both = obs[:, 1] & obs[:, 2]
        ls["lambda32"] = _ls(y[both, 1], y[both, 2])[1]
        allp = obs.all(axis=1)
        if allp.sum() >= 3:
            X = np.column_stack([np.ones(allp.sum()), y[allp, 0], y[allp, 1]])
            coef, *_ = np.linalg.lstsq(X, y[allp, 2], rcond=None)
            resid = y[allp, 2] - X @ coef
            ls["alt_lambda31"], ls["alt_lambda32"] = float(coef[1]), float(coef[2])
            ls["alt_resid_sd"] = float(resid.std(ddof=min(3, len(resid) - 1))) if len(resid) > 3 else 0.0
        else:
            ls["alt_lambda31"], ls["alt_lambda32"], ls["alt_resid_sd"] = 0.0, ls["lambda32"], 0.0

    vals = HyperParams().as_dict()
    vals["tau1"], vals["tau2"] = float(taus[0]), float(taus[1])
    if d == 3:
        vals["tau3"] = float(taus[2])
    for name in ("rho12", "rho13", "rho23"):
        if name in spec.free_params():
            lo, hi = spec.rho_support(name)
            vals[name] = 0.5 * (lo + hi)
    if spec.code == ALT:
        vals["lambda31"], vals["lambda32"] = ls["alt_lambda31"], ls["alt_lambda32"]
        vals["psi3"] = max(ls["alt_resid_sd"], TAU_FLOOR)

    rng = stream(seed, "init", chain)
    jit = rng.uniform(-0.2, 0.2, size=len(SLOTS))
    if chain > 0:
        for name in spec.free_params():
            u = jit[SLOT[name]]
            if name.startswith("rho"):
                lo, hi = spec.rho_support(name)
                vals[name] = lo + (hi - lo) * 0.5 * (1 + u)
            elif name not in spec.location_params():
                vals[name] *= 1 + u
    vals["eta1"] = float(means[0])
    if chain > 0:
        vals["eta1"] *= 1 + jit[SLOT["eta1"]]
    c = chain_coefficients(HyperParams(**vals), spec)
    vals["lambda20"] = float(means[1] - c["lambda21"] * means[0])
    if d == 3:
        vals["lambda30"] = float(means[2] - c["lambda31"] * means[0] - c["lambda32"] * means[1])
    if chain > 0:
        for name in ("lambda20", "lambda30")[: d - 1]:
            vals[name] *= 1 + jit[SLOT[name]]

    latents = np.where(obs, y, means[None, :])
    return InitialState(HyperParams(**vals), latents, ls)


def initialize(data: Sequence[StudyEffects], spec: ModelSpec, seed: int, chain: int = 0,
               rho_w: WithinCorrelations | None = None, mask: Mask | None = None) -> InitialState:
    """Starting values: sample means, observed between-study SDs (floored),
    correlations at support midpoints; chains after the first are jittered."""
    prep = _prepare(data, rho_w or WithinCorrelations.zero(), spec, mask)
    return _initialize(prep, spec, seed, chain)


@dataclass
class PosteriorChains:
    """Retained draws of all chains.

    ``params`` has shape (chains, draws, 12) in ``model.SLOTS`` order;
    ``mu`` and ``y_imputed`` have shape (chains, draws, studies, dim).
    """

    spec: ModelSpec
    config: McmcConfig
    study_ids: tuple[str, ...]
    params: np.ndarray
    mu: np.ndarray
    y_imputed: np.ndarray
    imputed: np.ndarray
    acceptance: dict[str, list[float]]
    seeds: list[int]
    masked: dict[str, list[str]] = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.params.shape[0]

    @property
    def n_draws(self) -> int:
        return self.params.shape[1]

    def slots(self) -> dict[str, np.ndarray]:
        return {name: self.params[..., i] for i, name in enumerate(SLOTS)}

    def derived(self) -> dict[str, np.ndarray]:
        return chain_coefficients(self.slots(), self.spec)

    def draws(self, name: str) -> np.ndarray:
        """(chains, draws) array for a free or derived parameter."""
        if name in self.spec.free_params():
            return self.params[..., SLOT[name]]
        der = self.derived()
        if name not in der:
            raise KeyError(f"{name} is not defined for {self.spec.label}")
        return np.broadcast_to(der[name], self.params.shape[:2])

    def study_index(self, study_id: str) -> int:
        try:
            return self.study_ids.index(study_id)
        except ValueError:
            raise KeyError(study_id) from None

    def latent(self, study_id: str, kind: OutcomeKind) -> np.ndarray:
        return self.mu[:, :, self.study_index(study_id), self.spec.outcomes.index(kind)]

    def imputed_draws(self, study_id: str, kind: OutcomeKind) -> np.ndarray:
        return self.y_imputed[:, :, self.study_index(study_id), self.spec.outcomes.index(kind)]

    def columns(self) -> list[str]:
        cols = list(self.spec.free_params())
        kinds = self.spec.outcomes
        cols += [f"mu[{sid}][{k.name}]" for sid in self.study_ids for k in kinds]
        cols += [f"y[{sid}][{k.name}]" for i, sid in enumerate(self.study_ids)
                 for j, k in enumerate(kinds) if self.imputed[i, j]]
        return cols

    def table(self, chain: int) -> np.ndarray:
        free = [SLOT[p] for p in self.spec.free_params()]
        parts = [self.params[chain][:, free], self.mu[chain].reshape(self.n_draws, -1)]
        ii, jj = np.nonzero(self.imputed)
        parts.append(self.y_imputed[chain][:, ii, jj])
        return np.concatenate(parts, axis=1)


def _mh_layout(spec: ModelSpec, frozen: bool):
    names = [] if frozen else list(spec.scale_params())
    slot = np.array([SLOT[n] for n in names], dtype=np.int64)
    kind = np.array([_kernel.LOGIT if n.startswith("rho") else _kernel.LOG for n in names], dtype=np.int64)
    lo = np.array([spec.rho_support(n)[0] if n.startswith("rho") else 0.0 for n in names])
    hi = np.array([spec.rho_support(n)[1] if n.startswith("rho") else 0.0 for n in names])
    return names, slot, kind, lo, hi


def _run_chain(prep: _Prepared, spec: ModelSpec, cfg: McmcConfig, chain: int, seed: int,
               init: HyperParams | None):
    n, d = prep.y.shape
    start = _initialize(prep, spec, cfg.seed, chain)
    theta = init if init is not None else start.theta
    p = theta.to_vector()
    mu = start.latents.copy()
    yimp = np.full((n, d), np.nan)
    names, mh_slot, mh_kind, mh_lo, mh_hi = _mh_layout(spec, "scales" in cfg.freeze)
    n_mh = len(names)
    scale = np.full(n_mh, INIT_SCALE)
    acc_batch = np.zeros(n_mh, dtype=np.int64)
    acc_total = np.zeros(n_mh, dtype=np.int64)
    counters = np.zeros(1, dtype=np.int64)
    status = np.zeros(2, dtype=np.int64)
    keep = cfg.n_retained
    p_out = np.empty((keep, len(SLOTS)))
    mu_out = np.empty((keep, n, d))
    y_out = np.empty((keep, n, d))
    n_norm = n_mh + 6 + 2 * n * d
    rng = stream(seed, "sweep")
    for t0 in range(0, cfg.iterations, BLOCK):
        t1 = min(cfg.iterations, t0 + BLOCK)
        normals = rng.standard_normal((t1 - t0, n_norm))
        unifs = rng.random((t1 - t0, max(n_mh, 1)))
        _kernel.run_block(
            spec.code, d, prep.y, prep.obs, prep.S, prep.W, prep.Wy, prep.nobs, prep.oidx,
            prep.imp, prep.K, prep.Lc,
            mh_slot, mh_kind, mh_lo, mh_hi, spec.prior.tau_variance, spec.prior.location_variance,
            "scales" not in cfg.freeze, "locations" not in cfg.freeze,
            p, mu, yimp, scale, acc_batch, acc_total, counters,
            t0, t1, cfg.burn_in, cfg.thin, cfg.adapt_end,
            normals, unifs, p_out, mu_out, y_out, status,
        )
        if status[0]:
            what = "non-finite state" if status[0] == 1 else "non-positive-definite conditional"
            dump = {name: float(p[i]) for i, name in enumerate(SLOTS)}
            raise FloatingPointError(f"chain {chain}: {what} at iteration {int(status[1])}: {dump}")
    after = max(int(counters[0]), 1)
    rates = {name: float(acc_total[j]) / after if counters[0] else float("nan") for j, name in enumerate(names)}
    return p_out, mu_out, y_out, rates


def _check_init(theta: HyperParams, spec: ModelSpec) -> None:
    between_cov(theta, spec)
    for name in spec.scale_params():
        if name.startswith("rho"):
            lo, hi = spec.rho_support(name)
            if not lo < getattr(theta, name) < hi:
                raise ValueError(f"initial {name} lies outside its prior support ({lo}, {hi})")


def fit(data: Sequence[StudyEffects], rho_w: WithinCorrelations, spec: ModelSpec, cfg: McmcConfig,
        mask: Mask | None = None, init: HyperParams | None = None, workers: int = 1) -> PosteriorChains:
    """Run ``cfg.chains`` independent chains and return the retained draws.

    ``mask`` hides selected observed effects (their variances are kept) so
    that they are imputed rather than used; ``init`` overrides the starting
    hyperparameters, which matters when ``cfg.freeze`` holds some fixed.
    """
    prep = _prepare(data, rho_w, spec, mask)
    if init is not None:
        _check_init(init, spec)
    seeds = [derive_seed(cfg.seed, "chain", c) for c in range(cfg.chains)]
    jobs = [(prep, spec, cfg, c, seeds[c], init) for c in range(cfg.chains)]
    if workers > 1 and cfg.chains > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda a: _run_chain(*a), jobs))
    else:
        results = [_run_chain(*a) for a in jobs]
    acceptance: dict[str, list[float]] = {}
    for r in results:
        for name, rate in r[3].items():
            acceptance.setdefault(name, []).append(rate)
    masked = {sid: sorted(k.name for k in ks) for sid, ks in (mask or {}).items()}
    return PosteriorChains(
        spec=spec, config=cfg, study_ids=prep.study_ids,
        params=np.stack([r[0] for r in results]),
        mu=np.stack([r[1] for r in results]),
        y_imputed=np.stack([r[2] for r in results]),
        imputed=prep.imp.copy(),
        acceptance=acceptance, seeds=seeds, masked=masked,
    )


def save_chains(chains: PosteriorChains, directory: str | Path, extra_meta: Mapping | None = None) -> None:
    """Write ``chain_<k>.csv`` per chain plus ``meta.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cols = chains.columns()
    for c in range(chains.n_chains):
        tab = chains.table(c)
        with open(out / f"chain_{c}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in tab:
                w.writerow([repr(float(v)) for v in row])
    meta = {
        "model": spec_to_dict(chains.spec),
        "config": chains.config.as_dict(),
        "study_ids": list(chains.study_ids),
        "imputed": chains.imputed.astype(int).tolist(),
        "masked": chains.masked,
        "seeds": [str(s) for s in chains.seeds],
        "acceptance": chains.acceptance,
        "n_draws": chains.n_draws,
        "columns": cols,
    }
    if extra_meta:
        meta.update(extra_meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_chains(directory: str | Path) -> PosteriorChains:
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    spec = spec_from_dict(meta["model"])
    cfgd = dict(meta["config"])
    cfg = McmcConfig(
        iterations=cfgd["iterations"], burn_in=cfgd["burn_in"], thin=cfgd["thin"],
        chains=cfgd["chains"], seed=cfgd["seed"], adapt_until=cfgd["adapt_until"],
        freeze=frozenset(cfgd["freeze"]),
    )
    study_ids = tuple(meta["study_ids"])
    imputed = np.array(meta["imputed"], dtype=bool).reshape(len(study_ids), spec.dim)
    n, d = imputed.shape
    free = [SLOT[p] for p in spec.free_params()]
    params, mus, ys = [], [], []
    default = HyperParams().to_vector()
    for c in range(cfg.chains):
        tab = np.loadtxt(src / f"chain_{c}.csv", delimiter=",", skiprows=1, ndmin=2)
        k = tab.shape[0]
        p = np.tile(default, (k, 1))
        p[:, free] = tab[:, : len(free)]
        off = len(free)
        mu = tab[:, off: off + n * d].reshape(k, n, d)
        off += n * d
        y = np.full((k, n, d), np.nan)
        ii, jj = np.nonzero(imputed)
        y[:, ii, jj] = tab[:, off:]
        params.append(p)
        mus.append(mu)
        ys.append(y)
    return PosteriorChains(
        spec=spec, config=cfg, study_ids=study_ids,
        params=np.stack(params), mu=np.stack(mus), y_imputed=np.stack(ys), imputed=imputed,
        acceptance=meta["acceptance"], seeds=[int(s) for s in meta["seeds"]], masked=meta.get("masked", {}),
    )
