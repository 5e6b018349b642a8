"""Leave-one-out prediction of a final-outcome effect and comparison of
predicted-interval widths between two models."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_seed
from .data import OutcomeKind, StudyEffects, WithinCorrelations
from .model import HyperParams, McmcConfig, ModelSpec
from .sampler import fit

Z95 = 1.959963984540054

CV_COLUMNS = (
    "study_id", "observed", "obs_lo", "obs_hi", "pred", "pred_lo", "pred_hi", "covered",
    "pred_var", "pred_q_lo", "pred_q_hi", "model_dim",
)
COMPARE_COLUMNS = ("study_id", "width_biv", "width_tri", "reduction_pct")


@dataclass(frozen=True)
class PredictionResult:
    study_id: str
    observed: float
    observed_var: float
    predicted_mean: float
    predictive_variance: float
    quantile_interval: tuple[float, float]
    model_dim: int = 3

    @property
    def observed_interval(self) -> tuple[float, float]:
        h = Z95 * np.sqrt(self.observed_var)
        return self.observed - h, self.observed + h

    @property
    def predicted_interval(self) -> tuple[float, float]:
        h = Z95 * np.sqrt(self.predictive_variance)
        return self.predicted_mean - h, self.predicted_mean + h

    @property
    def width(self) -> float:
        lo, hi = self.predicted_interval
        return hi - lo

    @property
    def covered(self) -> bool:
        lo, hi = self.predicted_interval
        return bool(lo <= self.observed <= hi)

    def row(self) -> list[str]:
        f = lambda v: repr(float(v))  # noqa: E731
        return [self.study_id, f(self.observed), *map(f, self.observed_interval), f(self.predicted_mean),
                *map(f, self.predicted_interval), "true" if self.covered else "false",
                f(self.predictive_variance), *map(f, self.quantile_interval), str(self.model_dim)]


def _predict_one(data, rho_w, spec, cfg, target, init, study: StudyEffects) -> PredictionResult:
    sid = study.study_id
    run_cfg = cfg.replace(seed=derive_seed(cfg.seed, "cv", sid))
    try:
        chains = fit(data, rho_w, spec, run_cfg, mask={sid: [target]}, init=init)
    except Exception as exc:
        raise RuntimeError(f"leave-one-out refit failed for study {sid}: {exc}") from exc
    mu = chains.latent(sid, target).ravel()
    y = chains.imputed_draws(sid, target).ravel()
    var = study.var[target]
    q_lo, q_hi = np.quantile(y, [0.025, 0.975])
    return PredictionResult(
        study_id=sid,
        observed=float(study.effect[target]),
        observed_var=float(var),
        predicted_mean=float(np.mean(mu)),
        predictive_variance=float(var + np.var(mu, ddof=1)),
        quantile_interval=(float(q_lo), float(q_hi)),
        model_dim=spec.dim,
    )


def loo_predict(data: Sequence[StudyEffects], rho_w: WithinCorrelations, spec: ModelSpec, cfg: McmcConfig,
                target: OutcomeKind = OutcomeKind.OS, workers: int = 1,
                studies: Sequence[str] | None = None, init: HyperParams | None = None) -> list[PredictionResult]:
    """Hide each study's ``target`` effect in turn, refit, and predict it.

    The predicted mean is the posterior mean of the study's true effect and
    the predictive variance adds its posterior variance to the study's
    sampling variance; the interval is mean +/- 1.96 sd. A 95% quantile
    interval of the imputed observation is reported alongside. Studies
    not reporting ``target`` stay in every fit but are not scored.
    ``studies`` restricts scoring to the given ids; ``init`` is passed to
    every refit (with ``cfg.freeze`` it pins hyperparameters).
    """
    if target not in spec.outcomes:
        raise ValueError(f"target {target.name} is not modelled by {spec.label}")
    scored = sorted((s for s in data if s.has(target)), key=lambda s: s.study_id)
    if studies is not None:
        wanted = set(studies)
        missing = wanted - {s.study_id for s in scored}
        if missing:
            raise ValueError(f"cannot score studies without an observed {target.name}: {sorted(missing)}")
        scored = [s for s in scored if s.study_id in wanted]
    if not scored:
        raise ValueError(f"no study reports {target.name}")
    jobs = [(data, rho_w, spec, cfg, target, init, s) for s in scored]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(lambda a: _predict_one(*a), jobs))
    return [_predict_one(*a) for a in jobs]


@dataclass(frozen=True)
class WidthComparison:
    """Per-study percent change in predicted-interval width; positive means
    the second model's interval is narrower than the first's."""

    study_ids: tuple[str, ...]
    widths_first: tuple[float, ...]
    widths_second: tuple[float, ...]
    reductions: tuple[float, ...]

    @property
    def average(self) -> float:
        return float(np.mean(self.reductions))

    @property
    def min(self) -> float:
        return float(np.min(self.reductions))

    @property
    def max(self) -> float:
        return float(np.max(self.reductions))


def compare_widths(biv: Sequence[PredictionResult], tri: Sequence[PredictionResult]) -> WidthComparison:
    """Percent reduction ``100 (w_first - w_second) / w_ref`` per study.

    The reference width ``w_ref`` is that of the lower-dimensional model
    (the bivariate run in the usual ordering), or the mean of both widths
    when the two runs have the same dimension. Because the reference does
    not depend on argument order, swapping the arguments negates every
    entry exactly.
    """
    a = {p.study_id: p for p in biv}
    b = {p.study_id: p for p in tri}
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))
        raise ValueError(f"prediction sets differ in studies {diff}")
    ids = tuple(sorted(a))
    wa = np.array([a[i].width for i in ids])
    wb = np.array([b[i].width for i in ids])
    dims = ({p.model_dim for p in biv}, {p.model_dim for p in tri})
    if len(dims[0]) == 1 and len(dims[1]) == 1 and dims[0] != dims[1]:
        ref = wa if min(dims[0]) < min(dims[1]) else wb
    else:
        ref = 0.5 * (wa + wb)
    red = 100.0 * (wa - wb) / ref
    return WidthComparison(ids, tuple(map(float, wa)), tuple(map(float, wb)), tuple(map(float, red)))


def write_predictions_csv(results: Sequence[PredictionResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CV_COLUMNS)
        for r in sorted(results, key=lambda r: r.study_id):
            w.writerow(r.row())


def read_predictions_csv(path: str | Path) -> list[PredictionResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            obs_lo, obs_hi = float(row["obs_lo"]), float(row["obs_hi"])
            out.append(PredictionResult(
                study_id=row["study_id"],
                observed=float(row["observed"]),
                observed_var=((obs_hi - obs_lo) / (2 * Z95)) ** 2,
                predicted_mean=float(row["pred"]),
                predictive_variance=float(row["pred_var"]),
                quantile_interval=(float(row["pred_q_lo"]), float(row["pred_q_hi"])),
                model_dim=int(row["model_dim"]),
            ))
    return out


def write_comparison_csv(cmp: WidthComparison, path: str | Path) -> None:
    """Per-study rows then AVERAGE, MIN and MAX; ``reduction_pct`` > 0 means
    the trivariate interval is narrower."""
    f = lambda v: repr(float(v))  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for sid, x, y, r in zip(cmp.study_ids, cmp.widths_first, cmp.widths_second, cmp.reductions):
            w.writerow([sid, f(x), f(y), f(r)])
        w.writerow(["AVERAGE", "", "", f(cmp.average)])
        w.writerow(["MIN", "", "", f(cmp.min)])
        w.writerow(["MAX", "", "", f(cmp.max)])
