"""Trial-level surrogacy criteria: intercept, slope, conditional variance
and adjusted R-squared of the final-outcome effect regressed on the
surrogate effect, summarized over posterior draws."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import OutcomeKind
from .model import ALT, BIVARIATE, MAIN, ModelSpec
from .sampler import PosteriorChains

CRITERIA_COLUMNS = (
    "pair", "model_dim",
    "intercept", "intercept_lo", "intercept_hi",
    "slope", "slope_lo", "slope_hi",
    "variance", "variance_lo", "variance_hi",
    "r2", "r2_lo", "r2_hi",
)


@dataclass(frozen=True)
class Summary:
    mean: float
    lo: float
    hi: float

    @classmethod
    def of(cls, draws: np.ndarray, level: float = 0.95) -> "Summary":
        # sorting first makes the mean exactly invariant to draw order
        x = np.sort(np.ravel(draws))
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(x, [a, 1.0 - a])
        return cls(float(np.mean(x)), float(lo), float(hi))

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class SurrogacyCriteria:
    pair: tuple[OutcomeKind, OutcomeKind]
    model_dim: int
    model_label: str
    intercept: Summary
    slope: Summary
    cond_variance: Summary
    r2_adjusted: Summary

    @property
    def verdicts(self) -> dict[str, bool]:
        return {
            "intercept_contains_zero": self.intercept.contains(0.0),
            "slope_excludes_zero": not self.slope.contains(0.0),
        }

    @property
    def pair_label(self) -> str:
        return f"{self.pair[0].name}-{self.pair[1].name}"

    def row(self) -> list[str]:
        vals = []
        for s in (self.intercept, self.slope, self.cond_variance, self.r2_adjusted):
            vals += [s.mean, s.lo, s.hi]
        return [self.pair_label, f"{self.model_dim}D"] + [repr(float(v)) for v in vals]


def pair_draws(chains: PosteriorChains, surrogate: OutcomeKind, final: OutcomeKind) -> dict[str, np.ndarray]:
    """Per-draw intercept, slope, conditional variance and adjusted R^2.

    Pairs adjacent in the modelled chain use the chain coefficients
    directly (R^2 = lambda^2 tau_s^2 / tau_f^2). Under the alternative and
    unstructured structures the PFS->OS and TR->OS pairs use the marginal
    regression of the final on the surrogate effect implied by the
    between-study mean and covariance.
    """
    spec = chains.spec
    kinds = spec.outcomes
    if surrogate not in kinds or final not in kinds or surrogate == final:
        raise ValueError(f"pair {surrogate.name}->{final.name} is not part of the {spec.label} model")
    s, f = kinds.index(surrogate), kinds.index(final)
    if s > f:
        raise ValueError(f"pair {surrogate.name}->{final.name} runs against the modelled order "
                         f"{'-'.join(k.name for k in kinds)}")
    c = chains.derived()
    tau = [c["tau1"], c["tau2"]] + ([c["tau3"]] if spec.dim == 3 else [])
    code = spec.code
    if code in (BIVARIATE, MAIN) or (s, f) == (0, 1):
        if code == MAIN and (s, f) == (0, 2):
            raise ValueError("TR->OS is indirect in the trivariate chain model; "
                             "fit the bivariate TR-OS model for this pair")
        if code == ALT:
            raise ValueError("TR and PFS are independent under the alternative structure; "
                             "fit the bivariate TR-PFS model for this pair")
        if (s, f) == (0, 1):
            icpt, slope, var = c["lambda20"], c["lambda21"], c["psi2_sq"]
        else:
            icpt, slope, var = c["lambda30"], c["lambda32"], c["psi3_sq"]
        r2 = slope ** 2 * tau[s] ** 2 / tau[f] ** 2
    else:
        mean = [c["eta1"], c["lambda20"] + c["lambda21"] * c["eta1"]]
        mean.append(c["lambda30"] + c["lambda31"] * mean[0] + c["lambda32"] * mean[1])
        rho = {(0, 1): c["rho12"], (0, 2): c["rho13"], (1, 2): c["rho23"]}[(s, f)]
        cov = rho * tau[s] * tau[f]
        slope = cov / tau[s] ** 2
        icpt = mean[f] - slope * mean[s]
        var = tau[f] ** 2 - cov ** 2 / tau[s] ** 2
        r2 = rho ** 2
    shape = chains.params.shape[:2]
    return {k: np.broadcast_to(v, shape) for k, v in
            {"intercept": icpt, "slope": slope, "variance": var, "r2": r2}.items()}


def criteria(chains: PosteriorChains, pair: tuple[OutcomeKind, OutcomeKind], level: float = 0.95) -> SurrogacyCriteria:
    """Posterior mean and equal-tailed interval of each criterion for the
    ordered (surrogate, final) pair."""
    d = pair_draws(chains, *pair)
    return SurrogacyCriteria(
        tuple(pair), chains.spec.dim, chains.spec.label,
        Summary.of(d["intercept"], level), Summary.of(d["slope"], level),
        Summary.of(d["variance"], level), Summary.of(d["r2"], level),
    )


def available_pairs(spec: ModelSpec) -> list[tuple[OutcomeKind, OutcomeKind]]:
    """Pairs for which :func:`criteria` is defined under ``spec``."""
    k = spec.outcomes
    if spec.dim == 2:
        return [(k[0], k[1])]
    if spec.code == MAIN:
        return [(k[0], k[1]), (k[1], k[2])]
    if spec.code == ALT:
        return [(k[1], k[2]), (k[0], k[2])]
    return [(k[0], k[1]), (k[1], k[2]), (k[0], k[2])]


def write_criteria_csv(rows: Iterable[SurrogacyCriteria], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CRITERIA_COLUMNS)
        for r in rows:
            w.writerow(r.row())
