"""Synthetic meta-analyses drawn forward from the between/within-study model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._rng import stream
from .data import OutcomeKind, StudyEffects, TherapyClass, WithinCorrelations, covariance_over
from .model import HyperParams, ModelSpec, between_cov, chain_coefficients, spec_from_dict, spec_to_dict

DEFAULT_VAR_RANGES = {
    OutcomeKind.TR: (0.02, 0.4),
    OutcomeKind.PFS: (0.002, 0.05),
    OutcomeKind.OS: (0.001, 0.02),
}
MAX_RETRIES = 100


@dataclass(frozen=True)
class MaskOutcome:
    """Hide outcome ``kind`` in a ``fraction`` of studies."""

    kind: OutcomeKind
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("mask fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TrueParams:
    """Generating parameters: hyperparameters, structure, within-study
    variance ranges and correlations, and a missingness pattern (an empty
    ``masks`` tuple means complete data)."""

    theta: HyperParams
    spec: ModelSpec = field(default_factory=ModelSpec.trivariate)
    var_ranges: Mapping[OutcomeKind, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_VAR_RANGES))
    rho_w: WithinCorrelations = field(default_factory=WithinCorrelations.zero)
    masks: tuple[MaskOutcome, ...] = ()

    def __post_init__(self):
        between_cov(self.theta, self.spec)
        for k in self.spec.outcomes:
            lo, hi = self.var_ranges[k]
            if not 0 < lo <= hi:
                raise ValueError(f"variance range for {k.name} must satisfy 0 < lo <= hi")

    @classmethod
    def from_slopes(cls, eta1: float, lambda20: float, lambda21: float, lambda30: float, lambda32: float,
                    taus: Sequence[float], **kw) -> "TrueParams":
        """Trivariate chain given by regression slopes and marginal SDs."""
        t1, t2, t3 = taus
        theta = HyperParams(eta1=eta1, lambda20=lambda20, lambda30=lambda30, tau1=t1, tau2=t2, tau3=t3,
                            rho12=lambda21 * t1 / t2, rho23=lambda32 * t2 / t3)
        return cls(theta, **kw)

    def to_dict(self) -> dict:
        c = chain_coefficients(self.theta, self.spec)
        return {
            "theta": self.theta.as_dict(),
            "model": spec_to_dict(self.spec),
            "var_ranges": {k.name: list(self.var_ranges[k]) for k in self.spec.outcomes},
            "rho_w": [self.rho_w.rho_12, self.rho_w.rho_13, self.rho_w.rho_23],
            "masks": [{"outcome": m.kind.name, "fraction": m.fraction} for m in self.masks],
            "derived": {k: float(v) for k, v in sorted(c.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrueParams":
        """Inverse of :meth:`to_dict`; ``derived`` is ignored and every key
        other than ``theta`` is optional."""
        spec = spec_from_dict(d["model"]) if "model" in d else ModelSpec.trivariate()
        ranges = dict(DEFAULT_VAR_RANGES)
        for name, (lo, hi) in d.get("var_ranges", {}).items():
            ranges[OutcomeKind.parse(name)] = (float(lo), float(hi))
        rho_w = WithinCorrelations(*d["rho_w"]) if "rho_w" in d else WithinCorrelations.zero()
        masks = tuple(MaskOutcome(OutcomeKind.parse(m["outcome"]), float(m["fraction"])) for m in d.get("masks", ()))
        return cls(HyperParams(**d["theta"]), spec, ranges, rho_w, masks)


@dataclass
class Synthetic:
    studies: list[StudyEffects]
    rho_w: WithinCorrelations
    latents: np.ndarray  # (n, dim) true effects in spec.outcomes order
    truth: TrueParams


def draw_latents(tp: TrueParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """True effects, drawn down the conditional chain mu1, mu2 | mu1, mu3 | mu1, mu2."""
    c = chain_coefficients(tp.theta, tp.spec)
    z = rng.standard_normal((n, tp.spec.dim))
    mu = np.empty_like(z)
    mu[:, 0] = c["eta1"] + np.sqrt(c["psi1_sq"]) * z[:, 0]
    mu[:, 1] = c["lambda20"] + c["lambda21"] * mu[:, 0] + np.sqrt(max(float(c["psi2_sq"]), 0.0)) * z[:, 1]
    if tp.spec.dim == 3:
        mu[:, 2] = (c["lambda30"] + c["lambda31"] * mu[:, 0] + c["lambda32"] * mu[:, 1]
                    + np.sqrt(max(float(c["psi3_sq"]), 0.0)) * z[:, 2])
    return mu


def _study(i: int, mu: np.ndarray, tp: TrueParams, seed: int) -> StudyEffects:
    kinds = tp.spec.outcomes
    rng = stream(seed, "study", i)
    sid = f"S{i + 1:03d}"
    for _ in range(MAX_RETRIES):
        var = [float(rng.uniform(*tp.var_ranges[k])) for k in kinds]
        effect: list[float | None] = [None] * 3
        v3: list[float | None] = [None] * 3
        for k, v in zip(kinds, var):
            effect[k], v3[k] = 0.0, v
        probe = StudyEffects(sid, TherapyClass.SystemicChemo, tuple(effect), tuple(v3), False)
        try:
            cov = covariance_over(probe, kinds, tp.rho_w)
        except ValueError:
            continue
        L = np.linalg.cholesky(cov)
        y = mu + L @ rng.standard_normal(len(kinds))
        for k, val in zip(kinds, y):
            effect[k] = float(val)
        return StudyEffects(sid, TherapyClass.SystemicChemo, tuple(effect), tuple(v3), False)
    raise RuntimeError(f"{sid}: no feasible within-study covariance after {MAX_RETRIES} draws")


def _apply_masks(studies: list[StudyEffects], masks: Sequence[MaskOutcome], seed: int) -> list[StudyEffects]:
    out = list(studies)
    for m in masks:
        n_hide = int(round(m.fraction * len(out)))
        hide = stream(seed, "mask", m.kind.name).permutation(len(out))[:n_hide]
        for i in sorted(hide):
            s = out[i]
            if not s.has(m.kind):
                continue
            eff, var = list(s.effect), list(s.var)
            eff[m.kind], var[m.kind] = None, None
            if all(e is None for e in eff):
                raise ValueError(f"masking would leave {s.study_id} with no outcomes")
            out[i] = StudyEffects(s.study_id, s.therapy_class, tuple(eff), tuple(var), s.allows_crossover)
    return out


def generate(tp: TrueParams, n_studies: int, seed: int) -> Synthetic:
    """Draw ``n_studies`` trials: true effects from the between-study law,
    variances from their uniform ranges, observed effects around the true
    ones with the configured within-study correlations, then masking."""
    if n_studies < 1:
        raise ValueError("n_studies must be positive")
    mu = draw_latents(tp, n_studies, stream(seed, "latents"))
    studies = [_study(i, mu[i], tp, seed) for i in range(n_studies)]
    return Synthetic(_apply_masks(studies, tp.masks, seed), tp.rho_w, mu, tp)


def write_truth(tp: TrueParams, path: str | Path, latents: np.ndarray | None = None,
                study_ids: Sequence[str] | None = None) -> None:
    d = tp.to_dict()
    if latents is not None:
        d["latents"] = {sid: [float(v) for v in row] for sid, row in zip(study_ids, latents)}
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def recovery_params(**kw) -> TrueParams:
    """Reference trivariate landscape: lambda21 = -0.5, lambda32 = 0.4,
    tau = (0.5, 0.3, 0.15), within-study variances 0.01-0.05."""
    kw.setdefault("var_ranges", {k: (0.01, 0.05) for k in OutcomeKind})
    return TrueParams.from_slopes(0.3, 0.0, -0.5, 0.0, 0.4, (0.5, 0.3, 0.15), **kw)

