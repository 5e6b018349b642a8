"""Model specification, hyperparameters and the between-study covariance.

Parameters are laid out in a fixed 12-slot vector shared with the sampler
kernel (see ``SLOTS``). Which slots are free depends on the dimension and
the between-study structure:

* bivariate (outcomes a, b): eta1, lambda20, tau1, tau2, rho12
* ``main`` (TR -> PFS -> OS chain): + lambda30, tau3, rho23
* ``alt`` (TR independent of PFS, OS regressed on both): eta1, lambda20,
  lambda30, lambda31, lambda32, tau1, tau2, psi3
* ``unstructured``: as ``main`` plus a free rho13
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .data import OutcomeKind

SLOTS = (
    "eta1", "lambda20", "lambda30", "lambda31", "lambda32",
    "tau1", "tau2", "tau3", "rho12", "rho13", "rho23", "psi3",
)
SLOT = {name: i for i, name in enumerate(SLOTS)}

CANONICAL = (OutcomeKind.TR, OutcomeKind.PFS, OutcomeKind.OS)


class ModelStructure(enum.Enum):
    StructuredMain = "main"
    StructuredAlt = "alt"
    Unstructured = "unstructured"


# kernel codes
BIVARIATE, MAIN, ALT, UNSTRUCTURED = 0, 1, 2, 3


@dataclass(frozen=True)
class PriorSpec:
    """Priors. Correlation supports are keyed by canonical outcome pair."""

    rho12_support: tuple[float, float] = (-1.0, 0.0)  # TR-PFS
    rho23_support: tuple[float, float] = (0.0, 1.0)   # PFS-OS
    rho13_support: tuple[float, float] = (-1.0, 0.0)  # TR-OS
    tau_variance: float = 1000.0
    location_variance: float = 1000.0

    def __post_init__(self):
        for lo, hi in (self.rho12_support, self.rho23_support, self.rho13_support):
            if not (-1.0 <= lo < hi <= 1.0):
                raise ValueError(f"correlation support ({lo}, {hi}) must be a subinterval of (-1, 1)")
        if self.tau_variance <= 0 or self.location_variance <= 0:
            raise ValueError("prior variances must be positive")

    @classmethod
    def wide(cls, **kw) -> "PriorSpec":
        return cls(rho12_support=(-1.0, 1.0), rho23_support=(-1.0, 1.0), rho13_support=(-1.0, 1.0), **kw)

    def support_for(self, a: OutcomeKind, b: OutcomeKind) -> tuple[float, float]:
        pair = frozenset((a, b))
        if pair == {OutcomeKind.TR, OutcomeKind.PFS}:
            return self.rho12_support
        if pair == {OutcomeKind.PFS, OutcomeKind.OS}:
            return self.rho23_support
        if pair == {OutcomeKind.TR, OutcomeKind.OS}:
            return self.rho13_support
        raise ValueError(f"no correlation between {a.name} and {b.name}")


@dataclass(frozen=True)
class ModelSpec:
    """Outcomes modelled (in chain order), between-study structure and priors."""

    outcomes: tuple[OutcomeKind, ...]
    structure: ModelStructure = ModelStructure.StructuredMain
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if len(self.outcomes) not in (2, 3) or len(set(self.outcomes)) != len(self.outcomes):
            raise ValueError("a model has two or three distinct outcomes")
        if self.dim == 3 and tuple(self.outcomes) != CANONICAL:
            raise ValueError("trivariate models use the canonical order TR, PFS, OS")
        if self.dim == 2 and self.structure is not ModelStructure.StructuredMain:
            raise ValueError(f"structure {self.structure.value!r} needs three outcomes")

    @classmethod
    def trivariate(cls, structure=ModelStructure.StructuredMain, prior: PriorSpec | None = None) -> "ModelSpec":
        return cls(CANONICAL, structure, prior or PriorSpec())

    @classmethod
    def bivariate(cls, surrogate: OutcomeKind, final: OutcomeKind, prior: PriorSpec | None = None) -> "ModelSpec":
        return cls((surrogate, final), ModelStructure.StructuredMain, prior or PriorSpec())

    @property
    def dim(self) -> int:
        return len(self.outcomes)

    @property
    def code(self) -> int:
        if self.dim == 2:
            return BIVARIATE
        return {ModelStructure.StructuredMain: MAIN,
                ModelStructure.StructuredAlt: ALT,
                ModelStructure.Unstructured: UNSTRUCTURED}[self.structure]

    @property
    def label(self) -> str:
        if self.dim == 2:
            return "2D " + "-".join(k.name for k in self.outcomes)
        return f"3D {self.structure.value}"

    def free_params(self) -> tuple[str, ...]:
        code = self.code
        if code == BIVARIATE:
            return ("eta1", "lambda20", "tau1", "tau2", "rho12")
        if code == MAIN:
            return ("eta1", "lambda20", "lambda30", "tau1", "tau2", "tau3", "rho12", "rho23")
        if code == UNSTRUCTURED:
            return ("eta1", "lambda20", "lambda30", "tau1", "tau2", "tau3", "rho12", "rho13", "rho23")
        return ("eta1", "lambda20", "lambda30", "lambda31", "lambda32", "tau1", "tau2", "psi3")

    def location_params(self) -> tuple[str, ...]:
        return ("eta1", "lambda20", "lambda30")[: self.dim]

    def scale_params(self) -> tuple[str, ...]:
        return tuple(p for p in self.free_params() if p.startswith(("tau", "rho", "psi")))

    def rho_support(self, name: str) -> tuple[float, float]:
        """Prior support of a positional correlation parameter."""
        pos = {"rho12": (0, 1), "rho23": (1, 2), "rho13": (0, 2)}[name]
        return self.prior.support_for(self.outcomes[pos[0]], self.outcomes[pos[1]])


@dataclass(frozen=True)
class HyperParams:
    """One state of the between-study hyperparameters.

    Unused slots for a given structure keep their defaults.
    """

    eta1: float = 0.0
    lambda20: float = 0.0
    lambda30: float = 0.0
    tau1: float = 1.0
    tau2: float = 1.0
    tau3: float = 1.0
    rho12: float = 0.0
    rho23: float = 0.0
    rho13: float = 0.0
    lambda31: float = 0.0
    lambda32: float = 0.0
    psi3: float = 1.0

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SLOTS], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "HyperParams":
        return cls(**{name: float(v[i]) for i, name in enumerate(SLOTS)})

    def replace(self, **kw) -> "HyperParams":
        return replace(self, **kw)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def chain_coefficients(theta: Mapping[str, np.ndarray] | HyperParams, spec: ModelSpec) -> dict[str, np.ndarray]:
    """Regression form of the between-study law.

    Returns intercepts and slopes of
    ``mu1 ~ N(eta1, psi1_sq)``, ``mu2 | mu1 ~ N(lambda20 + lambda21 mu1, psi2_sq)``,
    ``mu3 | mu1, mu2 ~ N(lambda30 + lambda31 mu1 + lambda32 mu2, psi3_sq)``
    together with marginal SDs and implied correlations. Works elementwise
    on arrays of draws.
    """
    g = theta.as_dict() if isinstance(theta, HyperParams) else theta
    g = {k: np.asarray(v, dtype=float) for k, v in g.items()}
    code = spec.code
    out: dict[str, np.ndarray] = {"eta1": g["eta1"], "lambda20": g["lambda20"]}
    t1, t2 = g["tau1"], g["tau2"]
    out["tau1"], out["tau2"] = t1, t2
    out["psi1_sq"] = t1 ** 2
    if code == ALT:
        l31, l32, p3 = g["lambda31"], g["lambda32"], g["psi3"]
        out["lambda21"] = np.zeros_like(t1)
        out["psi2_sq"] = t2 ** 2
        out["lambda30"], out["lambda31"], out["lambda32"] = g["lambda30"], l31, l32
        out["psi3_sq"] = p3 ** 2
        t3 = np.sqrt(l31 ** 2 * t1 ** 2 + l32 ** 2 * t2 ** 2 + p3 ** 2)
        out["tau3"] = t3
        out["rho12"] = np.zeros_like(t1)
        out["rho13"] = l31 * t1 / t3
        out["rho23"] = l32 * t2 / t3
        return out
    r12 = g["rho12"]
    out["rho12"] = r12
    out["lambda21"] = r12 * t2 / t1
    out["psi2_sq"] = t2 ** 2 - out["lambda21"] ** 2 * t1 ** 2
    if code == BIVARIATE:
        return out
    t3, r23 = g["tau3"], g["rho23"]
    out["tau3"], out["rho23"] = t3, r23
    out["lambda30"] = g["lambda30"]
    if code == MAIN:
        out["rho13"] = r12 * r23
        out["lambda31"] = np.zeros_like(t1)
        out["lambda32"] = r23 * t3 / t2
        out["psi3_sq"] = t3 ** 2 - out["lambda32"] ** 2 * t2 ** 2
        return out
    # unstructured: regression of standardized mu3 on standardized (mu1, mu2)
    r13 = g["rho13"]
    out["rho13"] = r13
    det = 1.0 - r12 ** 2
    b1 = (r13 - r12 * r23) / det
    b2 = (r23 - r12 * r13) / det
    out["lambda31"] = b1 * t3 / t1
    out["lambda32"] = b2 * t3 / t2
    out["psi3_sq"] = t3 ** 2 * (1.0 - (b1 * r13 + b2 * r23))
    return out


def between_mean(theta: HyperParams, spec: ModelSpec) -> np.ndarray:
    c = chain_coefficients(theta, spec)
    m1 = float(c["eta1"])
    m2 = float(c["lambda20"] + c["lambda21"] * m1)
    if spec.dim == 2:
        return np.array([m1, m2])
    m3 = float(c["lambda30"] + c["lambda31"] * m1 + c["lambda32"] * m2)
    return np.array([m1, m2, m3])


def _check_open(theta: HyperParams, spec: ModelSpec) -> None:
    for name in spec.free_params():
        v = getattr(theta, name)
        if name.startswith(("tau", "psi")) and not v > 0:
            raise ValueError(f"{name} must be positive")
        if name.startswith("rho"):
            lo, hi = -1.0, 1.0
            if not lo < v < hi:
                raise ValueError(f"{name}={v} must lie strictly inside (-1, 1)")


def between_cov(theta: HyperParams, spec: ModelSpec) -> np.ndarray:
    """Between-study covariance of the true effects.

    Raises ``ValueError`` when the parameters fall outside the open
    support or the implied matrix is not positive definite.
    """
    _check_open(theta, spec)
    t1, t2 = theta.tau1, theta.tau2
    code = spec.code
    if code == BIVARIATE:
        m = np.array([[t1 ** 2, theta.rho12 * t1 * t2], [theta.rho12 * t1 * t2, t2 ** 2]])
    elif code == ALT:
        c = chain_coefficients(theta, spec)
        a = np.array([[0, 0, 0], [0, 0, 0], [theta.lambda31, theta.lambda32, 0.0]])
        inv = np.linalg.inv(np.eye(3) - a)
        m = inv @ np.diag([t1 ** 2, t2 ** 2, float(c["psi3_sq"])]) @ inv.T
    else:
        t3 = theta.tau3
        r13 = theta.rho12 * theta.rho23 if code == MAIN else theta.rho13
        r = np.array([[1.0, theta.rho12, r13], [theta.rho12, 1.0, theta.rho23], [r13, theta.rho23, 1.0]])
        sd = np.array([t1, t2, t3])
        m = r * np.outer(sd, sd)
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ValueError("between-study covariance is not positive definite") from None
    return m


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings. ``freeze`` holds parameter groups kept at their
    initial values ("scales", "locations"); used for oracle checks."""

    iterations: int = 250_000
    burn_in: int = 150_000
    thin: int = 10
    chains: int = 2
    seed: int = 20240101
    adapt_until: int | None = None
    freeze: frozenset = frozenset()

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1 or self.chains < 1:
            raise ValueError("iterations, thin and chains must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        unknown = set(self.freeze) - {"scales", "locations"}
        if unknown:
            raise ValueError(f"unknown freeze groups {sorted(unknown)}")
        object.__setattr__(self, "freeze", frozenset(self.freeze))

    @property
    def adapt_end(self) -> int:
        return self.burn_in // 2 if self.adapt_until is None else self.adapt_until

    @property
    def n_retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def replace(self, **kw) -> "McmcConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations, "burn_in": self.burn_in, "thin": self.thin,
            "chains": self.chains, "seed": self.seed, "adapt_until": self.adapt_end,
            "freeze": sorted(self.freeze),
        }


def spec_to_dict(spec: ModelSpec) -> dict:
    p = spec.prior
    return {
        "outcomes": [k.name for k in spec.outcomes],
        "structure": spec.structure.value,
        "prior": {
            "rho12_support": list(p.rho12_support),
            "rho23_support": list(p.rho23_support),
            "rho13_support": list(p.rho13_support),
            "tau_variance": p.tau_variance,
            "location_variance": p.location_variance,
        },
    }


def spec_from_dict(d: Mapping) -> ModelSpec:
    p = d["prior"]
    prior = PriorSpec(
        rho12_support=tuple(p["rho12_support"]),
        rho23_support=tuple(p["rho23_support"]),
        rho13_support=tuple(p["rho13_support"]),
        tau_variance=p["tau_variance"],
        location_variance=p["location_variance"],
    )
    return ModelSpec(tuple(OutcomeKind[k] for k in d["outcomes"]), ModelStructure(d["structure"]), prior)

