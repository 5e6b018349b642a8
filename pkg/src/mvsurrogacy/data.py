"""Study-level and patient-level data: domain types, CSV ingestion and
within-study covariance construction."""

from __future__ import annotations

import csv
import enum
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STUDY_HEADER = (
    "study_id", "therapy_class",
    "logor_tr", "var_tr",
    "loghr_pfs", "var_pfs",
    "loghr_os", "var_os",
    "allows_crossover",
)
IPD_HEADER = ("patient_id", "arm", "responder", "pfs_time", "pfs_event", "os_time", "os_event")

PD_JITTER = 1e-10


class OutcomeKind(enum.IntEnum):
    """Outcome index in canonical order (TR, PFS, OS)."""

    TR = 0
    PFS = 1
    OS = 2

    @classmethod
    def parse(cls, text: str) -> "OutcomeKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown outcome {text!r}") from None


class TherapyClass(enum.Enum):
    SystemicChemo = "chemo"
    AntiEGFR = "egfr"
    AntiAngiogenic = "angio"
    MTA = "mta"
    IHA = "iha"


@dataclass(frozen=True)
class StudyEffects:
    """Observed log-scale treatment effects of one trial.

    ``effect`` and ``var`` are 3-tuples indexed by :class:`OutcomeKind`;
    ``None`` marks an unreported outcome.
    """

    study_id: str
    therapy_class: TherapyClass
    effect: tuple[float | None, float | None, float | None]
    var: tuple[float | None, float | None, float | None]
    allows_crossover: bool | None = None

    def __post_init__(self):
        if len(self.effect) != 3 or len(self.var) != 3:
            raise ValueError("effect and var must have one slot per outcome")
        for k in OutcomeKind:
            e, v = self.effect[k], self.var[k]
            if (e is None) != (v is None):
                raise ValueError(f"{self.study_id}: {k.name} effect and variance must both be present")
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{self.study_id}: {k.name} variance must be positive")
            if e is not None and not math.isfinite(e):
                raise ValueError(f"{self.study_id}: {k.name} effect must be finite")
        if not self.observed:
            raise ValueError(f"{self.study_id}: no outcomes")

    @property
    def observed(self) -> tuple[OutcomeKind, ...]:
        return tuple(k for k in OutcomeKind if self.effect[k] is not None)

    def has(self, kind: OutcomeKind) -> bool:
        return self.effect[kind] is not None

    def sd(self, kind: OutcomeKind) -> float:
        return math.sqrt(self.var[kind])


@dataclass(frozen=True)
class WithinCorrelations:
    """Within-study correlations between effect estimates, shared by all studies."""

    rho_12: float  # TR-PFS
    rho_13: float  # TR-OS
    rho_23: float  # PFS-OS

    def __post_init__(self):
        for name in ("rho_12", "rho_13", "rho_23"):
            r = getattr(self, name)
            if not -1.0 <= r <= 1.0:
                raise ValueError(f"{name}={r} outside [-1, 1]")
        if np.linalg.eigvalsh(self.matrix()).min() < -1e-12:
            raise ValueError("within-study correlation matrix is not positive semi-definite")

    def matrix(self) -> np.ndarray:
        return np.array([
            [1.0, self.rho_12, self.rho_13],
            [self.rho_12, 1.0, self.rho_23],
            [self.rho_13, self.rho_23, 1.0],
        ])

    def between(self, a: OutcomeKind, b: OutcomeKind) -> float:
        return 1.0 if a == b else float(self.matrix()[a, b])

    @classmethod
    def zero(cls) -> "WithinCorrelations":
        return cls(0.0, 0.0, 0.0)


# Bootstrap estimates from the one trial with patient-level data.
PUBLISHED_WITHIN_CORRELATIONS = WithinCorrelations(rho_12=-0.433, rho_13=-0.333, rho_23=0.513)


@dataclass(frozen=True)
class WithinCov:
    matrix: np.ndarray
    index_map: tuple[OutcomeKind, ...]


@dataclass(frozen=True)
class IpdRecord:
    patient_id: str
    arm: int
    responder: bool | None = None
    pfs_time: float | None = None
    pfs_event: bool | None = None
    os_time: float | None = None
    os_event: bool | None = None

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise ValueError(f"{self.patient_id}: arm must be 0 or 1")
        for t, e, name in ((self.pfs_time, self.pfs_event, "pfs"), (self.os_time, self.os_event, "os")):
            if (t is None) != (e is None):
                raise ValueError(f"{self.patient_id}: {name} time and event must both be present")
            if t is not None and not t > 0:
                raise ValueError(f"{self.patient_id}: {name} time must be positive")


@dataclass
class RowError:
    line: int
    study_id: str
    message: str


@dataclass
class Ingestion:
    """Result of reading a study CSV: accepted studies plus per-row errors."""

    studies: list[StudyEffects]
    errors: list[RowError] = field(default_factory=list)

    @property
    def counts(self) -> dict[int, int]:
        out = {1: 0, 2: 0, 3: 0}
        for s in self.studies:
            out[len(s.observed)] += 1
        return out

    def summary(self) -> str:
        c = self.counts
        return (f"{len(self.studies)} studies ({c[3]} complete, {c[2]} with two outcomes, "
                f"{c[1]} with one); {len(self.errors)} rows rejected")


class HeaderError(ValueError):
    pass


def _num(cell: str) -> float | None:
    cell = cell.strip().replace("−", "-")
    if cell == "":
        return None
    return float(cell)


def _flag(cell: str) -> bool | None:
    cell = cell.strip().lower()
    if cell == "":
        return None
    if cell in ("true", "1", "yes"):
        return True
    if cell in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {cell!r}")


def parse_study_csv(path: str | Path) -> Ingestion:
    """Read study-level summary data.

    A malformed header raises :class:`HeaderError`. Rows that fail
    validation are reported in ``Ingestion.errors`` and skipped.
    """
    studies: list[StudyEffects] = []
    errors: list[RowError] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != STUDY_HEADER:
            raise HeaderError(f"{path}: expected header {','.join(STUDY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            sid = row[0].strip() if row else ""
            try:
                if len(row) != len(STUDY_HEADER):
                    raise ValueError(f"expected {len(STUDY_HEADER)} fields, got {len(row)}")
                if not sid:
                    raise ValueError("empty study_id")
                if sid in seen:
                    raise ValueError("duplicate study_id")
                try:
                    tc = TherapyClass(row[1].strip().lower())
                except ValueError:
                    raise ValueError(f"unknown therapy_class {row[1]!r}") from None
                vals = [_num(c) for c in row[2:8]]
                effect = (vals[0], vals[2], vals[4])
                var = (vals[1], vals[3], vals[5])
                if all(e is None for e in effect) and all(v is None for v in var):
                    raise ValueError("no outcomes")
                studies.append(StudyEffects(sid, tc, effect, var, _flag(row[8])))
                seen.add(sid)
            except ValueError as exc:
                errors.append(RowError(lineno, sid, str(exc)))
    return Ingestion(studies, errors)


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def write_study_csv(studies: Iterable[StudyEffects], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STUDY_HEADER)
        for s in studies:
            cx = "" if s.allows_crossover is None else str(s.allows_crossover).lower()
            w.writerow([
                s.study_id, s.therapy_class.value,
                _fmt(s.effect[0]), _fmt(s.var[0]),
                _fmt(s.effect[1]), _fmt(s.var[1]),
                _fmt(s.effect[2]), _fmt(s.var[2]),
                cx,
            ])


def parse_ipd_csv(path: str | Path) -> list[IpdRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != IPD_HEADER:
            raise HeaderError(f"{path}: expected header {','.join(IPD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(IPD_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(IPD_HEADER)} fields")
            out.append(IpdRecord(
                patient_id=row[0].strip(),
                arm=int(row[1]),
                responder=_flag(row[2]),
                pfs_time=_num(row[3]),
                pfs_event=_flag(row[4]),
                os_time=_num(row[5]),
                os_event=_flag(row[6]),
            ))
    return out


def compute_log_or(r_t: int, n_t: int, r_c: int, n_c: int) -> tuple[float, float]:
    """Log odds ratio (treatment vs control) and its Woolf variance.

    When any cell of the 2x2 table is zero, 0.5 is added to all four cells.
    """
    if n_t < 1 or n_c < 1:
        raise ValueError("empty arm")
    if not (0 <= r_t <= n_t and 0 <= r_c <= n_c):
        raise ValueError("responders must lie between 0 and the arm size")
    cells = [Fraction(x) for x in (r_t, n_t - r_t, r_c, n_c - r_c)]
    if min(cells) == 0:
        cells = [x + Fraction(1, 2) for x in cells]
    a, b, c, d = cells
    # cross products are exact, so swapping arms negates the effect exactly
    effect = math.log(float(a * d)) - math.log(float(b * c))
    return effect, float(1 / a + 1 / b + 1 / c + 1 / d)


def covariance_over(study: StudyEffects, kinds: Sequence[OutcomeKind], rho: WithinCorrelations) -> np.ndarray:
    """Within-study covariance restricted to ``kinds`` (all must be reported)."""
    sd = np.array([study.sd(k) for k in kinds])
    r = np.array([[rho.between(a, b) for b in kinds] for a in kinds])
    m = r * np.outer(sd, sd)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, [study.var[k] for k in kinds])
    # jitter is relative to the largest variance so tiny-variance studies are not swamped
    jitter = PD_JITTER * float(np.max(np.diag(m))) if len(kinds) else 0.0
    if len(kinds) and np.linalg.eigvalsh(m).min() < jitter:
        m = m + jitter * np.eye(len(kinds))
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise ValueError(f"{study.study_id}: within-study covariance is not positive definite") from None
    return m


def build_within_cov(study: StudyEffects, rho: WithinCorrelations) -> WithinCov:
    kinds = study.observed
    return WithinCov(covariance_over(study, kinds, rho), kinds)
