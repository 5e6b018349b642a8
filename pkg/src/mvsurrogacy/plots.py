"""Static SVG figures: effect scatter plots with the fitted surrogacy line
and forest plots of leave-one-out predictions."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .crossval import PredictionResult  # noqa: E402
from .data import OutcomeKind, StudyEffects  # noqa: E402
from .surrogacy import SurrogacyCriteria  # noqa: E402

AXIS_LABEL = {OutcomeKind.TR: "log OR (TR)", OutcomeKind.PFS: "log HR (PFS)", OutcomeKind.OS: "log HR (OS)"}


def _save(fig, path: str | Path) -> None:
    # fixed hash salt and no date keep the SVG byte-identical across runs
    with plt.rc_context({"svg.hashsalt": "mvsurrogacy"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def scatter(studies: Sequence[StudyEffects], crit: SurrogacyCriteria, path: str | Path) -> None:
    """Observed effects on the surrogate vs the final outcome, marker area
    proportional to inverse variance, with the posterior-mean regression line."""
    s, f = crit.pair
    both = [st for st in studies if st.has(s) and st.has(f)]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    if both:
        x = np.array([st.effect[s] for st in both])
        y = np.array([st.effect[f] for st in both])
        w = np.array([1.0 / st.var[f] for st in both])
        ax.scatter(x, y, s=20 + 180 * w / w.max(), facecolors="none", edgecolors="tab:blue")
        grid = np.linspace(x.min(), x.max(), 50)
        ax.plot(grid, crit.intercept.mean + crit.slope.mean * grid, color="tab:red", lw=1.2)
    ax.axhline(0, color="grey", lw=0.5)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_xlabel(AXIS_LABEL[s])
    ax.set_ylabel(AXIS_LABEL[f])
    ax.set_title(f"{crit.pair_label} ({crit.model_dim}D): slope {crit.slope.mean:.2f} "
                 f"[{crit.slope.lo:.2f}, {crit.slope.hi:.2f}]", fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def forest(preds: Sequence[PredictionResult], path: str | Path, title: str = "") -> None:
    """Observed effect with its 95% CI next to the predicted interval."""
    preds = sorted(preds, key=lambda p: p.study_id)
    n = len(preds)
    fig, ax = plt.subplots(figsize=(5.5, 0.25 * n + 1.2))
    pos = np.arange(n)[::-1]
    for yv, p in zip(pos, preds):
        lo, hi = p.observed_interval
        ax.plot([lo, hi], [yv + 0.15] * 2, color="black", lw=1)
        ax.plot(p.observed, yv + 0.15, "s", color="black", ms=3)
        lo, hi = p.predicted_interval
        colour = "tab:blue" if p.covered else "tab:red"
        ax.plot([lo, hi], [yv - 0.15] * 2, color=colour, lw=1)
        ax.plot(p.predicted_mean, yv - 0.15, "o", color=colour, ms=3)
    ax.set_yticks(pos)
    ax.set_yticklabels([p.study_id for p in preds], fontsize=6)
    ax.axvline(0, color="grey", lw=0.5)
    ax.set_xlabel("log HR")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
