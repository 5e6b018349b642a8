"""Command-line entry point: fit, cv, ipd-corr, simulate and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import crossval, diagnostics, plots, surrogacy
from .data import (
    PUBLISHED_WITHIN_CORRELATIONS, OutcomeKind, StudyEffects, TherapyClass, WithinCorrelations,
    parse_ipd_csv, parse_study_csv, write_study_csv,
)
from .ipd import BootstrapConfig, bootstrap_effects
from .model import McmcConfig, ModelSpec, ModelStructure, PriorSpec
from .sampler import fit, load_chains, save_chains
from .simulate import TrueParams, generate, recovery_params, write_truth

log = logging.getLogger("mvsurrogacy")

PAIRS = {
    "tr-pfs": (OutcomeKind.TR, OutcomeKind.PFS),
    "tr-os": (OutcomeKind.TR, OutcomeKind.OS),
    "pfs-os": (OutcomeKind.PFS, OutcomeKind.OS),
}

# Presets are plain flag lists inserted before the user's own flags, so any
# explicit flag given afterwards overrides them.
PRESETS = {
    "trivariate": ["--dim", "3", "--structure", "main", "--prior", "informative"],
    "bivariate-pfs-os": ["--dim", "2", "--pair", "pfs-os", "--prior", "informative"],
    "bivariate-tr-pfs": ["--dim", "2", "--pair", "tr-pfs", "--prior", "informative"],
    "bivariate-tr-os": ["--dim", "2", "--pair", "tr-os", "--prior", "informative"],
    "wide-prior": ["--prior", "wide"],
    "no-crossover": ["--filter", "no-crossover"],
    "two-or-more-outcomes": ["--filter", "min-outcomes=2"],
    "alt-structure": ["--dim", "3", "--structure", "alt"],
    "unstructured": ["--dim", "3", "--structure", "unstructured"],
    "quick": ["--iterations", "25000", "--burn-in", "15000", "--thin", "5"],
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def expand_presets(argv: Sequence[str]) -> list[str]:
    """Replace every ``--preset NAME`` by its flags, placed directly after
    the subcommand so that explicit flags take precedence."""
    argv = list(argv)
    if not argv:
        return argv
    head, rest = argv[:1], argv[1:]
    expanded, kept = [], []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if tok == "--preset" or tok.startswith("--preset="):
            if "=" in tok:
                name = tok.split("=", 1)[1]
                i += 1
            else:
                if i + 1 >= len(rest):
                    raise CliError("--preset needs a name")
                name = rest[i + 1]
                i += 2
            if name not in PRESETS:
                raise CliError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
            expanded += PRESETS[name]
            continue
        kept.append(tok)
        i += 1
    return head + expanded + kept


def _rho_w(text: str | None) -> WithinCorrelations:
    """``a,b,c`` = (PFS-OS, TR-OS, TR-PFS) within-study correlations."""
    if text is None:
        return PUBLISHED_WITHIN_CORRELATIONS
    try:
        r23, r13, r12 = (float(v) for v in text.split(","))
    except ValueError:
        raise CliError("--rho-w expects three comma-separated numbers: PFS-OS,TR-OS,TR-PFS") from None
    return WithinCorrelations(rho_12=r12, rho_13=r13, rho_23=r23)


def apply_filters(studies: list[StudyEffects], filters: Sequence[str], exclude: Sequence[str]) -> list[StudyEffects]:
    out = list(studies)
    for flt in filters:
        key, _, val = flt.partition("=")
        if key == "class":
            try:
                cls = TherapyClass(val)
            except ValueError:
                raise CliError(f"unknown therapy class {val!r}") from None
            out = [s for s in out if s.therapy_class is cls]
        elif key == "no-crossover":
            out = [s for s in out if s.allows_crossover is False]
        elif key == "complete":
            out = [s for s in out if len(s.observed) == 3]
        elif key == "min-outcomes":
            try:
                k = int(val)
            except ValueError:
                raise CliError("min-outcomes expects an integer") from None
            out = [s for s in out if len(s.observed) >= k]
        else:
            raise CliError(f"unknown filter {flt!r}")
    unknown = set(exclude) - {s.study_id for s in studies}
    if unknown:
        raise CliError(f"--exclude-study refers to unknown studies {sorted(unknown)}")
    out = [s for s in out if s.study_id not in set(exclude)]
    if not out:
        raise CliError("filters matched zero studies")
    return out


def _load(args) -> list[StudyEffects]:
    path = Path(args.data)
    if not path.exists():
        raise CliError(f"data file not found: {path}")
    ing = parse_study_csv(path)
    for e in ing.errors:
        log.warning("row %d (%s): %s", e.line, e.study_id, e.message)
    log.info(ing.summary())
    return apply_filters(ing.studies, args.filter, args.exclude_study)


def _prior(name: str) -> PriorSpec:
    return PriorSpec.wide() if name == "wide" else PriorSpec()


def _spec(args) -> ModelSpec:
    prior = _prior(args.prior)
    if args.dim == 2:
        if args.structure != "main":
            raise CliError("--structure applies to --dim 3 only")
        return ModelSpec.bivariate(*PAIRS[args.pair], prior=prior)
    return ModelSpec.trivariate(ModelStructure(args.structure), prior)


def _config(args) -> McmcConfig:
    return McmcConfig(iterations=args.iterations, burn_in=args.burn_in, thin=args.thin,
                      chains=args.chains, seed=args.seed)


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="study-level CSV")
    p.add_argument("--filter", action="append", default=[],
                   help="class=<c>, no-crossover, complete or min-outcomes=N (repeatable)")
    p.add_argument("--exclude-study", action="append", default=[], help="drop a study (repeatable)")
    p.add_argument("--rho-w", help="within-study correlations PFS-OS,TR-OS,TR-PFS (default 0.513,-0.333,-0.433)")


def _add_model_flags(p, dims=True):
    if dims:
        p.add_argument("--dim", type=int, choices=(2, 3), default=3)
        p.add_argument("--pair", choices=sorted(PAIRS), default="pfs-os", help="outcome pair for --dim 2")
    p.add_argument("--structure", choices=[s.value for s in ModelStructure], default="main")
    p.add_argument("--prior", choices=("informative", "wide"), default="informative")


def _add_mcmc_flags(p):
    d = McmcConfig()
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--burn-in", type=int, default=d.burn_in)
    p.add_argument("--thin", type=int, default=d.thin)
    p.add_argument("--chains", type=int, default=d.chains)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--workers", type=int, default=1, help="threads for independent chains or refits")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mvsurrogacy", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model; write chains, criteria and diagnostics")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_mcmc_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--criteria", action=argparse.BooleanOptionalAction, default=True,
                   help="write criteria.csv (default on)")
    p.add_argument("--preset", action="append", help="named flag bundle: " + ", ".join(sorted(PRESETS)))

    p = sub.add_parser("cv", help="leave-one-out prediction of the final outcome")
    _add_data_flags(p)
    _add_model_flags(p, dims=False)
    _add_mcmc_flags(p)
    p.add_argument("--model", choices=("biv2", "tri"), required=True)
    p.add_argument("--target", choices=("os", "pfs"), default="os")
    p.add_argument("--studies", help="comma-separated study ids to score (default: all reporting the target)")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", action="append")

    p = sub.add_parser("ipd-corr", help="within-study correlations from patient data by bootstrap")
    p.add_argument("--ipd", required=True)
    p.add_argument("--resamples", type=int, default=BootstrapConfig().n_resamples)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="draw a synthetic study-level dataset")
    p.add_argument("--params", help="JSON file of generating parameters (default: reference landscape)")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="study CSV to write; truth.json goes alongside")

    p = sub.add_parser("report", help="bundle criteria, diagnostics and CV tables; draw SVG plots")
    p.add_argument("--dir", required=True, help="output directory of a fit run")
    p.add_argument("--cv-dir", help="directory holding cv_*.csv (default: --dir)")
    return ap


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_fit(args) -> dict:
    studies = _load(args)
    spec = _spec(args)
    cfg = _config(args)
    chains = fit(studies, _rho_w(args.rho_w), spec, cfg, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rho_w = _rho_w(args.rho_w)
    save_chains(chains, out / "chains", {"rho_w": [rho_w.rho_12, rho_w.rho_13, rho_w.rho_23]})
    write_study_csv(studies, out / "data.csv")
    written = ["chains", "data.csv"]
    if args.criteria:
        rows = [surrogacy.criteria(chains, pr) for pr in surrogacy.available_pairs(spec)]
        surrogacy.write_criteria_csv(rows, out / "criteria.csv")
        written.append("criteria.csv")
    if chains.n_draws >= diagnostics.MIN_DRAWS:
        _write_json(diagnostics.assess(chains).to_dict(), out / "diagnostics.json")
        written.append("diagnostics.json")
    else:
        log.warning("fewer than %d draws per chain; diagnostics skipped", diagnostics.MIN_DRAWS)
    return {"command": "fit", "model": spec.label, "studies": len(chains.study_ids), "written": written}


def cmd_cv(args) -> dict:
    studies = _load(args)
    target = OutcomeKind.parse(args.target)
    prior = _prior(args.prior)
    if args.model == "tri":
        spec = ModelSpec.trivariate(ModelStructure(args.structure), prior)
    else:
        surrogate = OutcomeKind.PFS if target is OutcomeKind.OS else OutcomeKind.TR
        spec = ModelSpec.bivariate(surrogate, target, prior)
    wanted = args.studies.split(",") if args.studies else None
    preds = crossval.loo_predict(studies, _rho_w(args.rho_w), spec, _config(args), target,
                                 workers=args.workers, studies=wanted)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    crossval.write_predictions_csv(preds, out / f"cv_{args.model}.csv")
    written = [f"cv_{args.model}.csv"]
    biv, tri = out / "cv_biv2.csv", out / "cv_tri.csv"
    if biv.exists() and tri.exists():
        cmp = crossval.compare_widths(crossval.read_predictions_csv(biv), crossval.read_predictions_csv(tri))
        crossval.write_comparison_csv(cmp, out / "cv_compare.csv")
        written.append("cv_compare.csv")
    covered = sum(p.covered for p in preds)
    return {"command": "cv", "model": spec.label, "predictions": len(preds), "covered": covered, "written": written}


def cmd_ipd(args) -> dict:
    path = Path(args.ipd)
    if not path.exists():
        raise CliError(f"IPD file not found: {path}")
    res = bootstrap_effects(parse_ipd_csv(path), BootstrapConfig(args.resamples, args.seed))
    c = res.correlations
    return {"rho_12": c.rho_12, "rho_13": c.rho_13, "rho_23": c.rho_23,
            "n_used": res.n_used, "n_failed": res.n_failed}


def cmd_simulate(args) -> dict:
    if args.params:
        path = Path(args.params)
        if not path.exists():
            raise CliError(f"parameter file not found: {path}")
        tp = TrueParams.from_dict(json.loads(path.read_text()))
    else:
        tp = recovery_params()
    syn = generate(tp, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_study_csv(syn.studies, out)
    write_truth(tp, out.parent / "truth.json", syn.latents, [s.study_id for s in syn.studies])
    return {"command": "simulate", "studies": len(syn.studies), "written": [out.name, "truth.json"]}


def cmd_report(args) -> dict:
    run = Path(args.dir)
    if not (run / "chains" / "meta.json").exists():
        raise CliError(f"no fit output (chains/meta.json) under {run}")
    chains = load_chains(run / "chains")
    diag = diagnostics.assess(chains)
    _write_json(diag.to_dict(), run / "diagnostics.json")
    crit = [surrogacy.criteria(chains, pr) for pr in surrogacy.available_pairs(chains.spec)]
    plot_dir = run / "plots"
    plot_dir.mkdir(exist_ok=True)
    studies = parse_study_csv(run / "data.csv").studies if (run / "data.csv").exists() else []
    figures = []
    for c in crit:
        name = f"scatter_{c.pair_label.lower()}.svg"
        plots.scatter(studies, c, plot_dir / name)
        figures.append(name)
    cv_dir = Path(args.cv_dir) if args.cv_dir else run
    cv = {}
    for model in ("biv2", "tri"):
        path = cv_dir / f"cv_{model}.csv"
        if path.exists():
            preds = crossval.read_predictions_csv(path)
            name = f"forest_{model}.svg"
            plots.forest(preds, plot_dir / name, title=f"Leave-one-out predictions ({model})")
            figures.append(name)
            cv[model] = {"n": len(preds), "covered": sum(p.covered for p in preds)}
    if (cv_dir / "cv_compare.csv").exists():
        rows = list((cv_dir / "cv_compare.csv").read_text().splitlines())
        summary = {r.split(",")[0].lower(): float(r.split(",")[3]) for r in rows if r.split(",")[0] in ("AVERAGE", "MIN", "MAX")}
        cv["width_reduction_pct"] = summary
    report = {
        "model": chains.spec.label,
        "criteria": [
            {"pair": c.pair_label, "model_dim": c.model_dim,
             "intercept": vars(c.intercept), "slope": vars(c.slope),
             "variance": vars(c.cond_variance), "r2": vars(c.r2_adjusted), "verdicts": c.verdicts}
            for c in crit
        ],
        "diagnostics": {"passed": diag.passed, "flags": diag.flags},
        "cv": cv,
        "figures": figures,
    }
    _write_json(report, run / "report.json")
    return {"command": "report", "written": ["report.json", "diagnostics.json"] + [f"plots/{f}" for f in figures]}


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "ipd-corr": cmd_ipd, "simulate": cmd_simulate, "report": cmd_report}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(expand_presets(argv))
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # reported as JSON for callers that parse stderr
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())
