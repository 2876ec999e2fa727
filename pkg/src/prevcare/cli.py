"""Command-line entry point.

Every command is a function of (config, seed) and writes a ``manifest.json``
listing the effective config and a sha256 of each output; passing that
manifest back as ``--config`` reproduces the outputs byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, econ
from .cohort import Panel, generate_synthetic_cohort, summary, write_panel
from .config import ConfigError
from .effect import fit_causal_forest, effect_design
from .risk import panel_matrix, train_risk_model, training_rows
from .sensitivity import (CONVERGENCE_HEADER, IMPORTANCE_HEADER, NOISE_HEADER, OVB_HEADER, cate_subgroups,
                          convergence_study, feature_importance, noise_robustness_study, ovb_sensitivity)
from .simulation import (ABLATION_POLICIES, InsufficientDataError, ModelCache, ablation_suite,
                         budget_sweep, load_scenario_panel, run_scenario, seeded, write_table)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4


class PanelIOError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _write_manifest(doc: dict, command: str, arguments: dict, outputs: list, path: Path) -> None:
    base = path.parent
    man = dict(doc)
    man["manifest"] = {
        "command": command,
        "arguments": arguments,
        "version": __version__,
        "outputs": {str(p.relative_to(base)) if p.is_relative_to(base) else str(p): _sha256(p)
                    for p in outputs},
    }
    _write_json(man, path)


def _rows_csv(rows: list, header, path: Path) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(r[h], ".9g") if isinstance(r[h], float) else r[h] for h in header])


def _scenario_doc(doc: dict, seed):
    scn = cfgmod.scenario_config(doc)
    if seed is not None:
        scn = seeded(scn, seed)
    d = cfgmod.with_overrides(doc)
    sc = scn.to_dict()
    if isinstance(doc.get("scenario"), dict) and doc["scenario"].get("cohort") is None and "cohort" in doc:
        # keep the cohort at top level as in the input
        sc["cohort"] = None
        d["cohort"] = asdict(scn.cohort)
    d["scenario"] = sc
    return scn, d


def _load_panel(scn) -> Panel:
    try:
        return load_scenario_panel(scn)
    except OSError:
        raise
    except ValueError as e:
        if scn.panel_path is not None:
            raise PanelIOError(str(e)) from e
        raise


# --------------------------------------------------------------------------- commands

def cmd_generate(args, doc) -> int:
    gen = cfgmod.cohort_config(doc)
    if args.seed is not None:
        gen.seed = int(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    panel = generate_synthetic_cohort(gen)
    write_panel(panel, out)
    stats = summary(panel)
    print(json.dumps(stats, indent=1, sort_keys=True))
    schema = out.with_name(out.name + ".schema.json")
    _write_manifest(cfgmod.with_overrides(doc, cohort=gen.to_dict()), "generate", {},
                    [out, schema], out.with_name(out.name + ".manifest.json"))
    return EXIT_OK


def cmd_simulate(args, doc) -> int:
    scn, eff = _scenario_doc(doc, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel = _load_panel(scn)
    res = run_scenario(scn, panel)
    summ = econ.summarize(res, scn.cost_params, scn.bootstrap_samples, scn.seeds.bootstrap)
    files = [out / "result.csv", out / "plan.csv", out / "summary.json"]
    res.write_csv(files[0])
    res.meta["plan"].write_csv(files[1])
    _write_json(summ, files[2])
    print(json.dumps({k: summ[k] for k in ("policy", "budget_k", "prevented_onsets", "cost_savings")},
                     sort_keys=True))
    _write_manifest(eff, "simulate", {}, files, out / "manifest.json")
    return EXIT_OK


def cmd_sweep(args, doc) -> int:
    scn, eff = _scenario_doc(doc, args.seed)
    if args.k:
        try:
            ks = [int(v) for v in args.k.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
        eff["sweep"] = {"k_values": ks}
    sw = cfgmod.sweep_settings(eff)
    eff["sweep"] = asdict(sw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel = _load_panel(scn)
    rows = budget_sweep(scn, sw.k_values, panel, ModelCache())
    path = out / "sweep.csv"
    write_table(rows, path)
    _write_manifest(eff, "sweep", {}, [path], out / "manifest.json")
    return EXIT_OK


def cmd_ablation(args, doc) -> int:
    scn, eff = _scenario_doc(doc, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_suite(scn, _load_panel(scn), ModelCache(), ABLATION_POLICIES)
    path = out / "ablation.csv"
    write_table(rows, path)
    _write_manifest(eff, "ablation", {}, [path], out / "manifest.json")
    return EXIT_OK


def _study_noise(scn, eff, s, seed, threads, out):
    if seed is not None and s.seeds is not None:
        s.seeds = [int(seed)]
    rows = noise_robustness_study(scn, s.sigmas, s.seeds, threads)
    path = out / "noise.csv"
    _rows_csv(rows, NOISE_HEADER, path)
    return [path]


def _study_convergence(scn, eff, s, seed, threads, out):
    if seed is not None:
        s.seeds = [int(seed)]
    rows = convergence_study(s, threads)
    path = out / "convergence.csv"
    _rows_csv(rows, CONVERGENCE_HEADER, path)
    return [path]


def _study_ovb(scn, eff, s, seed, threads, out):
    panel = _load_panel(scn)
    rows = [dict(group="all", **r) for r in ovb_sensitivity(panel, s.covariates, s.benchmark,
                                                             s.multipliers, alpha=s.alpha)]
    lab = np.flatnonzero(panel.labeled())
    forest = fit_causal_forest(panel, scn.forest, scn.seeds.model, pooled_years=scn.pooled_years)
    cate = np.clip(forest.predict_raw(effect_design(panel, lab, "full", scn.pooled_years)), 0, 1)
    X = panel_matrix(panel, lab, "full")
    labels = cate_subgroups(cate, X, s.n_groups)
    for g in sorted(set(labels.tolist())):
        try:
            part = ovb_sensitivity(panel, s.covariates, s.benchmark, s.multipliers,
                                   rows=lab[labels == g], alpha=s.alpha)
        except ValueError as e:
            print(f"warning: group {g}: {e}", file=sys.stderr)
            continue
        rows += [dict(group=g, **r) for r in part]
    path = out / "ovb.csv"
    _rows_csv(rows, OVB_HEADER, path)
    return [path]


def _study_importance(scn, eff, s, seed, threads, out):
    if seed is not None:
        s.seed = int(seed)
    panel = _load_panel(scn)
    rs = scn.risk
    model = train_risk_model(panel, rs.learner, rs.search, scn.seeds.model,
                             hyperparameters=rs.hyperparameters, smote=rs.smote,
                             calibration_folds=rs.calibration_folds)
    rows_idx = training_rows(panel)
    X = panel_matrix(panel, rows_idx, model.feature_view)
    ranked = feature_importance(model, (X, panel.onset_next[rows_idx]), s.method, s.seed,
                                n_repeats=s.n_repeats, n_permutations=s.n_permutations,
                                n_explain=s.n_explain, n_background=s.n_background)
    rows = [{"rank": i + 1, "feature": f, "importance": v, "sign": sg} for i, (f, v, sg) in enumerate(ranked)]
    path = out / "importance.csv"
    _rows_csv(rows, IMPORTANCE_HEADER, path)
    return [path]


_STUDIES = {"noise": _study_noise, "convergence": _study_convergence, "ovb": _study_ovb,
            "importance": _study_importance}


def cmd_sensitivity(args, doc) -> int:
    study = args.study or doc.get("manifest", {}).get("arguments", {}).get("study")
    if study not in _STUDIES:
        raise ConfigError(f"unknown study {study!r}; expected one of {tuple(_STUDIES)}")
    settings = cfgmod.study_settings(doc, study)
    if study == "convergence":
        scn, eff = None, cfgmod.with_overrides(doc)
    else:
        scn, eff = _scenario_doc(doc, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _STUDIES[study](scn, eff, settings, args.seed, args.threads, out)
    sens = dict(eff.get("sensitivity", {}))
    sens[study] = asdict(settings)
    eff["sensitivity"] = sens
    _write_manifest(eff, "sensitivity", {"study": study}, files, out / "manifest.json")
    return EXIT_OK


# --------------------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prevcare", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="JSON config, manifest or builtin:NAME")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        sp.add_argument("--threads", type=int, default=1, help="maximum worker processes")

    common(sub.add_parser("generate", help="write a synthetic panel CSV"), "output CSV path")
    common(sub.add_parser("simulate", help="run one scenario"), "output directory")
    sw = sub.add_parser("sweep", help="run the scenario over several budgets")
    common(sw, "output directory")
    sw.add_argument("--k", default=None, help="comma-separated budgets, e.g. 1000,5000,10000")
    common(sub.add_parser("ablation", help="compare model variants"), "output directory")
    se = sub.add_parser("sensitivity", help="run a robustness study")
    common(se, "output directory")
    se.add_argument("--study", default=None, help="noise, convergence, ovb or importance")
    return p


_COMMANDS = {"generate": cmd_generate, "simulate": cmd_simulate, "sweep": cmd_sweep,
             "ablation": cmd_ablation, "sensitivity": cmd_sensitivity}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        doc = cfgmod.read_document(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        return _COMMANDS[args.command](args, doc)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as e:
        print(f"insufficient data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, PanelIOError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
