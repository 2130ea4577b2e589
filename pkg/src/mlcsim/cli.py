"""Command-line front end: simulate | fit | recover | grid | summarize | plot-data.

Configs are JSON, tabular outputs are CSV. Exit codes distinguish validation
errors (2), I/O errors (3), convergence failures (4), and internal errors (5).
Set MLC_LOG to a logging level name to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .em import EmConfig, FitResult, ModelSpec, fit
from .errors import ConfigurationError, FitError, MlcsimError, ParameterError, SummaryError
from .harness import (
    GridConfig,
    SUMMARY_HEADER,
    read_csv,
    run_grid,
    summarize_rows,
    write_csv,
)
from .recovery import recover_beta
from .simulate import Dataset, SimConfig, simulate_dataset

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_CONVERGENCE = 4
EXIT_INTERNAL = 5

log = logging.getLogger("mlcsim")

FIGURE_IDS = ("fig2", "fig3", "fig4", "fig5")
_FIGURE_FRACTIONS = {"fig3": 0.33, "fig4": 0.50, "fig5": 0.67}


def _configure_logging():
    level = os.environ.get("MLC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _dataset_paths(data_dir):
    return os.path.join(data_dir, "dataset.csv"), os.path.join(data_dir, "truth.json")


def _em_config(args) -> EmConfig:
    return EmConfig(
        n_restarts=args.restarts,
        max_iter=args.max_iter,
        rel_tol=args.tol,
        seed=args.seed,
    )


def _add_em_flags(parser):
    parser.add_argument("--restarts", type=int, default=20)
    parser.add_argument("--max-iter", type=int, default=500)
    parser.add_argument("--tol", type=float, default=1e-8)
    parser.add_argument("--seed", type=int, default=0, help="EM restart seed")


def cmd_simulate(args) -> int:
    config = SimConfig.from_dict(_load_json(args.config)) if args.config else SimConfig()
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    dataset = simulate_dataset(config)
    os.makedirs(args.out, exist_ok=True)
    csv_path, sidecar_path = _dataset_paths(args.out)
    dataset.to_files(csv_path, sidecar_path)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(config.to_json())
    log.info("wrote %d patients to %s", dataset.n_patients, csv_path)
    return EXIT_OK


def cmd_fit(args) -> int:
    dataset = Dataset.from_files(*_dataset_paths(args.data))
    spec = ModelSpec.from_label(args.model)
    try:
        result = fit(dataset, spec, _em_config(args))
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    with open(args.out, "w") as fh:
        fh.write(result.to_json())
    return EXIT_OK if result.converged else EXIT_CONVERGENCE


def cmd_recover(args) -> int:
    dataset = Dataset.from_files(*_dataset_paths(args.data))
    with open(args.fit) as fh:
        result = FitResult.from_json(fh.read())
    recovered = recover_beta(result, dataset, mode=args.mode,
                             weight_by_size=args.weight_by_size)
    payload = {
        "beta_t_rec": None if recovered.excluded else recovered.value,
        "intercept": None if recovered.excluded else recovered.intercept,
        "excluded": recovered.excluded,
        "exclusion_reason": recovered.exclusion_reason,
        "beta_t_sim": dataset.truth.beta_t,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        print(text)
    return EXIT_OK


def cmd_grid(args) -> int:
    grid = GridConfig.from_dict(_load_json(args.config)) if args.config else GridConfig()
    if args.models:
        labels = tuple(m.strip() for m in args.models.split(","))
        for label in labels:
            ModelSpec.from_label(label)  # validate early
        grid = replace(grid, models={k: labels for k in grid.models})
    if args.quantile_convention:
        grid = replace(grid, quantile_convention=args.quantile_convention)
    em = _em_config(args)
    if args.seed_override is not None:
        em = replace(em, seed=args.seed_override)
    results_path, summary_path = run_grid(
        grid, em, workers=args.workers, out_dir=args.out, resume=not args.no_resume
    )
    log.info("wrote %s and %s", results_path, summary_path)
    return EXIT_OK


def cmd_summarize(args) -> int:
    rows = read_csv(args.results)
    if not rows:
        raise SummaryError("results file is empty")
    summaries = summarize_rows(rows, args.quantile_convention or "linear")
    from .harness import _summary_row_dict

    write_csv(args.out, SUMMARY_HEADER, [_summary_row_dict(s) for s in summaries])
    return EXIT_OK


def _figure_rows(summaries, figure):
    avg = [s for s in summaries if s["seed"] == "avg"]
    if figure == "fig2":
        rows = []
        cells = {}
        for s in avg:
            if s["kind"] != "binary":
                continue
            key = (float(s["beta_t_sim"]), float(s["error_frac"]))
            cells.setdefault(key, []).append(s)
        for (beta_t, frac), group in sorted(cells.items()):
            # all models pooled: no distinction between Trust-class counts
            rows.append({
                "error_frac": repr(frac),
                "simulated": repr(beta_t),
                "median": repr(float(np.mean([float(s["median"]) for s in group]))),
                "ci_lo": repr(float(np.mean([float(s["ci_lo"]) for s in group]))),
                "ci_hi": repr(float(np.mean([float(s["ci_hi"]) for s in group]))),
                "equality": repr(beta_t),
            })
        return ["error_frac", "simulated", "median", "ci_lo", "ci_hi", "equality"], rows
    frac = _FIGURE_FRACTIONS[figure]
    continuous = [
        s for s in avg
        if s["kind"] == "continuous" and abs(float(s["error_frac"]) - frac) < 1e-9
    ]
    if not continuous:
        return None, []
    lowest = min(float(s["beta_t_sim"]) for s in continuous)
    rows = []
    for s in sorted(continuous, key=lambda s: (float(s["beta_t_sim"]), int(s["model_t"]))):
        beta_t = float(s["beta_t_sim"])
        if beta_t == lowest:
            continue  # lowest simulated value carries too few usable datasets
        rows.append({
            "simulated": repr(beta_t),
            "model_t": s["model_t"],
            "median": s["median"],
            "ci_lo": s["ci_lo"],
            "ci_hi": s["ci_hi"],
            "equality": repr(beta_t),
        })
    return ["simulated", "model_t", "median", "ci_lo", "ci_hi", "equality"], rows


def cmd_plot_data(args) -> int:
    summaries = read_csv(args.summary)
    if not summaries:
        raise SummaryError("summary file is empty")
    header, rows = _figure_rows(summaries, args.figure)
    if not rows:
        raise SummaryError(f"summary has no rows usable for {args.figure}")
    write_csv(args.out, header, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlcsim",
        description="Simulate two-level provider datasets, fit latent class "
        "mixture models, and recover provider-level coefficients.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate one dataset")
    p.add_argument("--config", help="SimConfig JSON path (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed-override", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model to a dataset")
    p.add_argument("--data", required=True, help="directory with dataset.csv + truth.json")
    p.add_argument("--model", default="1P2T", help="model label, e.g. 1P2T")
    p.add_argument("--out", required=True, help="FitResult JSON path")
    _add_em_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("recover", help="recover the Trust-level coefficient")
    p.add_argument("--fit", required=True, help="FitResult JSON path")
    p.add_argument("--data", required=True, help="directory with dataset.csv + truth.json")
    p.add_argument("--mode", choices=("adjusted", "raw"), default="adjusted")
    p.add_argument("--weight-by-size", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("grid", help="run a Monte Carlo grid")
    p.add_argument("--config", help="GridConfig JSON path (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--models", help="comma-separated model labels, e.g. 1P2T,1P3T")
    p.add_argument("--quantile-convention")
    p.add_argument("--seed-override", type=int, help="override the EM seed")
    p.add_argument("--no-resume", action="store_true")
    _add_em_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("summarize", help="recompute summary.csv from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quantile-convention")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("plot-data", help="emit figure-ready CSV from a summary")
    p.add_argument("--summary", required=True)
    p.add_argument("--figure", required=True, choices=FIGURE_IDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigurationError, ParameterError, SummaryError, json.JSONDecodeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MlcsimError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
