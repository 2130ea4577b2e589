"""Monte Carlo grid runner and aggregation into medians and percentile CIs.

A grid is the cross product of Trust-covariate kinds, coefficient values,
error-variance fractions, and simulation seeds; each cell simulates
``n_datasets`` replicate datasets, fits every requested model, and recovers
the Trust-level coefficient per dataset. Summaries report the median and the
2.5/97.5 percentile interval across replicates, plus seed-averaged and
seed-pooled rows.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .em import EmConfig, ModelSpec, fit
from .errors import ConfigurationError, FitError, SummaryError
from .recovery import DEGENERATE_FIT, RecoveredBeta, recover_beta
from .rng import derive_seed
from .simulate import (
    BinaryTrustCovariate,
    ContinuousTrustCovariate,
    SimConfig,
    simulate_dataset,
)

BETA_T_BINARY = (0.027, 0.137, 0.250, 0.500, 0.684)
BETA_T_CONTINUOUS = (0.011, 0.053, 0.120, 0.200, 0.264)
ERROR_FRACTIONS = (0.33, 0.50, 0.67)
SEEDS = (1, 2, 3)

DEFAULT_MODELS = {
    "binary": ("1P2T", "1P3T", "1P4T"),
    "continuous": ("1P2T", "1P3T", "1P4T", "1P5T"),
}

RESULTS_HEADER = [
    "kind", "beta_t_sim", "error_frac", "seed", "model_p", "model_t",
    "dataset_id", "beta_t_rec", "excluded", "exclusion_reason",
]
SUMMARY_HEADER = [
    "kind", "beta_t_sim", "error_frac", "seed", "model_p", "model_t",
    "median", "ci_lo", "ci_hi", "n_excluded",
]


@dataclass(frozen=True)
class Cell:
    """One grid cell: a unique set of replicate datasets plus its models."""

    prototype: SimConfig  # carries kind, beta_t, error_fraction; seed unused
    seed: int
    n_datasets: int = 100
    models: tuple = ()

    def __post_init__(self):
        if self.n_datasets < 1:
            raise ConfigurationError("n_datasets must be >= 1")
        if not self.models:
            raise ConfigurationError("a cell needs at least one model")

    @property
    def kind(self) -> str:
        return self.prototype.trust_kind.kind

    @property
    def key(self) -> str:
        return (
            f"{self.kind}-b{self.prototype.beta_t:g}"
            f"-e{self.prototype.error_fraction:g}-s{self.seed}"
        )

    def dataset_config(self, index: int) -> SimConfig:
        return self.prototype.with_seed(derive_seed(self.seed, "dataset", index))


@dataclass(frozen=True)
class GridConfig:
    kinds: tuple = ("binary", "continuous")
    beta_t: dict = field(
        default_factory=lambda: {"binary": BETA_T_BINARY, "continuous": BETA_T_CONTINUOUS}
    )
    error_fractions: tuple = ERROR_FRACTIONS
    seeds: tuple = SEEDS
    n_datasets: int = 100
    models: dict = field(default_factory=lambda: dict(DEFAULT_MODELS))
    base: SimConfig = field(default_factory=SimConfig)
    quantile_convention: str = "linear"
    recovery_mode: str = "adjusted"

    def cells(self):
        for kind in self.kinds:
            trust_kind = (
                BinaryTrustCovariate() if kind == "binary" else ContinuousTrustCovariate()
            )
            models = tuple(ModelSpec.from_label(m) for m in self.models[kind])
            for beta_t in self.beta_t[kind]:
                for frac in self.error_fractions:
                    for seed in self.seeds:
                        proto = replace(
                            self.base,
                            trust_kind=trust_kind,
                            beta_t=beta_t,
                            error_fraction=frac,
                            seed=0,
                        )
                        yield Cell(
                            prototype=proto,
                            seed=seed,
                            n_datasets=self.n_datasets,
                            models=models,
                        )

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "beta_t": {k: list(v) for k, v in self.beta_t.items()},
            "error_fractions": list(self.error_fractions),
            "seeds": list(self.seeds),
            "n_datasets": self.n_datasets,
            "models": {k: list(v) for k, v in self.models.items()},
            "base": self.base.to_dict(),
            "quantile_convention": self.quantile_convention,
            "recovery_mode": self.recovery_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        base = SimConfig.from_dict(d.pop("base")) if "base" in d else SimConfig()
        out = {}
        for key in ("kinds", "error_fractions", "seeds"):
            if key in d:
                out[key] = tuple(d.pop(key))
        for key in ("beta_t", "models"):
            if key in d:
                out[key] = {k: tuple(v) for k, v in d.pop(key).items()}
        return cls(base=base, **out, **d)


@dataclass(frozen=True)
class CellSummary:
    kind: str
    beta_t_sim: float
    error_frac: float
    seed: str
    model_p: int
    model_t: int
    median: float
    ci_lo: float
    ci_hi: float
    n_excluded: int

    def __post_init__(self):
        if not self.ci_lo <= self.median <= self.ci_hi:
            raise SummaryError("percentile interval must bracket the median")


def summarize(values, method: str = "linear") -> tuple[float, float, float]:
    """Median plus 2.5/97.5 percentiles with interpolation between order stats."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise SummaryError("cannot summarize an empty result set")
    lo, med, hi = np.quantile(values, [0.025, 0.5, 0.975], method=method)
    return float(med), float(lo), float(hi)


def average_over_seeds(summaries) -> CellSummary:
    """Endpoint-wise mean of per-seed summaries for one cell parameterization."""
    summaries = list(summaries)
    keys = {
        (s.kind, s.beta_t_sim, s.error_frac, s.model_p, s.model_t) for s in summaries
    }
    if len(keys) != 1:
        raise ConfigurationError("summaries mix different cell parameters")
    return CellSummary(
        kind=summaries[0].kind,
        beta_t_sim=summaries[0].beta_t_sim,
        error_frac=summaries[0].error_frac,
        seed="avg",
        model_p=summaries[0].model_p,
        model_t=summaries[0].model_t,
        median=float(np.mean([s.median for s in summaries])),
        ci_lo=float(np.mean([s.ci_lo for s in summaries])),
        ci_hi=float(np.mean([s.ci_hi for s in summaries])),
        n_excluded=int(sum(s.n_excluded for s in summaries)),
    )


def run_cell(cell: Cell, em: EmConfig, recovery_mode: str = "adjusted"):
    """Simulate, fit, and recover for every (dataset, model) in a cell.

    Fit failures never abort the cell; they are recorded as excluded
    datasets with a degenerate-fit reason.
    """
    results: dict[str, list[RecoveredBeta]] = {m.label: [] for m in cell.models}
    for d in range(cell.n_datasets):
        dataset = simulate_dataset(cell.dataset_config(d))
        for model in cell.models:
            model_em = replace(em, seed=derive_seed(em.seed, "fit", cell.seed, d, model.label))
            try:
                fitted = fit(dataset, model, model_em)
                recovered = recover_beta(fitted, dataset, mode=recovery_mode)
            except FitError:
                recovered = RecoveredBeta.exclude(DEGENERATE_FIT)
            results[model.label].append(recovered)
    return results


def cell_rows(cell: Cell, em: EmConfig, recovery_mode: str = "adjusted"):
    """run_cell flattened into results.csv row dicts."""
    results = run_cell(cell, em, recovery_mode)
    rows = []
    for model in cell.models:
        for d, rec in enumerate(results[model.label]):
            rows.append(
                {
                    "kind": cell.kind,
                    "beta_t_sim": cell.prototype.beta_t,
                    "error_frac": cell.prototype.error_fraction,
                    "seed": cell.seed,
                    "model_p": model.n_patient_classes,
                    "model_t": model.n_trust_classes,
                    "dataset_id": d,
                    "beta_t_rec": "" if rec.excluded else repr(float(rec.value)),
                    "excluded": int(rec.excluded),
                    "exclusion_reason": rec.exclusion_reason or "",
                }
            )
    return rows


def summarize_rows(rows, method: str = "linear"):
    """Aggregate results rows into per-seed, seed-averaged, and pooled summaries."""
    by_cell: dict[tuple, list] = {}
    for row in rows:
        key = (
            row["kind"],
            float(row["beta_t_sim"]),
            float(row["error_frac"]),
            str(row["seed"]),
            int(row["model_p"]),
            int(row["model_t"]),
        )
        by_cell.setdefault(key, []).append(row)

    per_seed = []
    for key in sorted(by_cell):
        cell_rows_ = by_cell[key]
        values = [float(r["beta_t_rec"]) for r in cell_rows_ if not int(r["excluded"])]
        n_excluded = sum(int(r["excluded"]) for r in cell_rows_)
        if not values:
            continue  # fully excluded cell: no summary row
        med, lo, hi = summarize(values, method)
        per_seed.append(
            CellSummary(
                kind=key[0], beta_t_sim=key[1], error_frac=key[2], seed=key[3],
                model_p=key[4], model_t=key[5],
                median=med, ci_lo=lo, ci_hi=hi, n_excluded=n_excluded,
            )
        )

    by_param: dict[tuple, list] = {}
    for s in per_seed:
        by_param.setdefault((s.kind, s.beta_t_sim, s.error_frac, s.model_p, s.model_t), []).append(s)
    averaged = [average_over_seeds(group) for _, group in sorted(by_param.items())]

    pooled = []
    for param_key in sorted(by_param):
        kind, beta_t, frac, p, t = param_key
        values = [
            float(r["beta_t_rec"])
            for r in rows
            if (
                r["kind"] == kind
                and float(r["beta_t_sim"]) == beta_t
                and float(r["error_frac"]) == frac
                and int(r["model_p"]) == p
                and int(r["model_t"]) == t
                and not int(r["excluded"])
            )
        ]
        med, lo, hi = summarize(values, method)
        pooled.append(
            CellSummary(
                kind=kind, beta_t_sim=beta_t, error_frac=frac, seed="pooled",
                model_p=p, model_t=t, median=med, ci_lo=lo, ci_hi=hi,
                n_excluded=sum(s.n_excluded for s in by_param[param_key]),
            )
        )
    return per_seed + averaged + pooled


def _summary_row_dict(s: CellSummary) -> dict:
    return {
        "kind": s.kind,
        "beta_t_sim": repr(s.beta_t_sim),
        "error_frac": repr(s.error_frac),
        "seed": s.seed,
        "model_p": s.model_p,
        "model_t": s.model_t,
        "median": repr(s.median),
        "ci_lo": repr(s.ci_lo),
        "ci_hi": repr(s.ci_hi),
        "n_excluded": s.n_excluded,
    }


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_hash(grid: GridConfig, em: EmConfig) -> str:
    payload = json.dumps(
        {"grid": grid.to_dict(), "em": em.__dict__}, sort_keys=True
    ).encode()
    return hashlib.sha256(payload).hexdigest()


def run_grid(
    grid: GridConfig,
    em: EmConfig,
    workers: int = 1,
    out_dir: str = ".",
    resume: bool = True,
):
    """Execute every cell, writing results.csv, summary.csv, and a manifest.

    Per-cell part files are flushed as cells finish, so an interrupted run
    can resume (same config hash required) and only the remaining cells are
    executed. The final CSVs are assembled in a fixed order, so output is
    independent of worker count and completion order.
    """
    os.makedirs(out_dir, exist_ok=True)
    parts_dir = os.path.join(out_dir, "parts")
    os.makedirs(parts_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    digest = config_hash(grid, em)

    manifest = {
        "config_hash": digest,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "finished": None,
        "completed": [],
    }
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            previous = json.load(fh)
        if previous.get("config_hash") != digest:
            raise ConfigurationError(
                "existing manifest was produced by a different configuration; "
                "refusing to resume"
            )
        if resume:
            manifest["completed"] = previous.get("completed", [])
            manifest["started"] = previous.get("started", manifest["started"])

    cells = list(grid.cells())
    done = set(manifest["completed"])
    pending = [c for c in cells if c.key not in done or not os.path.exists(
        os.path.join(parts_dir, c.key + ".csv")
    )]

    def _record(cell_key, rows):
        write_csv(os.path.join(parts_dir, cell_key + ".csv"), RESULTS_HEADER, rows)
        if cell_key not in manifest["completed"]:
            manifest["completed"].append(cell_key)
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2)

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                c.key: pool.submit(cell_rows, c, em, grid.recovery_mode)
                for c in pending
            }
            for key, future in futures.items():
                _record(key, future.result())
    else:
        for cell in pending:
            _record(cell.key, cell_rows(cell, em, grid.recovery_mode))

    all_rows = []
    for cell in cells:  # fixed grid order, independent of completion order
        all_rows.extend(read_csv(os.path.join(parts_dir, cell.key + ".csv")))
    results_path = os.path.join(out_dir, "results.csv")
    write_csv(results_path, RESULTS_HEADER, all_rows)

    summaries = summarize_rows(all_rows, grid.quantile_convention)
    summary_path = os.path.join(out_dir, "summary.csv")
    write_csv(summary_path, SUMMARY_HEADER, [_summary_row_dict(s) for s in summaries])

    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["quantile_convention"] = grid.quantile_convention
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return results_path, summary_path


def pattern_checks(summaries) -> dict[str, bool]:
    """Qualitative recovery patterns expected of a full-scale run."""
    avg = {
        (s.kind, s.beta_t_sim, s.error_frac, s.model_t): s
        for s in summaries
        if s.seed == "avg"
    }
    checks = {}
    widths_ok = []
    for beta_t in (0.137, 0.250, 0.500, 0.684):
        for t in (2, 3, 4):
            lo_frac = avg.get(("binary", beta_t, 0.33, t))
            hi_frac = avg.get(("binary", beta_t, 0.67, t))
            if lo_frac and hi_frac:
                widths_ok.append(
                    (hi_frac.ci_hi - hi_frac.ci_lo) >= (lo_frac.ci_hi - lo_frac.ci_lo)
                )
    if widths_ok:
        checks["binary_ci_widens_with_error"] = all(widths_ok)
    order_ok = []
    for beta_t in (0.120, 0.200, 0.264):
        for frac in (0.33, 0.50, 0.67):
            t2 = avg.get(("continuous", beta_t, frac, 2))
            t5 = avg.get(("continuous", beta_t, frac, 5))
            if t2 and t5:
                order_ok.append(t5.median >= t2.median)
    if order_ok:
        checks["continuous_more_classes_less_attenuation"] = all(order_ok)
    return checks
