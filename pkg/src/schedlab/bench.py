"""Benchmark harness: experiment configs, orchestration, rate estimation,
cumulative-sum checks, CSV/JSON emission, and the command-line interface.

Config files are YAML with a fixed schema (see the annotated example in
the README).  Exit codes: 0 success, 1 validation error, 2 training
error, 3 I/O or network error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from scipy import stats

from .data import (
    SparseDataset,
    SplitSpec,
    _seed_entropy,
    fetch_dataset,
    normalize_labels,
    parse_libsvm,
    split,
    synthetic_blobs,
)
from .errors import FetchError, TrainingError, ValidationError
from .objectives import (
    KernelObjective,
    KernelScorer,
    MlpObjective,
    Objective,
    grad_norm_sq,
)
from .optim import (
    MetricTrace,
    OptimizerKind,
    TrainConfig,
    run_warm_restarts,
    sample_output_iterate,
)
from .schedules import (
    LemmaSweep,
    ScheduleKind,
    ScheduleSpec,
    geometric_horizons,
    lemma_sweep,
)

CSV_COLUMNS = [
    "dataset", "schedule", "optimizer", "eta0", "alpha", "seed", "epoch",
    "eta_t", "train_loss", "test_accuracy", "grad_norm_sq", "wall_ms",
]

REPORT_MODES = ("last_epoch", "best_epoch", "sampled_iterate")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class DatasetConfig:
    """Where a dataset comes from and how the pool is prepared.

    Exactly one of ``synthetic``, ``path``, or ``url`` must be set.
    ``expected_*`` values are advisory: mismatches warn, never fail.
    """

    name: str
    url: str | None = None
    sha256: str | None = None
    path: str | None = None
    synthetic: dict[str, Any] | None = None
    max_examples: int | None = None
    subsample_seed: int = 0
    expected_dimension: int | None = None
    expected_train_size: int | None = None
    expected_test_size: int | None = None


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "kernel"  # kernel | mlp
    bandwidth: float = 1.0
    cache_mb: float = 512.0
    n_hidden: int = 16
    init_scale: float = 0.1
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("kernel", "mlp"):
            raise ValidationError(f"objective kind must be kernel or mlp, got {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    objective: ObjectiveConfig
    train: TrainConfig
    split: SplitSpec = SplitSpec()
    seeds: tuple[int, ...] = (0,)
    report: str = "last_epoch"
    label: str | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.report not in REPORT_MODES:
            raise ValidationError(
                f"report must be one of {REPORT_MODES}, got {self.report!r}"
            )


def _strict_kwargs(raw: dict[str, Any], allowed: set[str], where: str) -> dict:
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in {where}")
    return dict(raw)


def schedule_from_mapping(raw: dict[str, Any]) -> ScheduleSpec:
    kw = _strict_kwargs(
        raw, {"kind", "eta0", "alpha", "horizon", "milestones", "drop_factor"},
        "schedule",
    )
    if "kind" not in kw or "eta0" not in kw:
        raise ValidationError("schedule needs at least 'kind' and 'eta0'")
    try:
        kw["kind"] = ScheduleKind(kw["kind"])
    except ValueError:
        raise ValidationError(
            f"unknown schedule kind {kw['kind']!r}; valid: "
            f"{[k.value for k in ScheduleKind]}"
        ) from None
    if "milestones" in kw:
        kw["milestones"] = tuple(kw["milestones"])
    return ScheduleSpec(**kw)


def train_from_mapping(raw: dict[str, Any]) -> TrainConfig:
    allowed = {
        "optimizer", "schedule", "momentum", "batch_size", "inner_T", "outer_l",
        "adam_beta1", "adam_beta2", "adam_eps", "armijo_c", "armijo_backtrack",
        "armijo_eta_max", "plateau_factor", "plateau_patience", "eval_every",
        "grad_norm_every", "snapshot_every", "snapshot_grad_norms",
    }
    kw = _strict_kwargs(raw, allowed, "train")
    if "schedule" not in kw:
        raise ValidationError("train section needs a 'schedule' mapping")
    kw["schedule"] = schedule_from_mapping(kw["schedule"])
    if "optimizer" in kw:
        try:
            kw["optimizer_kind"] = OptimizerKind(kw.pop("optimizer"))
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    return TrainConfig(**kw)


def config_from_mapping(raw: dict[str, Any]) -> ExperimentConfig:
    kw = _strict_kwargs(
        raw,
        {"dataset", "objective", "train", "split", "seeds", "report", "label",
         "compare"},
        "experiment config",
    )
    kw.pop("compare", None)
    if "dataset" not in kw or "train" not in kw:
        raise ValidationError("config needs 'dataset' and 'train' sections")
    ds_kw = _strict_kwargs(
        kw["dataset"],
        {f.name for f in DatasetConfig.__dataclass_fields__.values()},
        "dataset",
    )
    if "name" not in ds_kw:
        raise ValidationError("dataset section needs a 'name'")
    kw["dataset"] = DatasetConfig(**ds_kw)
    obj_kw = _strict_kwargs(
        kw.get("objective", {}),
        {f.name for f in ObjectiveConfig.__dataclass_fields__.values()},
        "objective",
    )
    kw["objective"] = ObjectiveConfig(**obj_kw)
    kw["train"] = train_from_mapping(kw["train"])
    split_kw = _strict_kwargs(
        kw.get("split", {}), {"train_fraction", "seed", "shuffle"}, "split"
    )
    kw["split"] = SplitSpec(**split_kw)
    kw["seeds"] = tuple(int(s) for s in kw.get("seeds", (0,)))
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "r") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a mapping")
    return config_from_mapping(raw)


def load_compare_configs(path: str | Path) -> list[ExperimentConfig]:
    """A compare config is a run config plus a ``compare:`` list of
    schedule variants, each ``{label: ..., schedule: {...}}``."""
    with open(path, "r") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict) or "compare" not in raw:
        raise ValidationError("compare config needs a 'compare' list")
    variants = raw["compare"]
    if not isinstance(variants, list) or not variants:
        raise ValidationError("'compare' must be a non-empty list")
    base = config_from_mapping(raw)
    out = []
    for i, entry in enumerate(variants):
        kw = _strict_kwargs(entry, {"label", "schedule"}, f"compare[{i}]")
        if "schedule" not in kw:
            raise ValidationError(f"compare[{i}] needs a 'schedule'")
        spec = schedule_from_mapping(kw["schedule"])
        out.append(
            replace(
                base,
                train=replace(base.train, schedule=spec),
                label=kw.get("label", spec.kind.value),
            )
        )
    return out


def _canonical(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float):
        return repr(obj)
    return obj


def config_hash(config: ExperimentConfig) -> str:
    """Stable 16-hex-digit digest; changes whenever any field changes."""
    d = asdict(config)
    blob = json.dumps(_canonical(d), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Dataset resolution


def resolve_dataset(
    dcfg: DatasetConfig,
    offline: bool = False,
    cache_dir: str | Path | None = None,
) -> SparseDataset:
    """Load, label-normalize, and optionally subsample the example pool."""
    sources = sum(x is not None for x in (dcfg.synthetic, dcfg.path, dcfg.url))
    if sources != 1:
        raise ValidationError(
            f"dataset {dcfg.name!r} must set exactly one of synthetic/path/url"
        )
    if dcfg.synthetic is not None:
        params = dict(dcfg.synthetic)
        kind = params.pop("kind", "blobs")
        if kind != "blobs":
            raise ValidationError(f"unknown synthetic dataset kind {kind!r}")
        ds = synthetic_blobs(name=dcfg.name, **params)
    elif dcfg.path is not None:
        ds = parse_libsvm(dcfg.path, name=dcfg.name)
    else:
        local = fetch_dataset(
            dcfg.name, dcfg.url, dcfg.sha256, cache_dir=cache_dir, offline=offline
        )
        ds = parse_libsvm(local, name=dcfg.name)
    ds = normalize_labels(ds)
    if dcfg.expected_dimension is not None and ds.n_features != dcfg.expected_dimension:
        warnings.warn(
            f"dataset {dcfg.name}: dimension {ds.n_features} != expected "
            f"{dcfg.expected_dimension}", stacklevel=2,
        )
    if dcfg.max_examples is not None and dcfg.max_examples < ds.n_examples:
        rng = np.random.default_rng([_seed_entropy(dcfg.subsample_seed), 0x5AB5])
        keep = np.sort(rng.choice(ds.n_examples, dcfg.max_examples, replace=False))
        ds = ds.subset(keep, name=f"{ds.name}[{dcfg.max_examples}]")
    return ds


@dataclass
class PreparedExperiment:
    """Dataset splits plus a ready objective and evaluation hook."""

    train: SparseDataset
    test: SparseDataset
    objective: Objective
    eval_fn: Any  # x -> (train_loss, test_accuracy)


def prepare_experiment(
    config: ExperimentConfig,
    offline: bool = False,
    cache_dir: str | Path | None = None,
) -> PreparedExperiment:
    pool = resolve_dataset(config.dataset, offline=offline, cache_dir=cache_dir)
    train_ds, test_ds = split(pool, config.split)
    dcfg = config.dataset
    if (
        dcfg.expected_train_size is not None
        and train_ds.n_examples != dcfg.expected_train_size
    ):
        warnings.warn(
            f"dataset {dcfg.name}: train size {train_ds.n_examples} != expected "
            f"{dcfg.expected_train_size}", stacklevel=2,
        )
    if (
        dcfg.expected_test_size is not None
        and test_ds.n_examples != dcfg.expected_test_size
    ):
        warnings.warn(
            f"dataset {dcfg.name}: test size {test_ds.n_examples} != expected "
            f"{dcfg.expected_test_size}", stacklevel=2,
        )
    ocfg = config.objective
    if ocfg.kind == "kernel":
        objective = KernelObjective(train_ds, ocfg.bandwidth, ocfg.cache_mb)
        scorer = KernelScorer(objective, test_ds)

        def eval_fn(x: np.ndarray) -> tuple[float, float]:
            return objective.value(x), scorer.test_accuracy(x)

    else:
        objective = MlpObjective(
            train_ds, ocfg.n_hidden, ocfg.init_scale, ocfg.init_seed
        )

        def eval_fn(x: np.ndarray) -> tuple[float, float]:
            return objective.value(x), objective.accuracy(x, test_ds)

    return PreparedExperiment(train_ds, test_ds, objective, eval_fn)


# ---------------------------------------------------------------------------
# Running experiments


@dataclass(frozen=True)
class RunRecord:
    """One seed's run: per-epoch metrics plus the reported final numbers."""

    config_hash: str
    dataset: str
    schedule: str
    optimizer: str
    eta0: float
    alpha: float
    seed: int
    epoch_index: np.ndarray
    epoch_eta: np.ndarray
    epoch_train_loss: np.ndarray
    epoch_test_accuracy: np.ndarray
    epoch_grad_norm_sq: np.ndarray
    final_train_loss: float
    final_test_accuracy: float
    wall_ms: float


@dataclass(frozen=True)
class ExperimentResult:
    records: tuple[RunRecord, ...]
    errors: tuple[tuple[int, str], ...]
    summary: dict[str, Any]

    @property
    def completed(self) -> int:
        return len(self.records)


def _epoch_grad_norms(trace: MetricTrace) -> np.ndarray:
    """Last monitored per-step gradient norm inside each epoch (NaN if none)."""
    n_epochs = trace.n_epochs
    out = np.full(n_epochs, math.nan)
    if n_epochs == 0 or trace.n_steps == 0:
        return out
    spe = trace.n_steps // n_epochs
    for i in range(n_epochs):
        seg = trace.step_grad_norm_sq[i * spe : (i + 1) * spe]
        seen = seg[~np.isnan(seg)]
        if seen.size:
            out[i] = seen[-1]
    return out


def _final_metrics(
    config: ExperimentConfig,
    trace: MetricTrace,
    prep: PreparedExperiment,
    seed: int,
) -> tuple[float, float]:
    loss = trace.epoch_train_loss
    acc = trace.epoch_test_accuracy
    if config.report == "sampled_iterate":
        rng = np.random.default_rng([_seed_entropy(seed), 0x0A17])
        x_bar = sample_output_iterate(trace, rng)
        return prep.eval_fn(x_bar)
    if config.report == "best_epoch":
        valid = ~np.isnan(acc)
        if valid.any():
            best = int(np.argmax(np.where(valid, acc, -np.inf)))
            return float(loss[best]), float(acc[best])
    valid = ~np.isnan(loss)
    if valid.any():
        last = int(np.where(valid)[0][-1])
        return float(loss[last]), float(acc[last])
    return prep.eval_fn(trace.final_x)


def summarize(records: Sequence[RunRecord]) -> dict[str, Any]:
    """Across-seed mean and 95% half-width (Student t) of the final metrics."""
    out: dict[str, Any] = {"completed": len(records)}
    for key in ("final_train_loss", "final_test_accuracy"):
        vals = np.asarray([getattr(r, key) for r in records], dtype=np.float64)
        if vals.size == 0:
            out[key] = {"mean": math.nan, "half_width_95": math.nan}
            continue
        mean = float(vals.mean())
        if vals.size > 1:
            half = float(
                stats.t.ppf(0.975, vals.size - 1)
                * vals.std(ddof=1) / math.sqrt(vals.size)
            )
        else:
            half = math.nan
        out[key] = {"mean": mean, "half_width_95": half}
    return out


def run_experiment(
    config: ExperimentConfig,
    offline: bool = False,
    cache_dir: str | Path | None = None,
    prepared: PreparedExperiment | None = None,
) -> ExperimentResult:
    """Run every seed of one experiment; a failing seed is reported and
    skipped, the others continue."""
    prep = prepared or prepare_experiment(config, offline=offline, cache_dir=cache_dir)
    chash = config_hash(config)
    spec = config.train.schedule
    records: list[RunRecord] = []
    errors: list[tuple[int, str]] = []
    for seed in config.seeds:
        tc = replace(config.train, seed=seed)
        x0 = prep.objective.initial_point(seed)
        t0 = time.perf_counter()
        try:
            trace = run_warm_restarts(
                prep.objective, prep.train, tc, x0=x0, eval_fn=prep.eval_fn
            )
            final_loss, final_acc = _final_metrics(config, trace, prep, seed)
        except TrainingError as exc:
            errors.append((seed, str(exc)))
            continue
        wall_ms = (time.perf_counter() - t0) * 1e3
        if trace.n_epochs == 0:
            init_loss, init_acc = prep.eval_fn(trace.final_x)
            epoch_index = np.asarray([0], dtype=np.int64)
            epoch_eta = np.asarray([math.nan])
            epoch_loss = np.asarray([init_loss])
            epoch_acc = np.asarray([init_acc])
            epoch_gns = np.asarray([math.nan])
            final_loss, final_acc = init_loss, init_acc
        else:
            epoch_index = trace.epoch_index
            epoch_eta = trace.epoch_eta
            epoch_loss = trace.epoch_train_loss
            epoch_acc = trace.epoch_test_accuracy
            epoch_gns = _epoch_grad_norms(trace)
        records.append(
            RunRecord(
                config_hash=chash,
                dataset=prep.train.name.split("[")[0] or config.dataset.name,
                schedule=spec.kind.value,
                optimizer=config.train.optimizer_kind.value,
                eta0=spec.eta0,
                alpha=spec.alpha,
                seed=seed,
                epoch_index=epoch_index,
                epoch_eta=epoch_eta,
                epoch_train_loss=epoch_loss,
                epoch_test_accuracy=epoch_acc,
                epoch_grad_norm_sq=epoch_gns,
                final_train_loss=final_loss,
                final_test_accuracy=final_acc,
                wall_ms=wall_ms,
            )
        )
    return ExperimentResult(
        records=tuple(records),
        errors=tuple(errors),
        summary=summarize(records),
    )


# ---------------------------------------------------------------------------
# Emission


def _rows_of(records: Sequence[RunRecord]) -> list[dict[str, Any]]:
    rows = []
    for r in records:
        for i in range(r.epoch_index.size):
            rows.append({
                "dataset": r.dataset,
                "schedule": r.schedule,
                "optimizer": r.optimizer,
                "eta0": r.eta0,
                "alpha": r.alpha,
                "seed": r.seed,
                "epoch": int(r.epoch_index[i]),
                "eta_t": float(r.epoch_eta[i]),
                "train_loss": float(r.epoch_train_loss[i]),
                "test_accuracy": float(r.epoch_test_accuracy[i]),
                "grad_norm_sq": float(r.epoch_grad_norm_sq[i]),
                "wall_ms": r.wall_ms,
            })
    return rows


def _csv_cell(value: Any) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def emit(
    records: Sequence[RunRecord],
    path: str | Path,
    format: str = "csv",
) -> list[dict[str, Any]]:
    """Write per-epoch rows as CSV or JSON; returns the canonical rows.

    CSV columns are exactly ``CSV_COLUMNS``; NaN renders as an empty cell.
    JSON mirrors the rows under a ``schema_version: "1"`` envelope with
    NaN mapped to null.
    """
    rows = _rows_of(records)
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([_csv_cell(row[c]) for c in CSV_COLUMNS])
    elif format == "json":
        clean = [
            {
                k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in row.items()
            }
            for row in rows
        ]
        with open(path, "w") as f:
            json.dump({"schema_version": "1", "rows": clean}, f, indent=1)
            f.write("\n")
    else:
        raise ValidationError(f"format must be csv or json, got {format!r}")
    return rows


def read_emitted(path: str | Path) -> list[dict[str, Any]]:
    """Read back a JSON emission; returns the rows with null -> NaN."""
    with open(path, "r") as f:
        payload = json.load(f)
    if payload.get("schema_version") != "1":
        raise ValidationError(f"unsupported schema version in {path}")
    rows = payload["rows"]
    for row in rows:
        for k, v in row.items():
            if v is None:
                row[k] = math.nan
    return rows


# ---------------------------------------------------------------------------
# Schedule comparison


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    schedule: str
    eta0: float
    alpha: float
    mean_train_loss: float
    mean_test_accuracy: float
    loss_half_width: float
    accuracy_half_width: float
    per_seed_train_loss: tuple[float, ...]
    per_seed_test_accuracy: tuple[float, ...]


@dataclass(frozen=True)
class ComparisonResult:
    rows: tuple[ComparisonRow, ...]
    loss_winner: str
    accuracy_winner: str

    def to_text(self) -> str:
        lines = [
            f"{'label':<20} {'schedule':<18} {'train_loss':>12} "
            f"{'test_acc':>10}  win"
        ]
        for row in self.rows:
            marks = []
            if row.label == self.loss_winner:
                marks.append("loss")
            if row.label == self.accuracy_winner:
                marks.append("acc")
            lines.append(
                f"{row.label:<20} {row.schedule:<18} "
                f"{row.mean_train_loss:>12.6f} {row.mean_test_accuracy:>10.4f}  "
                f"{'+'.join(marks)}"
            )
        return "\n".join(lines)


def compare_schedules(
    configs: Sequence[ExperimentConfig],
    offline: bool = False,
    cache_dir: str | Path | None = None,
) -> ComparisonResult:
    """Run several configs that differ only in their schedule (and label),
    side by side on the same data, budget, and seeds."""
    if len(configs) < 2:
        raise ValidationError("need at least two configs to compare")

    def canon_without_schedule(cfg: ExperimentConfig) -> str:
        d = asdict(cfg)
        d.pop("label")
        d["train"].pop("schedule")
        return json.dumps(_canonical(d), sort_keys=True, default=str)

    baseline = canon_without_schedule(configs[0])
    for cfg in configs[1:]:
        if canon_without_schedule(cfg) != baseline:
            raise ValidationError(
                "compare_schedules requires identical dataset, optimizer, and "
                "budget; only the schedule may differ"
            )
    labels = [cfg.label or f"variant-{i}" for i, cfg in enumerate(configs)]
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate compare labels: {labels}")

    prep = prepare_experiment(configs[0], offline=offline, cache_dir=cache_dir)
    rows: list[ComparisonRow] = []
    for label, cfg in zip(labels, configs):
        result = run_experiment(cfg, prepared=prep)
        if result.errors:
            raise TrainingError(
                f"variant {label!r} failed on seeds {[s for s, _ in result.errors]}"
            )
        spec = cfg.train.schedule
        rows.append(
            ComparisonRow(
                label=label,
                schedule=spec.kind.value,
                eta0=spec.eta0,
                alpha=spec.alpha,
                mean_train_loss=result.summary["final_train_loss"]["mean"],
                mean_test_accuracy=result.summary["final_test_accuracy"]["mean"],
                loss_half_width=result.summary["final_train_loss"]["half_width_95"],
                accuracy_half_width=result.summary["final_test_accuracy"]["half_width_95"],
                per_seed_train_loss=tuple(
                    r.final_train_loss for r in result.records
                ),
                per_seed_test_accuracy=tuple(
                    r.final_test_accuracy for r in result.records
                ),
            )
        )
    loss_winner = min(rows, key=lambda r: r.mean_train_loss).label
    acc_winner = max(rows, key=lambda r: r.mean_test_accuracy).label
    return ComparisonResult(
        rows=tuple(rows), loss_winner=loss_winner, accuracy_winner=acc_winner
    )


# ---------------------------------------------------------------------------
# Convergence-rate estimation


@dataclass(frozen=True)
class RateEstimate:
    """Least-squares fit of log(gradient-norm measure) against log(T)."""

    slope: float
    intercept: float
    residual_rms: float
    t_range: tuple[int, int]
    n_points: int


def estimate_rate(
    T_values: Sequence[int],
    values: np.ndarray,
    running_min: bool = False,
) -> RateEstimate:
    """Fit ``log(v)`` against ``log(T)`` over one or more measurement series.

    ``values`` has shape (n_series, n_T) or (n_T,).  With ``running_min``
    each series is replaced by its minimum so far, which monotonizes noisy
    measurements.  Requires >= 10 points spanning >= 1.5 decades of T.
    """
    T = np.asarray(T_values, dtype=np.float64)
    V = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if T.ndim != 1 or V.shape[1] != T.size:
        raise ValidationError(
            f"values shape {V.shape} incompatible with {T.size} horizons"
        )
    if np.any(T < 1) or np.any(np.diff(T) <= 0):
        raise ValidationError("T_values must be increasing and >= 1")
    span = math.log10(T[-1] / T[0])
    if span < 1.5:
        raise ValidationError(
            f"insufficient span: need >= 1.5 decades of T, got {span:.2f}"
        )
    if V.size < 10:
        raise ValidationError(f"need >= 10 measurement points, got {V.size}")
    if running_min:
        V = np.minimum.accumulate(V, axis=1)
    if np.any(V <= 0.0) or not np.isfinite(V).all():
        raise ValidationError("measurements must be positive and finite")
    logT = np.tile(np.log(T), V.shape[0])
    logV = np.log(V).ravel()
    slope, intercept = np.polyfit(logT, logV, 1)
    resid = logV - (slope * logT + intercept)
    return RateEstimate(
        slope=float(slope),
        intercept=float(intercept),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        t_range=(int(T[0]), int(T[-1])),
        n_points=int(V.size),
    )


@dataclass(frozen=True)
class RateResult:
    estimate: RateEstimate
    T_grid: tuple[int, ...]
    per_seed: np.ndarray  # (n_seeds, n_T) measured E||grad||^2


def rate_experiment(
    config: ExperimentConfig,
    T_grid: Sequence[int] | None = None,
    draws: int = 0,
    offline: bool = False,
    cache_dir: str | Path | None = None,
) -> RateResult:
    """Measure ``E||grad f(x_bar_T)||^2`` at geometrically spaced horizons.

    One training run of max(T_grid) epochs per seed records every epoch's
    iterate; at each horizon the expectation over the step-size-weighted
    output iterate is either computed exactly from the snapshot weights
    (``draws=0``) or estimated from ``draws`` seeded draws through
    ``sample_output_iterate``.
    """
    grid = tuple(int(t) for t in (T_grid or (16, 32, 64, 128, 256, 512, 1024)))
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
        raise ValidationError(f"T grid must be increasing and >= 1, got {grid}")
    if config.train.outer_l != 1:
        raise ValidationError("rate measurement uses a single schedule cycle")
    prep = prepare_experiment(config, offline=offline, cache_dir=cache_dir)
    tc = replace(
        config.train,
        inner_T=grid[-1],
        snapshot_every=1,
        snapshot_grad_norms=(draws == 0),
        eval_every=0,
    )
    per_seed = np.empty((len(config.seeds), len(grid)))
    for si, seed in enumerate(config.seeds):
        trace = run_warm_restarts(
            prep.objective, prep.train, replace(tc, seed=seed),
            x0=prep.objective.initial_point(seed),
        )
        for ti, T in enumerate(grid):
            prefix = trace.snapshot_prefix(T)
            if draws == 0:
                w = prefix.snapshot_weight
                g = prefix.snapshot_grad_norm_sq
                per_seed[si, ti] = float(np.sum(w * g) / np.sum(w))
            else:
                rng = np.random.default_rng([_seed_entropy(seed), T, 0x0A73])
                acc = 0.0
                for _ in range(draws):
                    x_bar = sample_output_iterate(prefix, rng)
                    acc += grad_norm_sq(prep.objective, x_bar)
                per_seed[si, ti] = acc / draws
    estimate = estimate_rate(grid, per_seed, running_min=True)
    return RateResult(estimate=estimate, T_grid=grid, per_seed=per_seed)


# ---------------------------------------------------------------------------
# Cumulative-sum checks


def check_lemmas(
    eta0: float,
    t_max: int,
    out_path: str | Path | None = None,
    exhaustive_limit: int = 10_000,
) -> LemmaSweep:
    """Sweep both summation bounds for all horizons up to ``t_max``.

    Reports (and the optional CSV file) cover every horizon up to
    ``exhaustive_limit`` plus geometric samples beyond; the sweep itself
    checks every integer horizon.
    """
    report_at = list(range(1, min(t_max, exhaustive_limit) + 1))
    if t_max > exhaustive_limit:
        report_at.extend(
            t for t in geometric_horizons(exhaustive_limit, t_max)
            if t > exhaustive_limit
        )
    sweep = lemma_sweep(eta0, t_max, report_at=report_at)
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([
                "T", "partial_sum", "partial_sum_sq",
                "lower_bound", "lower_margin", "lower_holds",
                "upper_bound", "upper_margin", "upper_holds",
                "upper_bound_safe", "upper_margin_safe", "upper_holds_safe",
            ])
            for lo, up in sweep.reports:
                writer.writerow([
                    lo.T, repr(lo.partial_sum), repr(lo.partial_sum_sq),
                    repr(lo.bound), repr(lo.margin), lo.holds,
                    repr(up.bound), repr(up.margin), up.holds,
                    repr(up.bound_safe), repr(up.margin_safe), up.holds_safe,
                ])
    return sweep


# ---------------------------------------------------------------------------
# Command-line interface


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    result = run_experiment(config, offline=args.offline, cache_dir=args.cache_dir)
    out = Path(args.out) if args.out else Path(
        f"{config.dataset.name}-{config_hash(config)}.{args.format}"
    )
    emit(result.records, out, format=args.format)
    print(f"wrote {out} ({result.completed}/{len(config.seeds)} seeds completed)")
    for seed, msg in result.errors:
        print(f"  seed {seed} failed: {msg}", file=sys.stderr)
    for key in ("final_train_loss", "final_test_accuracy"):
        s = result.summary[key]
        print(f"  {key}: {s['mean']:.6f} +/- {s['half_width_95']:.6f} (95%)")
    if result.completed == 0:
        raise TrainingError("no seed completed")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    configs = load_compare_configs(args.config)
    result = compare_schedules(configs, offline=args.offline, cache_dir=args.cache_dir)
    print(result.to_text())
    return 0


def _cmd_check_lemmas(args: argparse.Namespace) -> int:
    sweep = check_lemmas(args.eta0, args.tmax, out_path=args.out)
    print(
        f"lower bound: holds for all T <= {args.tmax}: {sweep.lower_holds_all} "
        f"(min margin {sweep.lower_min_margin:.6e})"
    )
    failures = sweep.upper_failures
    shown = ", ".join(map(str, failures[:10])) + ("..." if len(failures) > 10 else "")
    print(
        f"upper bound (log form): fails at {len(failures)} horizon(s)"
        + (f" [{shown}]" if failures else "")
    )
    print(f"upper bound (corrected): holds everywhere: {sweep.upper_holds_all_safe}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_rate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    grid = (
        tuple(int(t) for t in args.tgrid.split(",")) if args.tgrid else None
    )
    result = rate_experiment(
        config, T_grid=grid, draws=args.draws,
        offline=args.offline, cache_dir=args.cache_dir,
    )
    est = result.estimate
    print(
        f"log-log slope {est.slope:.4f} (intercept {est.intercept:.4f}, "
        f"residual rms {est.residual_rms:.4f}, n={est.n_points}, "
        f"T in {est.t_range})"
    )
    return 0


def _cmd_fetch(args: argparse.Namespace) -> int:
    if args.config:
        config = load_config(args.config)
        dcfg = config.dataset
        if args.dataset and args.dataset != dcfg.name:
            raise ValidationError(
                f"--dataset {args.dataset!r} does not match config "
                f"dataset {dcfg.name!r}"
            )
        name, url, sha = dcfg.name, dcfg.url, dcfg.sha256
    else:
        name, url, sha = args.dataset, args.url, args.sha256
    if not name or not url:
        raise ValidationError("fetch needs a dataset name and url (or --config)")
    path = fetch_dataset(name, url, sha, cache_dir=args.cache_dir)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="schedlab",
        description="Step-size schedule experiments and bound checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--format", choices=("csv", "json"), default="csv")
    p_run.add_argument("--offline", action="store_true")
    p_run.add_argument("--cache-dir", default=None)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="compare schedules on one dataset")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--offline", action="store_true")
    p_cmp.add_argument("--cache-dir", default=None)
    p_cmp.set_defaults(func=_cmd_compare)

    p_lem = sub.add_parser("check-lemmas", help="sweep the summation bounds")
    p_lem.add_argument("--eta0", type=float, required=True)
    p_lem.add_argument("--tmax", type=int, required=True)
    p_lem.add_argument("--out", default=None)
    p_lem.set_defaults(func=_cmd_check_lemmas)

    p_rate = sub.add_parser("rate", help="estimate the convergence-rate slope")
    p_rate.add_argument("--config", required=True)
    p_rate.add_argument("--tgrid", default=None, help="comma-separated horizons")
    p_rate.add_argument("--draws", type=int, default=0)
    p_rate.add_argument("--offline", action="store_true")
    p_rate.add_argument("--cache-dir", default=None)
    p_rate.set_defaults(func=_cmd_rate)

    p_fetch = sub.add_parser("fetch", help="download a dataset into the cache")
    p_fetch.add_argument("--dataset", default=None)
    p_fetch.add_argument("--url", default=None)
    p_fetch.add_argument("--sha256", default=None)
    p_fetch.add_argument("--config", default=None)
    p_fetch.add_argument("--cache-dir", default=None)
    p_fetch.set_defaults(func=_cmd_fetch)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 2
    except (FetchError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
