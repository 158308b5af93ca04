"""Nested cross-validation engine.

For every (dataset, method, outer fold) cell: run a budgeted TPE search in
which each configuration is scored by the mean validation AUC over 9 inner
folds of the outer-train rows, retrain the best configuration on all
outer-train rows, and score the untouched outer test fold.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from tabbench import hpo, models
from tabbench.data import (
    ColumnSchema,
    Dataset,
    apply_preprocessor,
    fit_preprocessor,
    load_csv,
    load_schema,
    make_folds,
)
from tabbench.metrics import PredictionSet, error_rate, roc_auc
from tabbench.stats import ResultMatrix
from tabbench.train import TrainConfig, fit_epochs, predict_proba, train_model

log = logging.getLogger(__name__)

METHODS = ("resnext", "resnet", "ft")
MODES = ("tuned", "default")
TIMING_KEYS = frozenset({"wall_time_s", "duration_s"})


class ManifestError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class TrainRegime:
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 16

    def config(self, learning_rate: float, weight_decay: float, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate, weight_decay, self.batch_size, self.max_epochs, self.patience, seed)


@dataclass(frozen=True)
class BenchmarkTask:
    dataset: str
    method: str
    mode: str = "tuned"
    budget: hpo.Budget = field(default_factory=hpo.Budget)
    master_seed: int = 0
    regime: TrainRegime = field(default_factory=TrainRegime)
    space_overrides: tuple = ()  # ((name, range-or-choices), ...)
    outer_k: int = 10
    inner_k: int = 9
    n_startup: int = 10
    save_checkpoint: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ManifestError(f"unknown method {self.method!r}")
        if self.mode not in MODES:
            raise ManifestError(f"unknown mode {self.mode!r}")

    @property
    def space(self) -> hpo.SearchSpace:
        space = hpo.space_for(self.method)
        if self.space_overrides:
            space = space.narrowed(dict(self.space_overrides))
        return space

    @property
    def cell_seed_base(self):
        return (self.master_seed, self.dataset, self.method)


def outer_plan(ds: Dataset, task: BenchmarkTask):
    # shared by all methods so that they are compared on identical folds
    return make_folds(ds.labels, task.outer_k, derive_seed(task.master_seed, ds.name, "outer"))


def inner_plan(ds: Dataset, task: BenchmarkTask, fold_index: int, outer_train):
    seed = derive_seed(task.master_seed, ds.name, fold_index, "inner")
    return make_folds(ds.labels, task.inner_k, seed, rows=outer_train)


def _schema(ds: Dataset) -> models.InputSchema:
    return models.InputSchema(ds.n_num, tuple(ds.cardinalities))


def _split(ds: Dataset, fit_rows, rows):
    state = fit_preprocessor(ds, fit_rows)
    x_num, x_cat = apply_preprocessor(state, ds, rows)
    return state, (x_num, x_cat, ds.labels[rows])


def _prep_record(state) -> dict:
    return {
        "means": state.means.tolist(),
        "sds": state.sds.tolist(),
        "medians": state.medians.tolist(),
        "categories": [sorted(m) for m in state.category_maps],
    }


def _fit_and_validate(task, ds, config, train_rows, valid_rows, seed):
    _, train = _split(ds, train_rows, train_rows)
    state, valid = _split(ds, train_rows, valid_rows)
    model = models.build(task.method, config, _schema(ds), ds.n_classes, np.random.default_rng(derive_seed(seed, "init")))
    cfg = task.regime.config(config["learning_rate"], config["weight_decay"], derive_seed(seed, "train"))
    model, report = train_model(model, train, valid, cfg)
    return model, report, state


def evaluate_config(task, ds, config, plan, trial_seed) -> dict:
    """Train on 8 inner folds and validate on the ninth, for each of the 9 rotations."""
    aucs, epochs = [], []
    for j in range(plan.k):
        tr, va = plan.split(j)
        _, report, _ = _fit_and_validate(task, ds, config, tr, va, derive_seed(trial_seed, "inner", j))
        aucs.append(report.best_val_auc)
        epochs.append(report.best_epoch)
    return {"inner_aucs": aucs, "inner_best_epochs": epochs, "objective": float(np.mean(aucs))}


def _score(model, test) -> tuple[float, float]:
    probs = predict_proba(model, test[0], test[1])
    return roc_auc(probs, test[2]), error_rate(PredictionSet(probs, test[2]))


def _failed(base: dict, reason: str) -> dict:
    base.update(status="failed", reason=reason, test_auc=None, test_error=None)
    return base


def run_outer_fold(task: BenchmarkTask, ds: Dataset, fold_index: int) -> dict:
    start = time.perf_counter()
    outer_train, test = outer_plan(ds, task).split(fold_index)
    plan = inner_plan(ds, task, fold_index, outer_train)
    cell_seed = derive_seed(*task.cell_seed_base, fold_index)
    space = task.space
    study = hpo.StudyState(space, seed=derive_seed(cell_seed, "tpe"), n_startup=task.n_startup)
    result = {
        "dataset": ds.name,
        "method": task.method,
        "mode": "tuned",
        "fold_index": fold_index,
        "master_seed": task.master_seed,
        "n_outer_train": int(outer_train.size),
        "n_test": int(test.size),
        "inner_folds": [f.tolist() for f in plan.folds],
        "trials": [],
    }
    while not hpo.budget_exhausted(study, task.budget, time.perf_counter() - start):
        t_index = len(study.history)
        config = hpo.suggest(study)
        t0 = time.perf_counter()
        try:
            ev = evaluate_config(task, ds, config, plan, derive_seed(cell_seed, "trial", t_index))
            trial = hpo.Trial(config, ev["objective"], "complete", extra=ev)
        except Exception as exc:  # a crashed configuration is a failed trial, not a failed cell
            log.debug("trial %d failed: %s", t_index, exc)
            trial = hpo.Trial(config, None, "failed", extra={"reason": f"{type(exc).__name__}: {exc}"})
        trial.duration = time.perf_counter() - t0
        hpo.record(study, trial)
        result["trials"].append(trial_record(t_index, trial))

    complete = [(i, t) for i, t in enumerate(study.history) if t.status == "complete"]
    if not complete:
        result["wall_time_s"] = time.perf_counter() - start
        return _failed(result, "all trials failed")
    best_index, best = max(complete, key=lambda it: (it[1].objective, -it[0]))
    epochs = int(math.floor(float(np.median(best.extra["inner_best_epochs"])) + 0.5))
    result.update(best_trial_index=best_index, best_config=best.config, best_objective=best.objective,
                  retrain_epochs=epochs)
    try:
        state, train = _split(ds, outer_train, outer_train)
        _, test_split = _split(ds, outer_train, test)
        retrain_seed = derive_seed(cell_seed, "retrain")
        model = models.build(task.method, best.config, _schema(ds), ds.n_classes,
                             np.random.default_rng(derive_seed(retrain_seed, "init")))
        cfg = task.regime.config(best.config["learning_rate"], best.config["weight_decay"],
                                 derive_seed(retrain_seed, "train"))
        model, _ = fit_epochs(model, train, cfg, epochs)
        auc, err = _score(model, test_split)
    except Exception as exc:
        result["wall_time_s"] = time.perf_counter() - start
        return _failed(result, f"retrain failed: {type(exc).__name__}: {exc}")
    result.update(status="ok", reason=None, test_auc=auc, test_error=err, preprocessing=_prep_record(state))
    if task.save_checkpoint:
        result["checkpoint"] = model.params.to_records()
    result["wall_time_s"] = time.perf_counter() - start
    return result


def run_default_fold(task: BenchmarkTask, ds: Dataset, fold_index: int) -> dict:
    start = time.perf_counter()
    outer_train, test = outer_plan(ds, task).split(fold_index)
    plan = inner_plan(ds, task, fold_index, outer_train)
    cell_seed = derive_seed(*task.cell_seed_base, fold_index, "default")
    config = hpo.default_config(task.method, task.space)
    result = {
        "dataset": ds.name,
        "method": task.method,
        "mode": "default",
        "fold_index": fold_index,
        "master_seed": task.master_seed,
        "n_outer_train": int(outer_train.size),
        "n_test": int(test.size),
        "best_config": config,
        "trials": [],
    }
    try:
        train_rows, valid_rows = plan.split(0)
        model, report, state = _fit_and_validate(task, ds, config, train_rows, valid_rows, cell_seed)
        _, test_split = _split(ds, train_rows, test)
        auc, err = _score(model, test_split)
    except Exception as exc:
        result["wall_time_s"] = time.perf_counter() - start
        return _failed(result, f"{type(exc).__name__}: {exc}")
    result.update(status="ok", reason=None, test_auc=auc, test_error=err, retrain_epochs=report.best_epoch,
                  train_report=report.to_dict(), preprocessing=_prep_record(state))
    if task.save_checkpoint:
        result["checkpoint"] = model.params.to_records()
    result["wall_time_s"] = time.perf_counter() - start
    return result


def trial_record(index: int, trial: hpo.Trial) -> dict:
    rec = {
        "trial_index": index,
        "config": trial.config,
        "objective": trial.objective,
        "status": trial.status,
        "duration_s": trial.duration,
    }
    for key in ("inner_aucs", "inner_best_epochs", "reason"):
        if key in trial.extra:
            rec[key] = trial.extra[key]
    return rec


@dataclass
class DatasetResult:
    dataset: str
    method: str
    mode: str
    folds: list[dict]
    mean_test_auc: float
    mean_test_error: float
    n_failed: int
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "mode": self.mode,
            "mean_test_auc": self.mean_test_auc,
            "mean_test_error": self.mean_test_error,
            "n_failed": self.n_failed,
            "status": self.status,
        }


def aggregate(task: BenchmarkTask, fold_results: list[dict]) -> DatasetResult:
    """Mean over successful folds; failed folds are counted, not averaged."""
    ordered = sorted(fold_results, key=lambda r: r["fold_index"])
    ok = [r for r in ordered if r.get("status") == "ok"]
    n_failed = len(ordered) - len(ok)
    if not ok:
        return DatasetResult(task.dataset, task.method, task.mode, ordered, float("nan"), float("nan"),
                             n_failed, "failed")
    return DatasetResult(
        task.dataset, task.method, task.mode, ordered,
        float(np.mean([r["test_auc"] for r in ok])),
        float(np.mean([r["test_error"] for r in ok])),
        n_failed,
    )


def run_cell(task: BenchmarkTask, ds: Dataset, fold_index: int) -> dict:
    if task.mode == "default":
        return run_default_fold(task, ds, fold_index)
    return run_outer_fold(task, ds, fold_index)


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class DatasetSpec:
    name: str
    csv: str
    schema: tuple[ColumnSchema, ...]


@dataclass
class RunManifest:
    datasets: list[DatasetSpec]
    methods: list[str]
    mode: str = "tuned"
    budget: hpo.Budget = field(default_factory=hpo.Budget)
    master_seed: int = 0
    parallelism: int = 1
    out_dir: str = "results"
    regime: TrainRegime = field(default_factory=TrainRegime)
    space_overrides: dict = field(default_factory=dict)
    outer_k: int = 10
    inner_k: int = 9
    n_startup: int = 10
    checkpoints: bool = False

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunManifest":
        base = Path(base_dir)
        try:
            datasets = []
            for d in raw["datasets"]:
                csv_path = Path(d["csv"])
                csv_path = csv_path if csv_path.is_absolute() else base / csv_path
                schema = d["schema"]
                if isinstance(schema, str):
                    sp = Path(schema)
                    sp = sp if sp.is_absolute() else base / sp
                    if not sp.exists():
                        raise ManifestError(f"schema file {sp} not found")
                    schema = [c.to_dict() for c in load_schema(sp)]
                datasets.append(DatasetSpec(d["name"], str(csv_path), tuple(ColumnSchema.from_dict(c) for c in schema)))
            budget_raw = raw.get("budget", {})
            budget = hpo.Budget(
                int(budget_raw.get("max_trials", 100)),
                float(budget_raw.get("max_hours", 23.0)) * 3600.0,
            )
            folds = raw.get("folds", {})
            out_dir = Path(raw.get("out_dir", "results"))
            manifest = cls(
                datasets=datasets,
                methods=list(raw.get("methods", METHODS)),
                mode=raw.get("mode", "tuned"),
                budget=budget,
                master_seed=int(raw.get("master_seed", 0)),
                parallelism=int(raw.get("parallelism", os.cpu_count() or 1)),
                out_dir=str(out_dir if out_dir.is_absolute() else base / out_dir),
                regime=TrainRegime(**raw.get("train", {})),
                space_overrides=dict(raw.get("space_overrides", {})),
                outer_k=int(folds.get("outer", 10)),
                inner_k=int(folds.get("inner", 9)),
                n_startup=int(raw.get("n_startup", 10)),
                checkpoints=bool(raw.get("checkpoints", False)),
            )
        except ManifestError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid manifest: {exc}") from exc
        manifest.validate()
        return manifest

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def validate(self):
        if not self.datasets:
            raise ManifestError("manifest lists no datasets")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ManifestError("dataset names must be unique")
        for m in self.methods:
            if m not in METHODS:
                raise ManifestError(f"unknown method {m!r}")
        if self.mode not in MODES:
            raise ManifestError(f"unknown mode {self.mode!r}")
        if self.parallelism < 1:
            raise ManifestError("parallelism must be >= 1")
        for m, over in self.space_overrides.items():
            if m not in METHODS:
                raise ManifestError(f"space override for unknown method {m!r}")
            hpo.space_for(m).narrowed(over)

    def task(self, dataset: str, method: str) -> BenchmarkTask:
        over = self.space_overrides.get(method, {})
        return BenchmarkTask(
            dataset=dataset,
            method=method,
            mode=self.mode,
            budget=self.budget,
            master_seed=self.master_seed,
            regime=self.regime,
            space_overrides=tuple(sorted((k, tuple(v)) for k, v in over.items())),
            outer_k=self.outer_k,
            inner_k=self.inner_k,
            n_startup=self.n_startup,
            save_checkpoint=self.checkpoints,
        )


def cell_path(out_dir, dataset: str, method: str, mode: str, fold: int) -> Path:
    return Path(out_dir) / dataset / method / mode / f"fold{fold}.json"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_cell(out_dir, result: dict):
    path = cell_path(out_dir, result["dataset"], result["method"], result["mode"], result["fold_index"])
    atomic_write(path, dump_json(result))
    lines = "".join(
        json.dumps({k: t[k] for k in ("trial_index", "config", "objective", "status", "duration_s")},
                   sort_keys=True) + "\n"
        for t in result.get("trials", [])
    )
    atomic_write(path.with_suffix(".trials.jsonl"), lines)
    return path


def read_cell(path) -> dict | None:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None


def strip_timing(obj):
    """Copy of a result with wall-clock fields removed, for reproducibility checks."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


@lru_cache(maxsize=16)
def _load_cached(name: str, csv_path: str, schema: tuple) -> Dataset:
    return load_csv(csv_path, list(schema), name=name)


def load_dataset(spec: DatasetSpec) -> Dataset:
    return _load_cached(spec.name, spec.csv, spec.schema)


def _cell_worker(spec: DatasetSpec, task: BenchmarkTask, fold: int) -> dict:
    return run_cell(task, load_dataset(spec), fold)


def execute(manifest: RunManifest, progress=None) -> tuple[ResultMatrix, list[DatasetResult]]:
    """Run (or resume) every (dataset, method, fold) cell and assemble the result matrix."""
    specs = {}
    for spec in manifest.datasets:
        if not Path(spec.csv).exists():
            raise ManifestError(f"dataset {spec.name!r}: file {spec.csv} not found")
        try:
            ds = load_dataset(spec)
        except Exception as exc:
            raise ManifestError(f"dataset {spec.name!r}: {exc}") from exc
        if ds.n_rows < manifest.outer_k:
            raise ManifestError(f"dataset {spec.name!r} has fewer rows than outer folds")
        specs[spec.name] = spec

    out_dir = manifest.out_dir
    pending = []
    for spec in manifest.datasets:
        for method in manifest.methods:
            for fold in range(manifest.outer_k):
                path = cell_path(out_dir, spec.name, method, manifest.mode, fold)
                if read_cell(path) is None:
                    pending.append((spec, manifest.task(spec.name, method), fold))

    t_start = time.perf_counter()

    def done(result):
        write_cell(out_dir, result)
        if progress is not None:
            progress(result, time.perf_counter() - t_start)

    if manifest.parallelism == 1 or len(pending) <= 1:
        for spec, task, fold in pending:
            done(_cell_worker(spec, task, fold))
    else:
        with ProcessPoolExecutor(max_workers=manifest.parallelism) as pool:
            futures = [pool.submit(_cell_worker, spec, task, fold) for spec, task, fold in pending]
            for fut in as_completed(futures):
                done(fut.result())

    return collect(manifest)


def collect(manifest: RunManifest) -> tuple[ResultMatrix, list[DatasetResult]]:
    values = np.full((len(manifest.datasets), len(manifest.methods)), np.nan)
    results = []
    for i, spec in enumerate(manifest.datasets):
        for j, method in enumerate(manifest.methods):
            task = manifest.task(spec.name, method)
            cells = [read_cell(cell_path(manifest.out_dir, spec.name, method, manifest.mode, f))
                     for f in range(manifest.outer_k)]
            agg = aggregate(task, [c for c in cells if c is not None])
            results.append(agg)
            values[i, j] = agg.mean_test_auc
    matrix = ResultMatrix(values, [d.name for d in manifest.datasets], list(manifest.methods))
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(out / f"matrix_{manifest.mode}.csv")
    atomic_write(out / f"summary_{manifest.mode}.json", dump_json([r.to_dict() for r in results]))
    return matrix, results
