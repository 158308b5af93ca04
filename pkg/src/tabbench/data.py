"""Dataset ingestion, train-only preprocessing and stratified fold plans."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SD_FLOOR = 1e-8


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    pass


class FetchError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # "numeric" | "categorical" | "target"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical", "target"):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"column {self.name!r}: duplicate category labels")

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSchema":
        return cls(d["name"], d["kind"], tuple(str(c) for c in d.get("categories", ())))

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.categories:
            out["categories"] = list(self.categories)
        return out


def validate_schema(schema: list[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("column names must be unique")
    n_target = sum(c.kind == "target" for c in schema)
    if n_target != 1:
        raise SchemaError(f"expected exactly one target column, found {n_target}")
    if len(schema) < 2:
        raise SchemaError("at least one feature column is required")


def load_schema(path) -> list[ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    schema = [ColumnSchema.from_dict(d) for d in raw]
    validate_schema(schema)
    return schema


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-typed table.

    ``numeric`` holds NaN for missing cells. ``categorical`` holds raw
    category codes where 0 means missing and ``k + 1`` is the k-th schema
    category; :func:`apply_preprocessor` zeroes codes not seen at fit time.
    """

    numeric: np.ndarray
    categorical: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""
    numeric_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    cardinalities: tuple[int, ...] = ()
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.numeric.shape[0] != n or self.categorical.shape[0] != n:
            raise SchemaError("numeric, categorical and labels must share the row count")
        if self.n_classes < 2:
            raise SchemaError("a dataset needs at least two classes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise SchemaError("label outside 0..n_classes-1")
        for j, card in enumerate(self.cardinalities):
            col = self.categorical[:, j]
            if col.size and (col.min() < 0 or col.max() > card):
                raise SchemaError(f"categorical column {j} has index beyond cardinality {card}")

    @property
    def n_rows(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_num(self) -> int:
        return int(self.numeric.shape[1])

    @property
    def n_cat(self) -> int:
        return int(self.categorical.shape[1])

    def with_numeric(self, numeric: np.ndarray) -> "Dataset":
        return Dataset(
            numeric, self.categorical, self.labels, self.n_classes, self.name,
            self.numeric_names, self.categorical_names, self.cardinalities, self.class_names,
        )


def load_csv(path, schema: list[ColumnSchema], name: str | None = None) -> Dataset:
    validate_schema(schema)
    path = Path(path)
    num_cols = [c for c in schema if c.kind == "numeric"]
    cat_cols = [c for c in schema if c.kind == "categorical"]
    target = next(c for c in schema if c.kind == "target")
    cat_maps = {c.name: {lab: i + 1 for i, lab in enumerate(c.categories)} for c in cat_cols}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != [c.name for c in schema]:
            raise SchemaError(f"{path}: header {header} does not match schema")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(schema)} fields, got {len(row)}"
                )
            rows.append(row)

    pos = {c.name: i for i, c in enumerate(schema)}
    n = len(rows)
    numeric = np.full((n, len(num_cols)), np.nan)
    categorical = np.zeros((n, len(cat_cols)), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)

    classes = list(target.categories)
    observed_classes = sorted({r[pos[target.name]].strip() for r in rows})
    if not classes:
        classes = observed_classes
    class_index = {lab: i for i, lab in enumerate(classes)}

    for i, row in enumerate(rows):
        for j, col in enumerate(num_cols):
            cell = row[pos[col.name]].strip()
            if cell:
                try:
                    numeric[i, j] = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{i + 2}: {col.name}={cell!r} is not numeric") from None
        for j, col in enumerate(cat_cols):
            cell = row[pos[col.name]].strip()
            if cell:
                mapping = cat_maps[col.name]
                if cell not in mapping:
                    if col.categories:
                        # label outside the declared set is treated as missing
                        continue
                    mapping[cell] = len(mapping) + 1
                categorical[i, j] = mapping[cell]
        lab = row[pos[target.name]].strip()
        if lab not in class_index:
            raise SchemaError(f"{path}:{i + 2}: unknown target label {lab!r}")
        labels[i] = class_index[lab]

    return Dataset(
        numeric=numeric,
        categorical=categorical,
        labels=labels,
        n_classes=len(classes),
        name=name or path.stem,
        numeric_names=tuple(c.name for c in num_cols),
        categorical_names=tuple(c.name for c in cat_cols),
        cardinalities=tuple(len(cat_maps[c.name]) for c in cat_cols),
        class_names=tuple(classes),
    )


def fetch_dataset(url: str, cache_dir, opener=urllib.request.urlopen) -> Path:
    """Download ``url`` once into ``<cache_dir>/<sha256(url)>/data.csv``.

    A ``data.csv.sha256`` sidecar records the content hash; a cached file
    that no longer matches it is downloaded again.
    """
    slot = Path(cache_dir) / hashlib.sha256(url.encode("utf-8")).hexdigest()
    target = slot / "data.csv"
    sidecar = slot / "data.csv.sha256"
    if target.exists() and sidecar.exists():
        if _file_sha256(target) == sidecar.read_text().strip():
            return target
    slot.mkdir(parents=True, exist_ok=True)
    try:
        with opener(url) as resp, tempfile.NamedTemporaryFile(dir=slot, delete=False) as tmp:
            shutil.copyfileobj(resp, tmp)
            tmp_name = tmp.name
    except Exception as exc:  # urllib raises a zoo of error types
        raise FetchError(f"could not fetch {url}: {exc}") from exc
    os.replace(tmp_name, target)
    sidecar.write_text(_file_sha256(target) + "\n")
    return target


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[np.ndarray, ...]
    seed: int
    stratified: bool = True

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(rows outside fold ``i``, rows of fold ``i``), both sorted."""
        rest = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return rest, self.folds[i]


def make_folds(labels, k: int, seed: int, rows=None) -> FoldPlan:
    """Stratified k-fold partition of ``rows`` (default: all positions).

    Each class is shuffled and dealt round-robin; the dealing offset carries
    over between classes so fold sizes stay balanced as well.
    """
    labels = np.asarray(labels)
    rows = np.arange(labels.shape[0]) if rows is None else np.asarray(rows)
    if k < 2:
        raise ConfigurationError("k must be at least 2")
    if k > rows.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the number of rows ({rows.shape[0]})")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    sub = labels[rows]
    for cls in np.unique(sub):
        members = rows[sub == cls]
        members = members[rng.permutation(members.shape[0])]
        for i, r in enumerate(members):
            buckets[(offset + i) % k].append(int(r))
        offset = (offset + members.shape[0]) % k
    return FoldPlan(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets), seed, True)


@dataclass(frozen=True)
class PreprocessorState:
    means: np.ndarray
    sds: np.ndarray
    medians: np.ndarray
    category_maps: tuple[dict[int, int], ...] = field(default_factory=tuple)

    @property
    def n_seen(self) -> tuple[int, ...]:
        """Train-observed category count per column (index 0 = unknown excluded)."""
        return tuple(len(m) for m in self.category_maps)


def fit_preprocessor(ds: Dataset, train_rows) -> PreprocessorState:
    train_rows = np.asarray(train_rows)
    if train_rows.size == 0:
        raise ConfigurationError("train_rows must be non-empty")
    x = ds.numeric[train_rows]
    with np.errstate(all="ignore"):
        medians = np.nanmedian(x, axis=0) if x.shape[1] else np.zeros(0)
    medians = np.where(np.isnan(medians), 0.0, medians)
    filled = np.where(np.isnan(x), medians, x)
    means = filled.mean(axis=0)
    sds = np.maximum(filled.std(axis=0), SD_FLOOR)
    maps = []
    for j in range(ds.n_cat):
        seen = np.unique(ds.categorical[train_rows, j])
        seen = seen[seen > 0]
        # seen categories keep their schema code; anything else maps to 0
        maps.append({int(code): int(code) for code in seen})
    return PreprocessorState(means, sds, medians, tuple(maps))


def apply_preprocessor(state: PreprocessorState, ds: Dataset, rows) -> tuple[np.ndarray, np.ndarray]:
    rows = np.asarray(rows)
    x = ds.numeric[rows]
    x = np.where(np.isnan(x), state.medians, x)
    x = (x - state.means) / state.sds
    cat = np.zeros((rows.shape[0], ds.n_cat), dtype=np.int64)
    for j, mapping in enumerate(state.category_maps):
        col = ds.categorical[rows, j]
        lut = np.zeros(max(int(col.max(initial=0)), max(mapping, default=0)) + 1, dtype=np.int64)
        for code, idx in mapping.items():
            lut[code] = idx
        cat[:, j] = lut[col]
    return x, cat


def two_gaussians(n: int = 1000, n_num: int = 8, n_cat: int = 2, shift: float = 0.75,
                  n_levels: int = 4, seed: int = 0, name: str = "two_gaussians") -> Dataset:
    """Binary task: numeric features ~ N(+-shift, 1) by class, uninformative categoricals."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    numeric = rng.normal(size=(n, n_num)) + np.where(labels[:, None] == 1, shift, -shift)
    categorical = rng.integers(1, n_levels + 1, size=(n, n_cat))
    return Dataset(
        numeric=numeric,
        categorical=categorical,
        labels=labels.astype(np.int64),
        n_classes=2,
        name=name,
        numeric_names=tuple(f"x{j}" for j in range(n_num)),
        categorical_names=tuple(f"c{j}" for j in range(n_cat)),
        cardinalities=(n_levels,) * n_cat,
        class_names=("0", "1"),
    )


def write_csv(ds: Dataset, path) -> list[ColumnSchema]:
    """Write ``ds`` as CSV plus ``<path>.schema.json``; returns the schema."""
    path = Path(path)
    schema = [ColumnSchema(n, "numeric") for n in ds.numeric_names]
    schema += [
        ColumnSchema(n, "categorical", tuple(f"v{i}" for i in range(1, card + 1)))
        for n, card in zip(ds.categorical_names, ds.cardinalities)
    ]
    schema.append(ColumnSchema("target", "target", tuple(ds.class_names)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([c.name for c in schema])
        for i in range(ds.n_rows):
            row = ["" if np.isnan(v) else repr(float(v)) for v in ds.numeric[i]]
            row += ["" if c == 0 else f"v{c}" for c in ds.categorical[i]]
            row.append(ds.class_names[ds.labels[i]])
            w.writerow(row)
    with open(str(path) + ".schema.json", "w", encoding="utf-8") as fh:
        json.dump([c.to_dict() for c in schema], fh, indent=2)
    return schema
