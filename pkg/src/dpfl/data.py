"""Tabular ingestion and preprocessing for the heart-disease datasets.

Raw inputs follow the UCI processed-file convention: comma-separated text,
one record per line, no header, "?" for a missing cell. The canonical CSV
written by `prepare-data` adds a header row and a leading `site` column so
that site-wise client partitioning survives a round trip through disk.

All operations are pure: tables are never mutated after construction.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .errors import DataError

MISSING_MARKER = "?"

Cell = float | None


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # "numeric" | "categorical" | "binary" | "target"
    levels: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical", "binary", "target"):
            raise DataError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise DataError(f"categorical column {self.name!r} needs a level set")


def _check_schema(schema: list[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise DataError("duplicate column names in schema")
    if sum(1 for c in schema if c.kind == "target") != 1:
        raise DataError("schema must declare exactly one target column")


# The standard 14-attribute heart-disease layout shared by all four sites.
HEART_SCHEMA: list[ColumnSchema] = [
    ColumnSchema("age", "numeric"),
    ColumnSchema("sex", "binary"),
    ColumnSchema("cp", "categorical", (1.0, 2.0, 3.0, 4.0)),
    ColumnSchema("trestbps", "numeric"),
    ColumnSchema("chol", "numeric"),
    ColumnSchema("fbs", "binary"),
    ColumnSchema("restecg", "categorical", (0.0, 1.0, 2.0)),
    ColumnSchema("thalach", "numeric"),
    ColumnSchema("exang", "binary"),
    ColumnSchema("oldpeak", "numeric"),
    ColumnSchema("slope", "categorical", (1.0, 2.0, 3.0)),
    ColumnSchema("ca", "categorical", (0.0, 1.0, 2.0, 3.0)),
    ColumnSchema("thal", "categorical", (3.0, 6.0, 7.0)),
    ColumnSchema("num", "target"),
]

UCI_SITES = ("cleveland", "hungarian", "switzerland", "va")


@dataclass
class RecordTable:
    """Rows of typed cells plus a per-row site label for partitioning."""

    schema: list[ColumnSchema]
    rows: list[list[Cell]]
    source_tag: str
    sites: list[str] = field(default_factory=list)

    def __post_init__(self):
        _check_schema(self.schema)
        if not self.sites:
            self.sites = [self.source_tag] * len(self.rows)
        if len(self.sites) != len(self.rows):
            raise DataError("site labels do not align with rows")
        width = len(self.schema)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise DataError(f"row {i} has {len(row)} cells, expected {width}")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column_index(self, name: str) -> int:
        for i, col in enumerate(self.schema):
            if col.name == name:
                return i
        raise DataError(f"no column named {name!r}")

    def column(self, name: str) -> list[Cell]:
        idx = self.column_index(name)
        return [row[idx] for row in self.rows]

    def target_index(self) -> int:
        for i, col in enumerate(self.schema):
            if col.kind == "target":
                return i
        raise DataError("schema has no target column")

    def subset(self, indices: list[int]) -> "RecordTable":
        return RecordTable(
            schema=self.schema,
            rows=[list(self.rows[i]) for i in indices],
            source_tag=self.source_tag,
            sites=[self.sites[i] for i in indices],
        )

    def missing_count(self) -> int:
        return sum(cell is None for row in self.rows for cell in row)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (rows, features) float64
    feature_names: list[str]
    scale_columns: list[int]  # numeric passthrough columns, the only ones scaled

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


@dataclass
class ScalerParams:
    """Training-split mean/std per numeric column; degenerate std stored as 1."""

    columns: list[int]
    means: np.ndarray
    stds: np.ndarray


def _parse_cell(text: str, col: ColumnSchema, line_no: int) -> Cell:
    text = text.strip()
    if text == MISSING_MARKER:
        return None
    try:
        value = float(text)
    except ValueError:
        raise DataError(
            f"line {line_no}: cannot parse {text!r} in column {col.name!r}"
        ) from None
    if not np.isfinite(value):
        raise DataError(f"line {line_no}: non-finite value in column {col.name!r}")
    return value


def load_csv(path, schema: list[ColumnSchema], source_tag: str = "cleveland") -> RecordTable:
    """Reads a raw UCI-convention file (no header, "?" missing)."""
    _check_schema(schema)
    rows: list[list[Cell]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != len(schema):
                raise DataError(
                    f"line {line_no}: expected {len(schema)} comma-separated "
                    f"fields, found {len(fields)}"
                )
            rows.append(
                [_parse_cell(f, c, line_no) for f, c in zip(fields, schema)]
            )
    return RecordTable(schema=schema, rows=rows, source_tag=source_tag)


def _format_cell(cell: Cell) -> str:
    if cell is None:
        return MISSING_MARKER
    return repr(cell)  # shortest exact float representation


def write_canonical(table: RecordTable, path) -> None:
    """Writes header + site column + cells; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site"] + [c.name for c in table.schema])
        for site, row in zip(table.sites, table.rows):
            writer.writerow([site] + [_format_cell(c) for c in row])


def read_canonical(path, schema: list[ColumnSchema] | None = None) -> RecordTable:
    schema = schema if schema is not None else HEART_SCHEMA
    _check_schema(schema)
    expected = ["site"] + [c.name for c in schema]
    rows: list[list[Cell]] = []
    sites: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty canonical file") from None
        if header != expected:
            raise DataError(f"{path}: header {header} does not match schema")
        for line_no, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(expected):
                raise DataError(
                    f"line {line_no}: expected {len(expected)} fields, "
                    f"found {len(fields)}"
                )
            sites.append(fields[0])
            rows.append(
                [_parse_cell(f, c, line_no) for f, c in zip(fields[1:], schema)]
            )
    tags = set(sites)
    tag = tags.pop() if len(tags) == 1 else "integrated"
    return RecordTable(schema=schema, rows=rows, source_tag=tag, sites=sites)


def binarize_target(table: RecordTable) -> RecordTable:
    """Disease-present binarization: 0 stays 0, any positive grade becomes 1."""
    tidx = table.target_index()
    new_rows = []
    for i, row in enumerate(table.rows):
        value = row[tidx]
        new_row = list(row)
        if value is not None:
            if value < 0 or value != int(value):
                raise DataError(
                    f"row {i}: target value {value!r} is not a nonnegative integer"
                )
            new_row[tidx] = 0.0 if value == 0 else 1.0
        new_rows.append(new_row)
    return replace(table, rows=new_rows)


def _mode(values: list[float]) -> float:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    # Deterministic: highest count, smallest value on ties.
    return min(counts, key=lambda v: (-counts[v], v))


def impute_missing(table: RecordTable, stats_from: RecordTable) -> RecordTable:
    """Fills numeric holes with the training median, others with the mode."""
    if [c.name for c in table.schema] != [c.name for c in stats_from.schema]:
        raise DataError("impute statistics table does not share the schema")
    fills: list[Cell] = []
    for j, col in enumerate(table.schema):
        observed = [row[j] for row in stats_from.rows if row[j] is not None]
        needs_fill = any(row[j] is None for row in table.rows)
        if not observed:
            if needs_fill:
                raise DataError(
                    f"column {col.name!r} has no observed training values to impute from"
                )
            fills.append(None)
        elif col.kind == "numeric":
            fills.append(float(np.median(observed)))
        else:
            fills.append(_mode(observed))
    new_rows = [
        [fills[j] if cell is None else cell for j, cell in enumerate(row)]
        for row in table.rows
    ]
    return replace(table, rows=new_rows)


def encode_features(table: RecordTable) -> tuple[FeatureMatrix, np.ndarray]:
    """One-hot categorical columns, pass numerics/binaries through.

    Feature order is deterministic: schema order, levels sorted. The target
    must already be binarized.
    """
    if table.missing_count():
        raise DataError("encode_features requires a table with no missing cells")
    names: list[str] = []
    scale_columns: list[int] = []
    columns: list[np.ndarray] = []
    labels: np.ndarray | None = None
    for j, col in enumerate(table.schema):
        raw = np.array([row[j] for row in table.rows], dtype=np.float64)
        if col.kind == "target":
            if raw.size and not np.all((raw == 0.0) | (raw == 1.0)):
                raise DataError("target must be binarized before encoding")
            labels = raw.astype(np.int64)
        elif col.kind == "categorical":
            level_set = set(col.levels)
            for i, v in enumerate(raw):
                if v not in level_set:
                    raise DataError(
                        f"row {i}: value {v!r} outside declared levels of {col.name!r}"
                    )
            for level in sorted(col.levels):
                names.append(f"{col.name}={level:g}")
                columns.append((raw == level).astype(np.float64))
        elif col.kind == "binary":
            if raw.size and not np.all((raw == 0.0) | (raw == 1.0)):
                raise DataError(f"binary column {col.name!r} has non-0/1 values")
            names.append(col.name)
            columns.append(raw)
        else:  # numeric
            scale_columns.append(len(names))
            names.append(col.name)
            columns.append(raw)
    assert labels is not None
    values = (
        np.column_stack(columns)
        if columns and table.n_rows
        else np.zeros((table.n_rows, len(names)))
    )
    return FeatureMatrix(values, names, scale_columns), labels


def fit_standardize(train: FeatureMatrix) -> ScalerParams:
    """Population mean/std of the numeric columns; constant columns get std 1."""
    cols = train.scale_columns
    sub = train.values[:, cols]
    means = sub.mean(axis=0)
    stds = sub.std(axis=0)
    stds = np.where(stds > 0.0, stds, 1.0)
    return ScalerParams(columns=list(cols), means=means, stds=stds)


def apply_standardize(m: FeatureMatrix, s: ScalerParams) -> FeatureMatrix:
    values = m.values.copy()
    values[:, s.columns] = (values[:, s.columns] - s.means) / s.stds
    return FeatureMatrix(values, list(m.feature_names), list(m.scale_columns))


def _binary_classes(table: RecordTable) -> tuple[list[int], list[int]]:
    tidx = table.target_index()
    neg, pos = [], []
    for i, row in enumerate(table.rows):
        value = row[tidx]
        if value == 0.0:
            neg.append(i)
        elif value == 1.0:
            pos.append(i)
        else:
            raise DataError(
                f"row {i}: target {value!r} is not binary; binarize first"
            )
    return neg, pos


def split_train_test(
    table: RecordTable, test_frac: float, seed: int
) -> tuple[RecordTable, RecordTable]:
    """Stratified deterministic split; per-class sizes within 1 of exact."""
    if not 0.0 < test_frac < 1.0:
        raise DataError("test fraction must lie in (0, 1)")
    rng = seeding.stream(seed, seeding.SPLIT)
    test_idx: list[int] = []
    train_idx: list[int] = []
    for cls in _binary_classes(table):
        if len(cls) < 2:
            raise DataError("each class needs at least 2 examples to split")
        n_test = int(round(test_frac * len(cls)))
        n_test = min(max(n_test, 1), len(cls) - 1)
        order = rng.permutation(len(cls))
        test_idx.extend(cls[i] for i in order[:n_test])
        train_idx.extend(cls[i] for i in order[n_test:])
    return table.subset(sorted(train_idx)), table.subset(sorted(test_idx))


def kfold(
    table: RecordTable, k: int, seed: int
) -> list[tuple[RecordTable, RecordTable]]:
    """Stratified k folds; every row lands in exactly one validation fold."""
    if k < 2:
        raise DataError("k must be at least 2")
    rng = seeding.stream(seed, seeding.KFOLD)
    assignment = [0] * table.n_rows
    for cls in _binary_classes(table):
        if len(cls) < k:
            raise DataError(f"k={k} exceeds a class count of {len(cls)}")
        order = rng.permutation(len(cls))
        for pos, i in enumerate(order):
            assignment[cls[i]] = pos % k
    folds = []
    for fold in range(k):
        val = [i for i in range(table.n_rows) if assignment[i] == fold]
        train = [i for i in range(table.n_rows) if assignment[i] != fold]
        folds.append((table.subset(train), table.subset(val)))
    return folds


def _schemas_match(a: list[ColumnSchema], b: list[ColumnSchema]) -> list[str]:
    diverging = []
    if len(a) != len(b):
        return [f"column count {len(a)} vs {len(b)}"]
    for ca, cb in zip(a, b):
        if ca != cb:
            diverging.append(ca.name)
    return diverging


def integrate(tables: list[RecordTable]) -> RecordTable:
    """Concatenates schema-identical tables and drops exact duplicate rows."""
    if not tables:
        raise DataError("integrate needs at least one table")
    first = tables[0]
    for other in tables[1:]:
        diverging = _schemas_match(first.schema, other.schema)
        if diverging:
            raise DataError(
                "schema mismatch between tables in columns: " + ", ".join(diverging)
            )
    seen: set[tuple] = set()
    rows: list[list[Cell]] = []
    sites: list[str] = []
    for table in tables:
        for row, site in zip(table.rows, table.sites):
            key = tuple(row)
            if key in seen:
                continue
            seen.add(key)
            rows.append(list(row))
            sites.append(site)
    return RecordTable(
        schema=first.schema, rows=rows, source_tag="integrated", sites=sites
    )


def partition_clients(
    table: RecordTable, n_clients: int, strategy: str, seed: int
) -> list[RecordTable]:
    """Splits a table into disjoint client shards covering the input.

    iid: stratified shuffle dealt round-robin, shard sizes within 1.
    by_site: one shard per distinct site label, n_clients must match.
    """
    if n_clients < 1:
        raise DataError("need at least one client")
    if n_clients > table.n_rows:
        raise DataError(
            f"cannot split {table.n_rows} rows across {n_clients} clients"
        )
    if strategy == "by_site":
        site_names = sorted(set(table.sites))
        if len(site_names) != n_clients:
            raise DataError(
                f"by_site partitioning found {len(site_names)} sites "
                f"but {n_clients} clients were requested"
            )
        return [
            table.subset([i for i, s in enumerate(table.sites) if s == name])
            for name in site_names
        ]
    if strategy != "iid":
        raise DataError(f"unknown partition strategy {strategy!r}")
    if n_clients == 1:
        return [table.subset(list(range(table.n_rows)))]
    rng = seeding.stream(seed, seeding.PARTITION)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    cursor = 0  # continues across classes so shard sizes stay within 1
    for cls in _binary_classes(table):
        order = rng.permutation(len(cls))
        for i in order:
            shards[cursor % n_clients].append(cls[i])
            cursor += 1
    return [table.subset(sorted(idx)) for idx in shards]


def encoded_width(schema: list[ColumnSchema]) -> int:
    """Feature count after one-hot encoding; the model's input dimension."""
    width = 0
    for col in schema:
        if col.kind == "categorical":
            width += len(col.levels)
        elif col.kind != "target":
            width += 1
    return width
