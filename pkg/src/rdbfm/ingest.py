"""Relational database ingestion: JSON manifest + one CSV per table."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CellTypeError, IngestIoError, ParseError, SchemaError

log = logging.getLogger(__name__)

TIME_NEG_INF = np.iinfo(np.int64).min
TIME_POS_INF = np.iinfo(np.int64).max


class Kind(str, Enum):
    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"
    TEXT = "text"
    TIMESTAMP = "timestamp"
    PRIMARY_KEY = "primary_key"
    FOREIGN_KEY = "foreign_key"

    @property
    def is_key(self) -> bool:
        return self in (Kind.PRIMARY_KEY, Kind.FOREIGN_KEY)


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: Kind
    fk_target: tuple[str, str] | None = None
    unit_hint: str | None = None

    def __post_init__(self):
        if (self.fk_target is not None) != (self.kind is Kind.FOREIGN_KEY):
            raise SchemaError("fk_target must be set exactly for foreign_key columns", column=self.name)


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: tuple[ColumnSpec, ...]
    time_column: str | None = None

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(f"{self.name}.{name}")

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def primary_key(self) -> str | None:
        for c in self.columns:
            if c.kind is Kind.PRIMARY_KEY:
                return c.name
        return None

    @property
    def feature_columns(self) -> list[ColumnSpec]:
        """Columns that become node cells (everything except keys)."""
        return [c for c in self.columns if not c.kind.is_key]


@dataclass(frozen=True)
class Relation:
    fk_table: str
    fk_column: str
    pk_table: str
    pk_column: str

    @property
    def name(self) -> str:
        return f"{self.fk_table}.{self.fk_column}\u2192{self.pk_table}"


@dataclass(frozen=True)
class RdbManifest:
    name: str
    tables: tuple[TableSpec, ...]
    relations: tuple[Relation, ...]

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "tables": [
                {
                    "name": t.name,
                    "time_column": t.time_column,
                    "columns": [
                        {"name": c.name, "kind": c.kind.value}
                        | ({"fk_target": f"{c.fk_target[0]}.{c.fk_target[1]}"} if c.fk_target else {})
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
            "relations": [
                {"fk_table": r.fk_table, "fk_column": r.fk_column, "pk_table": r.pk_table, "pk_column": r.pk_column}
                for r in self.relations
            ],
        }


def _parse_fk_target(raw, table: str, column: str) -> tuple[str, str] | None:
    if raw is None:
        return None
    if isinstance(raw, str) and raw.count(".") == 1:
        t, c = raw.split(".")
        return t, c
    if isinstance(raw, dict) and {"table", "column"} <= raw.keys():
        return str(raw["table"]), str(raw["column"])
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        return str(raw[0]), str(raw[1])
    raise ParseError(f"{table}.{column}: unreadable fk_target {raw!r}")


def parse_manifest(doc: dict) -> RdbManifest:
    """Build and validate a manifest from its decoded JSON document."""
    try:
        name = str(doc["name"])
        raw_tables = doc["tables"]
        raw_relations = doc.get("relations", [])
        relations = tuple(
            Relation(str(r["fk_table"]), str(r["fk_column"]), str(r["pk_table"]), str(r["pk_column"]))
            for r in raw_relations
        )
    except (KeyError, TypeError) as e:
        raise ParseError(f"manifest missing field: {e}") from e

    by_fk = {}
    for r in relations:
        key = (r.fk_table, r.fk_column)
        if key in by_fk:
            raise SchemaError("foreign key appears in more than one relation", r.fk_table, r.fk_column)
        by_fk[key] = r

    tables = []
    seen_tables = set()
    for rt in raw_tables:
        try:
            tname = str(rt["name"])
            raw_cols = rt["columns"]
        except (KeyError, TypeError) as e:
            raise ParseError(f"table entry missing field: {e}") from e
        if tname in seen_tables:
            raise SchemaError("duplicate table", tname)
        seen_tables.add(tname)
        cols = []
        names = set()
        for rc in raw_cols:
            try:
                cname = str(rc["name"])
                kind = Kind(rc["kind"])
            except KeyError as e:
                raise ParseError(f"{tname}: column entry missing field {e}") from e
            except ValueError as e:
                raise ParseError(f"{tname}.{rc.get('name')}: unknown kind {rc.get('kind')!r}") from e
            if cname in names:
                raise SchemaError("duplicate column", tname, cname)
            names.add(cname)
            target = _parse_fk_target(rc.get("fk_target"), tname, cname)
            if kind is Kind.FOREIGN_KEY:
                rel = by_fk.get((tname, cname))
                if rel is None:
                    raise SchemaError("foreign key column has no relation entry", tname, cname)
                if target is not None and target != (rel.pk_table, rel.pk_column):
                    raise SchemaError("fk_target disagrees with relation entry", tname, cname)
                target = (rel.pk_table, rel.pk_column)
            elif target is not None:
                raise SchemaError("fk_target given for non-foreign-key column", tname, cname)
            cols.append(ColumnSpec(cname, kind, target, rc.get("unit_hint")))
        if sum(c.kind is Kind.PRIMARY_KEY for c in cols) > 1:
            raise SchemaError("more than one primary_key column", tname)
        time_col = rt.get("time_column")
        if time_col is not None:
            match = [c for c in cols if c.name == time_col]
            if not match or match[0].kind is not Kind.TIMESTAMP:
                raise SchemaError("time_column must name a timestamp column", tname, time_col)
        tables.append(TableSpec(tname, tuple(cols), time_col))

    manifest = RdbManifest(name, tuple(tables), relations)
    for r in relations:
        where = f"relation {r.name}"
        try:
            fk_col = manifest.table(r.fk_table).column(r.fk_column)
        except KeyError:
            raise SchemaError(f"{where}: unknown fk endpoint", r.fk_table, r.fk_column) from None
        if fk_col.kind is not Kind.FOREIGN_KEY:
            raise SchemaError(f"{where}: fk column is not declared foreign_key", r.fk_table, r.fk_column)
        try:
            pk_col = manifest.table(r.pk_table).column(r.pk_column)
        except KeyError:
            raise SchemaError(f"{where}: dangling fk target", r.pk_table, r.pk_column) from None
        if pk_col.kind is not Kind.PRIMARY_KEY:
            raise SchemaError(f"{where}: target is not a primary_key column", r.pk_table, r.pk_column)
    return manifest


def load_manifest(path: str | Path) -> RdbManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise IngestIoError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    return parse_manifest(doc)


# ---------------------------------------------------------------------------
# tables


@dataclass
class TableFrame:
    spec: TableSpec
    row_count: int
    columns: dict[str, np.ndarray]
    null_mask: dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.columns.items():
            if len(arr) != self.row_count or len(self.null_mask[name]) != self.row_count:
                raise SchemaError("column length differs from row count", self.spec.name, name)

    @property
    def name(self) -> str:
        return self.spec.name

    def times(self) -> np.ndarray | None:
        """Per-row epoch seconds of the time column, or None if untimed.

        A null timestamp becomes ``TIME_POS_INF`` so the row is never treated
        as happening before anything.
        """
        if self.spec.time_column is None:
            return None
        t = self.columns[self.spec.time_column].copy()
        t[self.null_mask[self.spec.time_column]] = TIME_POS_INF
        return t

    def freeze(self) -> "TableFrame":
        for d in (self.columns, self.null_mask):
            for arr in d.values():
                arr.setflags(write=False)
        return self

    def equals(self, other: "TableFrame") -> bool:
        if self.spec != other.spec or self.row_count != other.row_count:
            return False
        for c in self.spec.column_names:
            if not np.array_equal(self.null_mask[c], other.null_mask[c]):
                return False
            a, b = self.columns[c], other.columns[c]
            live = ~self.null_mask[c]
            if not np.array_equal(a[live], b[live]):
                return False
        return True


@dataclass
class LoadReport:
    row_counts: dict[str, int] = field(default_factory=dict)
    dangling_fks: dict[str, int] = field(default_factory=dict)
    null_cells: dict[str, int] = field(default_factory=dict)

    @property
    def total_rows(self) -> int:
        return sum(self.row_counts.values())

    @property
    def total_dangling(self) -> int:
        return sum(self.dangling_fks.values())

    def to_json(self) -> dict:
        return {
            "row_counts": self.row_counts,
            "total_rows": self.total_rows,
            "dangling_fks": self.dangling_fks,
            "null_cells": self.null_cells,
        }


def parse_timestamp(text: str) -> int:
    """Epoch seconds from an integer string or an ISO-8601 date/datetime (naive = UTC)."""
    try:
        return int(text)
    except ValueError:
        pass
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _typed_column(spec: TableSpec, col: ColumnSpec, raw: list[str]) -> tuple[np.ndarray, np.ndarray]:
    n = len(raw)
    mask = np.fromiter((v == "" for v in raw), dtype=bool, count=n)
    if col.kind in (Kind.CATEGORICAL, Kind.TEXT):
        return np.array(raw, dtype=object), mask
    if col.kind is Kind.NUMERICAL:
        out = np.full(n, np.nan)
        for i, v in enumerate(raw):
            if v == "":
                continue
            try:
                out[i] = float(v)
            except ValueError:
                raise CellTypeError(f"not a number: {v!r}", spec.name, col.name, i) from None
            if not np.isfinite(out[i]):
                raise CellTypeError(f"non-finite number: {v!r}", spec.name, col.name, i)
        return out, mask
    out = np.full(n, -1, dtype=np.int64)
    for i, v in enumerate(raw):
        if v == "":
            continue
        try:
            out[i] = parse_timestamp(v) if col.kind is Kind.TIMESTAMP else int(v)
        except ValueError:
            raise CellTypeError(f"cannot parse {col.kind.value}: {v!r}", spec.name, col.name, i) from None
    if col.kind is Kind.TIMESTAMP:
        out[mask] = 0
    return out, mask


def read_table(spec: TableSpec, path: Path) -> TableFrame:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as e:
        raise IngestIoError(f"missing data file for table {spec.name}: {path}") from e
    except OSError as e:
        raise IngestIoError(f"{path}: {e}") from e
    if not rows:
        header, body = spec.column_names, []
    else:
        header, body = rows[0], rows[1:]
    missing = [c for c in spec.column_names if c not in header]
    if missing:
        raise SchemaError(f"header lacks columns {missing}", spec.name)
    idx = {c: header.index(c) for c in spec.column_names}
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise CellTypeError(f"expected {len(header)} fields, got {len(row)}", spec.name, "*", r)
    columns, masks = {}, {}
    for col in spec.columns:
        raw = [row[idx[col.name]] for row in body]
        columns[col.name], masks[col.name] = _typed_column(spec, col, raw)
    frame = TableFrame(spec, len(body), columns, masks)
    pk = spec.primary_key
    if pk is not None:
        live = frame.columns[pk][~frame.null_mask[pk]]
        if len(np.unique(live)) != len(live):
            raise SchemaError("primary key values are not unique", spec.name, pk)
    return frame


def pk_index(frame: TableFrame) -> dict[int, int]:
    """Map primary-key value -> row position."""
    pk = frame.spec.primary_key
    if pk is None:
        return {}
    vals, mask = frame.columns[pk], frame.null_mask[pk]
    return {int(v): i for i, v in enumerate(vals) if not mask[i]}


def load_tables(
    manifest: RdbManifest, data_dir: str | Path, workers: int = 1
) -> tuple[list[TableFrame], LoadReport]:
    """Read every table, validate referential integrity, null dangling FKs.

    Returns the frames in manifest order together with a load report.
    """
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IngestIoError(f"data directory not found: {data_dir}")
    specs = list(manifest.tables)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            frames = list(pool.map(lambda s: read_table(s, data_dir / f"{s.name}.csv"), specs))
    else:
        frames = [read_table(s, data_dir / f"{s.name}.csv") for s in specs]
    by_name = {f.name: f for f in frames}

    report = LoadReport()
    pk_maps = {}
    for rel in manifest.relations:
        if rel.pk_table not in pk_maps:
            pk_maps[rel.pk_table] = pk_index(by_name[rel.pk_table])
        target = pk_maps[rel.pk_table]
        frame = by_name[rel.fk_table]
        vals, mask = frame.columns[rel.fk_column], frame.null_mask[rel.fk_column]
        dangling = 0
        for i in np.flatnonzero(~mask):
            if int(vals[i]) not in target:
                mask[i] = True
                vals[i] = -1
                dangling += 1
        if dangling:
            log.warning("%s: nulled %d dangling foreign keys", rel.name, dangling)
        report.dangling_fks[rel.name] = dangling

    for f in frames:
        report.row_counts[f.name] = f.row_count
        report.null_cells[f.name] = int(sum(m.sum() for m in f.null_mask.values()))
        f.freeze()
    return frames, report


def write_table(frame: TableFrame, path: str | Path) -> None:
    """Write a frame back to CSV in the ingestion format (empty string = null)."""
    spec = frame.spec
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(spec.column_names)
        for i in range(frame.row_count):
            row = []
            for col in spec.columns:
                if frame.null_mask[col.name][i]:
                    row.append("")
                    continue
                v = frame.columns[col.name][i]
                if col.kind is Kind.NUMERICAL:
                    row.append(repr(float(v)))
                elif col.kind is Kind.TIMESTAMP:
                    row.append(format_timestamp(v))
                elif col.kind.is_key:
                    row.append(str(int(v)))
                else:
                    row.append(str(v))
            w.writerow(row)


def write_manifest(manifest: RdbManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
