import csv
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from rdbfm.features import StubEmbedding, pretrain_float_codec


def write_db(root: Path, doc: dict, tables: dict[str, list[list]]) -> Path:
    """Write a manifest plus one CSV per table; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / "manifest.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    for t in doc["tables"]:
        rows = tables.get(t["name"], [])
        with open(root / f"{t['name']}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([c["name"] for c in t["columns"]])
            for r in rows:
                w.writerow(["" if v is None else v for v in r])
    return path


SHOP_DOC = {
    "name": "shop",
    "tables": [
        {"name": "users", "columns": [
            {"name": "user_id", "kind": "primary_key"},
            {"name": "age", "kind": "numerical"},
            {"name": "region", "kind": "categorical"},
            {"name": "churn", "kind": "categorical"}]},
        {"name": "purchases", "time_column": "ts", "columns": [
            {"name": "purchase_id", "kind": "primary_key"},
            {"name": "user_id", "kind": "foreign_key", "fk_target": "users.user_id"},
            {"name": "amount", "kind": "numerical"},
            {"name": "note", "kind": "text"},
            {"name": "ts", "kind": "timestamp"}]},
    ],
    "relations": [{"fk_table": "purchases", "fk_column": "user_id", "pk_table": "users", "pk_column": "user_id"}],
}

SHOP_ROWS = {
    "users": [[0, 31, "north", "yes"], [1, 45, "south", "no"], [2, None, "north", "no"]],
    "purchases": [
        [0, 0, 10.5, "first order", "2021-01-01T00:00:00Z"],
        [1, 0, 3.0, "gift", "2021-02-01T00:00:00Z"],
        [2, 1, 7.25, None, "2021-03-01T00:00:00Z"],
        [3, 2, 1.0, "late", "2021-04-01T00:00:00Z"],
        [4, 2, 99.0, "big", "2021-05-01T00:00:00Z"],
        [5, 999, 5.0, "orphan", "2021-06-01T00:00:00Z"],
    ],
}


@pytest.fixture
def shop_manifest(tmp_path):
    return write_db(tmp_path / "shop", SHOP_DOC, SHOP_ROWS)


@pytest.fixture(scope="session")
def codec16():
    return pretrain_float_codec(16, steps=400, seed=0, check=False)


@pytest.fixture(scope="session")
def stub16():
    return StubEmbedding(16)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def build_db(root: Path, doc: dict, tables: dict[str, list[list]]):
    """Write, load and graph a small database in one go."""
    from rdbfm.graph import build_graph
    from rdbfm.ingest import load_manifest, load_tables

    path = write_db(root, doc, tables)
    m = load_manifest(path)
    frames, _ = load_tables(m, root)
    return build_graph(frames, m)


def star_doc(timed: bool = True) -> dict:
    purchases = {"name": "purchases", "columns": [
        {"name": "purchase_id", "kind": "primary_key"},
        {"name": "user_id", "kind": "foreign_key", "fk_target": "users.user_id"},
        {"name": "amount", "kind": "numerical"}]}
    if timed:
        purchases["time_column"] = "ts"
        purchases["columns"].append({"name": "ts", "kind": "timestamp"})
    return {
        "name": "star",
        "tables": [
            {"name": "users", "columns": [{"name": "user_id", "kind": "primary_key"},
                                          {"name": "churn", "kind": "categorical"}]},
            purchases,
        ],
        "relations": [{"fk_table": "purchases", "fk_column": "user_id", "pk_table": "users", "pk_column": "user_id"}],
    }


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion in the terminal summary

CRITERIA: dict[int, dict] = {}


def record(criterion: int, title: str, detail: str) -> None:
    """Attach measured numbers to a criterion; several tests of one criterion append."""
    entry = CRITERIA.setdefault(criterion, {"title": title, "detail": "", "passed": None})
    entry["detail"] = f"{entry['detail']}; {detail}" if entry["detail"] else detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    entry = CRITERIA.setdefault(n, {"title": title, "detail": "", "passed": None})
    entry["title"] = title
    entry["passed"] = rep.passed and entry["passed"] is not False


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        status = "PASS" if e["passed"] else "FAIL" if e["passed"] is False else "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d} {status}: {e['title']} | {e['detail']}")
