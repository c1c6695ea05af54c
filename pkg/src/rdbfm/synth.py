"""Deterministic synthetic relational databases with planted, oracle-recoverable labels.

Every database has three core tables in one of two vocabulary families:
a root table (the prediction target lives here), a hub table, and a timed
event table linking the two. Rules:

``share``
    label is positive iff more than half of the root's eligible events point
    at a flagged hub (a two-hop statistic: root <- event -> hub).
``wide``
    label is the sign of one of nine numeric root columns; the other eight
    are distractors.
``fanin``
    the root also references one row of a side table; the label is the sign
    of that row's score plus the mean amount of the root's eligible events,
    whose count varies widely between roots.
``completion``
    a single table whose other columns are deterministic functions of one
    categorical column (used for masked-cell completion).

Events at or after a root's cutoff are generated with the opposite
statistic, so any temporal leak shows up as a wrong label.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import RdbManifest, format_timestamp, parse_manifest, parse_timestamp
from .training import Split, TaskSpec

T_START = 1577836800  # 2020-01-01T00:00:00Z
T_SPAN = 2 * 365 * 86400

VOCAB = {
    "commerce-like": {
        "root": "users", "root_pk": "user_id", "target": "churn", "labels": ("no", "yes"),
        "num_attr": "age", "cat_attr": "region", "cat_values": ("north", "south", "east", "west"),
        "hub": "items", "hub_pk": "item_id", "flag_col": "category", "flag_on": "premium",
        "flag_off": ("basic", "standard", "budget"), "hub_num": "price",
        "event": "purchases", "event_pk": "purchase_id", "amount": "amount", "time": "purchased_at",
        "side": "segments", "side_pk": "segment_id", "score": "score", "wide": "attr",
    },
    "other-like": {
        "root": "patients", "root_pk": "patient_id", "target": "readmitted", "labels": ("false", "true"),
        "num_attr": "weight", "cat_attr": "district", "cat_values": ("alpha", "beta", "gamma", "delta"),
        "hub": "clinics", "hub_pk": "clinic_id", "flag_col": "specialty", "flag_on": "oncology",
        "flag_off": ("dermatology", "pediatrics", "optometry"), "hub_num": "capacity",
        "event": "visits", "event_pk": "visit_id", "amount": "cost", "time": "visited_at",
        "side": "wards", "side_pk": "ward_id", "score": "acuity", "wide": "reading",
    },
}

PALETTE = ("red", "orange", "yellow", "green", "blue", "indigo", "violet", "black")
SHADES = ("crimson", "amber", "lemon", "emerald", "azure", "navy", "lilac", "onyx")

RULES = ("share", "wide", "fanin", "completion")


@dataclass(frozen=True)
class SynthSpec:
    name: str = "commerce-a"
    domain: str = "commerce-like"
    rule: str = "share"
    seed: int = 0
    n_roots: int = 1000
    n_hubs: int = 200
    n_side: int = 50
    flagged_fraction: float = 0.3
    events_per_root: tuple[int, int] = (4, 10)  # eligible events, inclusive range
    late_events: tuple[int, int] = (0, 3)
    high_share: float = 0.7
    low_share: float = 0.3
    n_wide: int = 9
    signal_column: int = 3
    label_noise: float = 0.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    metric: str = "accuracy"

    def __post_init__(self):
        if self.domain not in VOCAB:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.n_roots < 10 or self.n_hubs < 10 or self.n_side < 10:
            raise ValueError("row counts must be at least 10")
        lo, hi = self.events_per_root
        if not 1 <= lo <= hi:
            raise ValueError("events_per_root must satisfy 1 <= min <= max")
        if not 0.0 <= self.low_share < 0.5 < self.high_share <= 1.0:
            raise ValueError("need low_share < 0.5 < high_share")
        if not 0.0 <= self.label_noise <= 0.5:
            raise ValueError("label_noise must lie in [0, 0.5]")
        if not 0 <= self.signal_column < self.n_wide:
            raise ValueError("signal_column out of range")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    @property
    def vocab(self) -> dict:
        return VOCAB[self.domain]

    @property
    def task_name(self) -> str:
        return f"{self.name}-{self.vocab['target']}" if self.rule != "completion" else f"{self.name}-shade"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        for k in ("events_per_root", "late_events", "split"):
            if k in doc:
                doc[k] = tuple(doc[k])
        return cls(**doc)


@dataclass
class GeneratedRdb:
    spec: SynthSpec
    root: Path
    manifest: RdbManifest
    tasks: list[Path] = field(default_factory=list)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def task(self, i: int = 0) -> TaskSpec:
        return TaskSpec.load(self.tasks[i])


def _col(name, kind, fk=None) -> dict:
    return {"name": name, "kind": kind} | ({"fk_target": fk} if fk else {})


def _num(x: float) -> str:
    return f"{x:.6f}"


def _manifest_doc(spec: SynthSpec) -> dict:
    v = spec.vocab
    if spec.rule == "completion":
        return {
            "name": spec.name,
            "tables": [{"name": "palette", "columns": [
                _col("palette_id", "primary_key"), _col("color", "categorical"),
                _col("shade", "categorical"), _col("code", "numerical")]}],
            "relations": [],
        }
    root_cols = [_col(v["root_pk"], "primary_key"), _col(v["num_attr"], "numerical"), _col(v["cat_attr"], "categorical")]
    if spec.rule == "wide":
        root_cols += [_col(f"{v['wide']}_{j}", "numerical") for j in range(spec.n_wide)]
    if spec.rule == "fanin":
        root_cols.append(_col(v["side_pk"], "foreign_key", f"{v['side']}.{v['side_pk']}"))
    root_cols.append(_col(v["target"], "categorical"))
    tables = [
        {"name": v["root"], "columns": root_cols},
        {"name": v["hub"], "columns": [_col(v["hub_pk"], "primary_key"), _col(v["flag_col"], "categorical"),
                                      _col(v["hub_num"], "numerical")]},
        {"name": v["event"], "time_column": v["time"], "columns": [
            _col(v["event_pk"], "primary_key"),
            _col(v["root_pk"], "foreign_key", f"{v['root']}.{v['root_pk']}"),
            _col(v["hub_pk"], "foreign_key", f"{v['hub']}.{v['hub_pk']}"),
            _col(v["amount"], "numerical"), _col(v["time"], "timestamp")]},
    ]
    relations = [
        {"fk_table": v["event"], "fk_column": v["root_pk"], "pk_table": v["root"], "pk_column": v["root_pk"]},
        {"fk_table": v["event"], "fk_column": v["hub_pk"], "pk_table": v["hub"], "pk_column": v["hub_pk"]},
    ]
    if spec.rule == "fanin":
        tables.append({"name": v["side"], "columns": [_col(v["side_pk"], "primary_key"), _col(v["score"], "numerical")]})
        relations.append({"fk_table": v["root"], "fk_column": v["side_pk"], "pk_table": v["side"], "pk_column": v["side_pk"]})
    return {"name": spec.name, "tables": tables, "relations": relations}


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _splits(spec: SynthSpec, rng: np.random.Generator, cutoffs: np.ndarray) -> dict[str, Split]:
    n = len(cutoffs)
    perm = rng.permutation(n)
    a = int(round(spec.split[0] * n))
    b = a + int(round(spec.split[1] * n))
    out = {}
    for s, idx in (("train", perm[:a]), ("val", perm[a:b]), ("test", perm[b:])):
        idx = np.sort(idx)
        out[s] = Split(idx, cutoffs[idx])
    return out


def _generate_completion(spec: SynthSpec, rng: np.random.Generator, out: Path) -> tuple[dict, list[int], np.ndarray]:
    colors = rng.integers(0, len(PALETTE), spec.n_roots)
    rows = [[str(i), PALETTE[c], SHADES[c], _num(10.0 * c + 5.0)] for i, c in enumerate(colors)]
    _write_csv(out / "palette.csv", ["palette_id", "color", "shade", "code"], rows)
    cut = np.full(spec.n_roots, T_START + T_SPAN, dtype=np.int64)
    return {"table": "palette", "column": "shade", "labels": list(SHADES)}, list(colors), cut


def _generate_relational(spec: SynthSpec, rng: np.random.Generator, out: Path):
    v = spec.vocab
    n = spec.n_roots
    # hubs: a fixed fraction carry the flag value
    flagged = np.zeros(spec.n_hubs, dtype=bool)
    flagged[rng.choice(spec.n_hubs, max(1, int(round(spec.flagged_fraction * spec.n_hubs))), replace=False)] = True
    off_vals = rng.integers(0, len(v["flag_off"]), spec.n_hubs)
    hub_price = rng.lognormal(3.0, 0.6, spec.n_hubs)
    on_ids, off_ids = np.flatnonzero(flagged), np.flatnonzero(~flagged)
    _write_csv(out / f"{v['hub']}.csv", [v["hub_pk"], v["flag_col"], v["hub_num"]],
               [[str(i), v["flag_on"] if flagged[i] else v["flag_off"][off_vals[i]], _num(hub_price[i])]
                for i in range(spec.n_hubs)])

    cutoffs = T_START + T_SPAN // 2 + rng.integers(0, T_SPAN // 2, n)
    labels = rng.integers(0, 2, n)
    side_score = np.round(rng.normal(0.0, 1.0, spec.n_side), 6)
    side_ref = rng.integers(0, spec.n_side, n)
    wide = np.round(rng.normal(0.0, 1.0, (n, spec.n_wide)), 6)
    level = rng.normal(0.0, 1.0, n)
    if spec.rule == "wide":
        labels = (wide[:, spec.signal_column] > 0).astype(int)

    events = []  # (root, hub, amount, ts)
    lo, hi = spec.events_per_root
    for u in range(n):
        k = int(rng.integers(lo, hi + 1))
        late = int(rng.integers(spec.late_events[0], spec.late_events[1] + 1))
        if spec.rule == "share":
            if labels[u]:
                n_on = int(rng.integers(math.ceil(spec.high_share * k), k + 1))
                late_on = int(rng.integers(0, math.floor(spec.low_share * late) + 1))
            else:
                n_on = int(rng.integers(0, math.floor(spec.low_share * k) + 1))
                late_on = int(rng.integers(math.ceil(spec.high_share * late), late + 1)) if late else 0
        else:
            n_on = int(rng.binomial(k, spec.flagged_fraction))
            late_on = int(rng.binomial(late, spec.flagged_fraction))
        for j in range(k + late):
            is_late = j >= k
            on = (j < n_on) if not is_late else (j - k < late_on)
            hub = int(rng.choice(on_ids if on else off_ids))
            if spec.rule == "fanin":
                # late events carry the opposite sign of the root's level
                amount = round((-level[u] if is_late else level[u]) + rng.normal(0.0, 0.3), 6)
            else:
                amount = rng.lognormal(2.0, 0.8)
            if is_late:
                ts = int(cutoffs[u] + rng.integers(0, T_SPAN // 4))
            else:
                ts = int(T_START + rng.integers(0, cutoffs[u] - T_START))
            events.append((u, hub, amount, ts))
    if spec.rule == "fanin":
        elig: list[list[float]] = [[] for _ in range(n)]
        for u, _, a, ts in events:
            if ts < cutoffs[u]:
                elig[u].append(a)
        labels = np.array([int(side_score[side_ref[u]] + math.fsum(elig[u]) / len(elig[u]) > 0) for u in range(n)])

    order = sorted(range(len(events)), key=lambda i: (events[i][3], i))
    _write_csv(out / f"{v['event']}.csv", [v["event_pk"], v["root_pk"], v["hub_pk"], v["amount"], v["time"]],
               [[str(eid), str(events[i][0]), str(events[i][1]), _num(events[i][2]), format_timestamp(events[i][3])]
                for eid, i in enumerate(order)])

    if spec.label_noise > 0:
        flip = rng.random(n) < spec.label_noise
        stored = np.where(flip, 1 - labels, labels)
    else:
        stored = labels
    header = [v["root_pk"], v["num_attr"], v["cat_attr"]]
    if spec.rule == "wide":
        header += [f"{v['wide']}_{j}" for j in range(spec.n_wide)]
    if spec.rule == "fanin":
        header.append(v["side_pk"])
    header.append(v["target"])
    ages = rng.integers(18, 80, n)
    cats = rng.integers(0, len(v["cat_values"]), n)
    rows = []
    for u in range(n):
        r = [str(u), _num(float(ages[u])), v["cat_values"][cats[u]]]
        if spec.rule == "wide":
            r += [_num(x) for x in wide[u]]
        if spec.rule == "fanin":
            r.append(str(side_ref[u]))
        r.append(v["labels"][stored[u]])
        rows.append(r)
    _write_csv(out / f"{v['root']}.csv", header, rows)
    if spec.rule == "fanin":
        _write_csv(out / f"{v['side']}.csv", [v["side_pk"], v["score"]],
                   [[str(i), _num(s)] for i, s in enumerate(side_score)])
    return {"table": v["root"], "column": v["target"], "labels": list(v["labels"])}, stored, cutoffs.astype(np.int64)


def generate(spec: SynthSpec, out_dir: str | Path) -> GeneratedRdb:
    """Write manifest.json, one CSV per table and tasks/<task>.json under ``out_dir``.

    Output is a pure function of ``spec``: the same spec gives byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    doc = _manifest_doc(spec)
    manifest = parse_manifest(doc)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if spec.rule == "completion":
        target, _, cutoffs = _generate_completion(spec, rng, out)
    else:
        target, _, cutoffs = _generate_relational(spec, rng, out)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n", encoding="utf-8")
    task = TaskSpec(spec.task_name, spec.name, target["table"], target["column"], "classification",
                    spec.metric, _splits(spec, rng, cutoffs), target["labels"])
    (out / "tasks").mkdir(exist_ok=True)
    path = out / "tasks" / f"{task.name}.json"
    task.save(path)
    return GeneratedRdb(spec, out, manifest, [path])


def _read(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def oracle_labels(spec: SynthSpec, data_dir: str | Path, cutoffs: dict[int, int] | None = None) -> dict[int, int]:
    """Recompute the planted rule for every root row from the raw CSVs.

    Only events strictly before each row's cutoff are used. Cutoffs default
    to the ones in the generated task file. Returns row -> label index.
    """
    data_dir = Path(data_dir)
    if cutoffs is None:
        task = TaskSpec.load(data_dir / "tasks" / f"{spec.task_name}.json")
        cutoffs = {}
        for sp in task.splits.values():
            cutoffs.update(zip(sp.rows.tolist(), sp.cutoffs.tolist()))
    if spec.rule == "completion":
        rows = _read(data_dir / "palette.csv")
        return {int(r["palette_id"]): PALETTE.index(r["color"]) for r in rows}
    v = spec.vocab
    roots = _read(data_dir / f"{v['root']}.csv")
    if spec.rule == "wide":
        return {int(r[v["root_pk"]]): int(float(r[f"{v['wide']}_{spec.signal_column}"]) > 0) for r in roots}
    events = _read(data_dir / f"{v['event']}.csv")
    per_root: dict[int, list[dict]] = {}
    for e in events:
        u = int(e[v["root_pk"]])
        if parse_timestamp(e[v["time"]]) < cutoffs[u]:
            per_root.setdefault(u, []).append(e)
    out = {}
    if spec.rule == "share":
        flag = {int(h[v["hub_pk"]]): h[v["flag_col"]] == v["flag_on"] for h in _read(data_dir / f"{v['hub']}.csv")}
        for r in roots:
            u = int(r[v["root_pk"]])
            ev = per_root.get(u, [])
            share = sum(flag[int(e[v["hub_pk"]])] for e in ev) / len(ev) if ev else 0.0
            out[u] = int(share > 0.5)
    else:
        score = {int(s[v["side_pk"]]): float(s[v["score"]]) for s in _read(data_dir / f"{v['side']}.csv")}
        for r in roots:
            u = int(r[v["root_pk"]])
            ev = per_root.get(u, [])
            mean = math.fsum(float(e[v["amount"]]) for e in ev) / len(ev) if ev else 0.0
            out[u] = int(score[int(r[v["side_pk"]])] + mean > 0)
    return out


def oracle_label(spec: SynthSpec, data_dir: str | Path, row: int) -> int:
    return oracle_labels(spec, data_dir)[int(row)]
