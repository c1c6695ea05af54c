"""Row-to-node heterogeneous temporal graph built from PK/FK pairs.

Every row becomes a node of its table's type. Each PK-FK pair yields a
forward relation (FK row -> referenced PK row) and a reversed relation with
the same edges swapped, both stored as CSR adjacency keyed by source node.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ParseError
from .ingest import TIME_NEG_INF, RdbManifest, Relation, TableFrame, parse_manifest, pk_index


class Direction(str, Enum):
    FORWARD = "forward"
    REVERSED = "reversed"


@dataclass(frozen=True)
class RelationAdj:
    name: str
    src_type: int
    dst_type: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    direction: Direction
    relation: Relation

    @property
    def num_edges(self) -> int:
        return int(self.csr_offsets[-1])

    def neighbors(self, node: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[node] : self.csr_offsets[node + 1]]

    def edge_list(self) -> np.ndarray:
        """(E, 2) array of (src, dst) pairs in CSR order."""
        src = np.repeat(np.arange(len(self.csr_offsets) - 1), np.diff(self.csr_offsets))
        return np.stack([src, self.csr_targets], axis=1)


@dataclass
class HeteroGraph:
    manifest: RdbManifest
    node_types: list[tuple[str, int]]
    relations: list[RelationAdj]
    node_times: list[np.ndarray]
    frames: list[TableFrame] | None = None

    def type_id(self, table: str) -> int:
        for k, (name, _) in enumerate(self.node_types):
            if name == table:
                return k
        raise KeyError(table)

    def num_nodes(self, k: int) -> int:
        return self.node_types[k][1]

    def relations_from(self, k: int) -> list[int]:
        return [r for r, rel in enumerate(self.relations) if rel.src_type == k]

    def frame(self, k: int) -> TableFrame:
        if self.frames is None:
            raise ConsistencyError("graph was loaded without table payloads")
        return self.frames[k]


def _csr(src: np.ndarray, dst: np.ndarray, n_src: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((dst, src))
    counts = np.bincount(src, minlength=n_src)
    offsets = np.zeros(n_src + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, dst[order].astype(np.int64)


def _relation_pair(rel: Relation, frames: dict[str, TableFrame], type_ids: dict[str, int]):
    fk_frame, pk_frame = frames[rel.fk_table], frames[rel.pk_table]
    lookup = pk_index(pk_frame)
    vals = fk_frame.columns[rel.fk_column]
    mask = fk_frame.null_mask[rel.fk_column]
    src, dst = [], []
    for i in np.flatnonzero(~mask):
        j = lookup.get(int(vals[i]))
        if j is None:
            raise ConsistencyError(f"{rel.name}: row {i} references missing key {int(vals[i])}")
        src.append(i)
        dst.append(j)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    fk_t, pk_t = type_ids[rel.fk_table], type_ids[rel.pk_table]
    fwd = RelationAdj(rel.name, fk_t, pk_t, *_csr(src, dst, fk_frame.row_count), Direction.FORWARD, rel)
    rev_name = f"{rel.pk_table}←{rel.fk_table}.{rel.fk_column}"
    rev = RelationAdj(rev_name, pk_t, fk_t, *_csr(dst, src, pk_frame.row_count), Direction.REVERSED, rel)
    return fwd, rev


def build_graph(frames: list[TableFrame], manifest: RdbManifest, workers: int = 1) -> HeteroGraph:
    """R2N construction: one node per row, forward + reversed relation per FK."""
    names = [f.name for f in frames]
    if sorted(names) != sorted(manifest.table_names) or len(set(names)) != len(names):
        raise ConsistencyError(f"frames {names} do not match manifest tables {manifest.table_names}")
    by_name = {f.name: f for f in frames}
    ordered = [by_name[t] for t in manifest.table_names]
    for f in ordered:
        if f.spec != manifest.table(f.name):
            raise ConsistencyError(f"frame spec for {f.name} differs from manifest")
    type_ids = {f.name: k for k, f in enumerate(ordered)}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(lambda r: _relation_pair(r, by_name, type_ids), manifest.relations))
    else:
        pairs = [_relation_pair(r, by_name, type_ids) for r in manifest.relations]
    relations = [fwd for fwd, _ in pairs] + [rev for _, rev in pairs]

    times = []
    for f in ordered:
        t = f.times()
        times.append(np.full(f.row_count, TIME_NEG_INF, dtype=np.int64) if t is None else t)
    return HeteroGraph(
        manifest=manifest,
        node_types=[(f.name, f.row_count) for f in ordered],
        relations=relations,
        node_times=times,
        frames=ordered,
    )


def relation_metadata_text(rel: RelationAdj, manifest: RdbManifest) -> str:
    r = rel.relation
    manifest.table(r.fk_table)  # raises if the relation is foreign to this manifest
    text = f"edge from {r.fk_table} via {r.fk_column} to {r.pk_table}"
    return "reverse of " + text if rel.direction is Direction.REVERSED else text


# ---------------------------------------------------------------------------
# binary snapshot
#
# layout (all integers little-endian):
#   8 bytes   magic b"RDBGRAPH"
#   u32       format version
#   u64       header length H
#   H bytes   UTF-8 JSON header: manifest, node_types, relations[...]
#   then, in header order, raw int64 arrays: node_times per type, followed by
#   csr_offsets and csr_targets per relation.

SNAPSHOT_MAGIC = b"RDBGRAPH"
SNAPSHOT_VERSION = 1


def save_graph(graph: HeteroGraph, path: str | Path) -> None:
    header = {
        "manifest": graph.manifest.to_json(),
        "node_types": [[n, c] for n, c in graph.node_types],
        "relations": [
            {
                "name": r.name,
                "src_type": r.src_type,
                "dst_type": r.dst_type,
                "direction": r.direction.value,
                "relation": [r.relation.fk_table, r.relation.fk_column, r.relation.pk_table, r.relation.pk_column],
                "n_offsets": len(r.csr_offsets),
                "n_targets": len(r.csr_targets),
            }
            for r in graph.relations
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<IQ", SNAPSHOT_VERSION, len(blob)))
        fh.write(blob)
        for t in graph.node_times:
            fh.write(np.ascontiguousarray(t, dtype="<i8").tobytes())
        for r in graph.relations:
            fh.write(np.ascontiguousarray(r.csr_offsets, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(r.csr_targets, dtype="<i8").tobytes())
    tmp.replace(path)


def load_graph(path: str | Path, frames: list[TableFrame] | None = None) -> HeteroGraph:
    data = Path(path).read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ParseError(f"{path}: not a graph snapshot")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != SNAPSHOT_VERSION:
        raise ParseError(f"{path}: unsupported snapshot version {version}")
    pos = 8 + 12
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen

    def take(n: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(data, dtype="<i8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
        return arr

    node_types = [(n, int(c)) for n, c in header["node_types"]]
    times = [take(c) for _, c in node_types]
    relations = []
    for h in header["relations"]:
        offsets = take(h["n_offsets"])
        targets = take(h["n_targets"])
        relations.append(
            RelationAdj(h["name"], h["src_type"], h["dst_type"], offsets, targets, Direction(h["direction"]), Relation(*h["relation"]))
        )
    return HeteroGraph(parse_manifest(header["manifest"]), node_types, relations, times, frames)
