"""Temporal rooted-subgraph sampling.

The sampled subgraph is a layered computation tree: every (hop, parent)
expansion materialises its children as fresh entries, so a row reachable
along two paths appears twice. Only rows strictly earlier than the cutoff
are admitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RootNotEligible, RootNotFound
from .graph import HeteroGraph
from .ingest import TIME_NEG_INF, TIME_POS_INF, format_timestamp

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SampleConfig:
    hops: int = 2
    fanout: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.fanout < 1:
            raise ValueError("fanout must be >= 1")


@dataclass(frozen=True)
class Root:
    node_type: int
    row: int
    column: str
    cutoff: int


@dataclass
class RootedSubgraph:
    """Flat storage of the layered tree; entry 0 is always the root.

    ``parent[i]`` is the entry index this node was expanded from and
    ``relation[i]`` the relation id traversed from the parent to reach it
    (so the parent aggregates this node under that relation). Both are -1
    for the root.
    """

    root: Root
    node_type: np.ndarray
    node_id: np.ndarray
    hop: np.ndarray
    parent: np.ndarray
    relation: np.ndarray
    hops: int = 0
    times: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.node_type)

    @property
    def layers(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.hop == l) for l in range(self.hops + 1)]

    @property
    def edges(self) -> list[np.ndarray]:
        """Per hop l, an (E, 3) array of (child entry, parent entry, relation) rows."""
        out = []
        for l in range(self.hops):
            child = np.flatnonzero(self.hop == l + 1)
            out.append(np.stack([child, self.parent[child], self.relation[child]], axis=1))
        return out

    def layer_nodes(self, l: int) -> list[tuple[int, int]]:
        idx = np.flatnonzero(self.hop == l)
        return [(int(self.node_type[i]), int(self.node_id[i])) for i in idx]


def example_rng(seed: int, node_type: int, row: int) -> np.random.Generator:
    """Per-root generator, independent of batch order and thread count."""
    return np.random.default_rng([seed & _SEED_MASK, node_type, row])


def eligible_neighbors(graph: HeteroGraph, node: int, relation: int, cutoff: int) -> np.ndarray:
    """Neighbours of ``node`` via ``relation`` whose time is strictly before ``cutoff``."""
    rel = graph.relations[relation]
    nbrs = rel.neighbors(node)
    if len(nbrs) == 0:
        return nbrs
    return nbrs[graph.node_times[rel.dst_type][nbrs] < cutoff]


def resolve_root(graph: HeteroGraph, table: str | int, row: int, column: str, cutoff: int | None) -> Root:
    try:
        k = table if isinstance(table, int) else graph.type_id(table)
        name, count = graph.node_types[k]
    except (KeyError, IndexError):
        raise RootNotFound(f"unknown node type {table!r}") from None
    if not 0 <= row < count:
        raise RootNotFound(f"{name} has no row {row} (rows: {count})")
    spec = graph.manifest.table(name)
    try:
        col = spec.column(column)
    except KeyError:
        raise RootNotEligible(f"{name} has no column {column!r}") from None
    if col.kind.is_key:
        raise RootNotEligible(f"target column {name}.{column} is a key column")
    if cutoff is None:
        t = int(graph.node_times[k][row])
        if t == TIME_NEG_INF or t == TIME_POS_INF:
            raise RootNotEligible(f"{name} row {row} has no timestamp; an explicit cutoff is required")
        cutoff = t
    return Root(k, int(row), column, int(cutoff))


def sample_subgraph(
    graph: HeteroGraph,
    root: tuple[str | int, int, str] | Root,
    cutoff: int | None,
    cfg: SampleConfig,
) -> RootedSubgraph:
    """Uniformly sample up to ``cfg.fanout`` eligible neighbours per relation per node, ``cfg.hops`` deep."""
    if not isinstance(root, Root):
        root = resolve_root(graph, root[0], root[1], root[2], cutoff)
    rng = example_rng(cfg.seed, root.node_type, root.row)

    node_type = [root.node_type]
    node_id = [root.row]
    hop = [0]
    parent = [-1]
    relation = [-1]
    rels_by_type = [graph.relations_from(k) for k in range(len(graph.node_types))]

    frontier = [0]
    for l in range(cfg.hops):
        nxt = []
        for p in frontier:
            k, v = node_type[p], node_id[p]
            for r in rels_by_type[k]:
                nbrs = eligible_neighbors(graph, v, r, root.cutoff)
                if len(nbrs) > cfg.fanout:
                    nbrs = np.sort(nbrs[rng.choice(len(nbrs), cfg.fanout, replace=False)])
                dst = graph.relations[r].dst_type
                for u in nbrs:
                    nxt.append(len(node_type))
                    node_type.append(dst)
                    node_id.append(int(u))
                    hop.append(l + 1)
                    parent.append(p)
                    relation.append(r)
        frontier = nxt
        if not frontier:
            break

    node_type = np.asarray(node_type, dtype=np.int64)
    node_id = np.asarray(node_id, dtype=np.int64)
    times = np.array([graph.node_times[k][i] for k, i in zip(node_type, node_id)], dtype=np.int64)
    return RootedSubgraph(
        root=root,
        node_type=node_type,
        node_id=node_id,
        hop=np.asarray(hop, dtype=np.int64),
        parent=np.asarray(parent, dtype=np.int64),
        relation=np.asarray(relation, dtype=np.int64),
        hops=cfg.hops,
        times=times,
    )


def _fmt_time(t: int) -> str:
    if t == TIME_NEG_INF:
        return "-inf"
    if t == TIME_POS_INF:
        return "+inf"
    return format_timestamp(t)


def format_tree(sub: RootedSubgraph, graph: HeteroGraph) -> tuple[str, int]:
    """Render the subgraph as an indented tree. Returns (text, causality violations)."""
    children: dict[int, list[int]] = {}
    for i in range(1, len(sub)):
        children.setdefault(int(sub.parent[i]), []).append(i)
    r = sub.root
    lines = [
        f"root {graph.node_types[r.node_type][0]}#{r.row} target={r.column} "
        f"cutoff={_fmt_time(r.cutoff)} hops={sub.hops} nodes={len(sub)}"
    ]
    violations = 0

    def walk(i: int, depth: int):
        nonlocal violations
        for c in children.get(i, []):
            t = int(sub.times[c])
            flag = ""
            if t >= r.cutoff:
                violations += 1
                flag = "  !! CAUSALITY VIOLATION: t >= cutoff"
            name = graph.node_types[sub.node_type[c]][0]
            lines.append(
                f"{'  ' * depth}[hop {sub.hop[c]}] {name}#{sub.node_id[c]} t={_fmt_time(t)} "
                f"via {graph.relations[sub.relation[c]].name}{flag}"
            )
            walk(c, depth + 1)

    walk(0, 1)
    return "\n".join(lines), violations
