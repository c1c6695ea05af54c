"""Collation of sampled subgraphs into flat padded tensors for the model."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .features import EnrichedSubgraph, FeatureStore
from .sampler import RootedSubgraph


@dataclass
class GraphBatch:
    """B subgraphs flattened into N node entries.

    ``parent``/``relation`` index into the flat entry list / relation table
    (-1 for roots). Message-passing groups are (parent, relation) pairs;
    ``child_index[c]`` belongs to group ``child_group[c]``, and group g sends
    to ``group_parent[g]`` under relation ``group_rel[g]``.
    """

    x: torch.Tensor  # (N, L, d)
    m: torch.Tensor  # (N, L, d)
    mask: torch.Tensor  # (N, L) bool
    parent: torch.Tensor  # (N,)
    relation: torch.Tensor  # (N,)
    example: torch.Tensor  # (N,)
    roots: torch.Tensor  # (B,)
    t: torch.Tensor  # (B, d)
    e: torch.Tensor  # (R, d)
    child_index: torch.Tensor
    child_group: torch.Tensor
    group_parent: torch.Tensor
    group_rel: torch.Tensor

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def size(self) -> int:
        return self.roots.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[-1]

    def to(self, dtype: torch.dtype) -> "GraphBatch":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.to(dtype) if v.is_floating_point() else v
        return GraphBatch(**kw)


def _assemble(subs_len, parents, relations, x, m, mask, t, e) -> GraphBatch:
    offsets = np.concatenate([[0], np.cumsum(subs_len)[:-1]]).astype(np.int64)
    parent = np.concatenate([np.where(p >= 0, p + o, -1) for p, o in zip(parents, offsets)]).astype(np.int64)
    relation = np.concatenate(relations).astype(np.int64)
    example = np.repeat(np.arange(len(subs_len)), subs_len)
    child = np.flatnonzero(parent >= 0)
    n_rel = max(len(e), 1)
    key = parent[child] * n_rel + relation[child]
    uniq, inv = np.unique(key, return_inverse=True)
    return GraphBatch(
        x=torch.from_numpy(x),
        m=torch.from_numpy(m),
        mask=torch.from_numpy(mask),
        parent=torch.from_numpy(parent),
        relation=torch.from_numpy(relation),
        example=torch.from_numpy(example),
        roots=torch.from_numpy(offsets),
        t=torch.from_numpy(np.ascontiguousarray(t, dtype=np.float32)),
        e=torch.from_numpy(np.ascontiguousarray(e, dtype=np.float32)),
        child_index=torch.from_numpy(child),
        child_group=torch.from_numpy(inv.reshape(-1).astype(np.int64)),
        group_parent=torch.from_numpy(uniq // n_rel),
        group_rel=torch.from_numpy(uniq % n_rel),
    )


def collate(subs: list[RootedSubgraph], store: FeatureStore) -> GraphBatch:
    """Gather features for a list of subgraphs from one store (fast path)."""
    lens = [len(s) for s in subs]
    node_type = np.concatenate([s.node_type for s in subs])
    node_id = np.concatenate([s.node_id for s in subs])
    x, m, mask = store.gather(node_type, node_id)
    start = 0
    t = []
    for s in subs:
        r = s.root
        if r.column in store.columns[r.node_type]:
            j = store.column_index(r.node_type, r.column)
            hit = np.flatnonzero(store.root_mask(s)) + start
            mask[hit, j] = False
        t.append(store.task_embedding(r.column))
        start += len(s)
    return _assemble(lens, [s.parent for s in subs], [s.relation for s in subs], x, m, mask, np.stack(t), store.relation_emb)


def collate_enriched(egs: list[EnrichedSubgraph]) -> GraphBatch:
    """Collate already-enriched subgraphs; they must share one relation table."""
    e = egs[0].relation_metadata
    for g in egs[1:]:
        if g.relation_metadata.shape != e.shape or not np.array_equal(g.relation_metadata, e):
            raise ValueError("enriched subgraphs come from different relation tables")
    L = max(g.x.shape[1] for g in egs)

    def pad(a, fill=0):
        if a.shape[1] == L:
            return a
        shape = (a.shape[0], L) + a.shape[2:]
        out = np.full(shape, fill, dtype=a.dtype)
        out[:, : a.shape[1]] = a
        return out

    x = np.concatenate([pad(g.x) for g in egs]).astype(np.float32)
    m = np.concatenate([pad(g.m) for g in egs]).astype(np.float32)
    mask = np.concatenate([pad(g.mask, False) for g in egs])
    t = np.stack([g.task_embedding for g in egs])
    return _assemble(
        [len(g.base) for g in egs], [g.base.parent for g in egs], [g.base.relation for g in egs], x, m, mask, t, e
    )
