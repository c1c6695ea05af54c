"""Message-passing network over enriched rooted subgraphs.

Each layer first adds an attention read-out of the node's own cells to the
node state ``u`` and then adds a hierarchical message from its children:
per relation, a mean of ``amlp(u_child)``; across relations, an elementwise
max of those means gated by the relation's metadata embedding. The root's
final state is the output ``z``.

Layer 1 defaults to self-attention over (column name + value) cells with
mean pooling. Later layers use task-conditioned cross-attention whose query
is computed from the node state and the task embedding, keys from column
names and values from cell encodings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .batch import GraphBatch, collate_enriched
from .errors import DimensionMismatch, DuplicateLabels, NotFitted, StaleTrace
from .features import EmbeddingProvider, EnrichedSubgraph, FloatCodec


@dataclass(frozen=True)
class ModelConfig:
    d: int = 512
    layers: int = 4
    heads: int = 8
    dropout: float = 0.1
    first_layer: str = "self"  # "self" | "cross"
    attention: str = "cross"  # "cross" | "mean" (ablation: plain average of cells)
    aggregation: str = "hier"  # "hier" | "mean" (ablation: one flat mean over all neighbours)

    def __post_init__(self):
        if self.d % self.heads:
            raise DimensionMismatch(f"d={self.d} is not divisible by heads={self.heads}")
        if self.first_layer not in ("self", "cross"):
            raise ValueError(f"first_layer must be 'self' or 'cross', not {self.first_layer!r}")
        if self.attention not in ("cross", "mean"):
            raise ValueError(f"attention must be 'cross' or 'mean', not {self.attention!r}")
        if self.aggregation not in ("hier", "mean"):
            raise ValueError(f"aggregation must be 'hier' or 'mean', not {self.aggregation!r}")


def _mlp(d_in: int, d_out: int, bias: bool = True) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out, bias=bias), nn.SiLU(), nn.Linear(d_out, d_out, bias=bias))


def _masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
    return torch.softmax(logits, dim=-1) * mask


class TaskQuery(nn.Module):
    """Query MLP over the node state, modulated by the task embedding.

    q = W2 silu(W1 u) * (1 + Wt t). The state path has no biases, so an
    all-zero state yields a zero query whatever the task.
    """

    def __init__(self, d: int):
        super().__init__()
        self.state = _mlp(d, d, bias=False)
        self.task = nn.Linear(d, d)

    def forward(self, u: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.state(u) * (1.0 + self.task(t))


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.d, self.heads, self.dh = d, heads, d // heads
        self.query = TaskQuery(d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, u, t, m, x, mask, uniform: bool = False):
        n, L, _ = x.shape
        v = self.value(x).view(n, L, self.heads, self.dh)
        if uniform:
            logits = torch.zeros(n, self.heads, L, dtype=x.dtype)
        else:
            q = self.query(u, t).view(n, self.heads, self.dh)
            k = self.key(m).view(n, L, self.heads, self.dh)
            logits = torch.einsum("nhc,nlhc->nhl", q, k) / math.sqrt(self.dh)
        w = _masked_softmax(logits, mask[:, None, :])
        o = torch.einsum("nhl,nlhc->nhc", self.drop(w), v).reshape(n, self.d)
        has = mask.any(dim=1, keepdim=True).to(x.dtype)
        return self.out(o) * has, w


class FirstLayerSelfAttention(nn.Module):
    """Self-attention among a node's cells, then a mean over cells."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.d, self.heads, self.dh = d, heads, d // heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, m, x, mask):
        n, L, _ = x.shape
        h = m + x
        q = self.query(h).view(n, L, self.heads, self.dh)
        k = self.key(h).view(n, L, self.heads, self.dh)
        v = self.value(x).view(n, L, self.heads, self.dh)
        logits = torch.einsum("nihc,njhc->nhij", q, k) / math.sqrt(self.dh)
        w = _masked_softmax(logits, mask[:, None, None, :])
        o = torch.einsum("nhij,njhc->nihc", self.drop(w), v).reshape(n, L, self.d)
        cnt = mask.sum(dim=1, keepdim=True).to(x.dtype)
        pooled = (o * mask[..., None]).sum(dim=1) / cnt.clamp(min=1.0)
        return self.out(pooled) * (cnt > 0).to(x.dtype), w


class Layer(nn.Module):
    def __init__(self, cfg: ModelConfig, first: bool):
        super().__init__()
        self.self_attention = first and cfg.first_layer == "self" and cfg.attention == "cross"
        if self.self_attention:
            self.attn = FirstLayerSelfAttention(cfg.d, cfg.heads, cfg.dropout)
        else:
            self.attn = CrossAttention(cfg.d, cfg.heads, cfg.dropout)
        self.amlp = _mlp(cfg.d, cfg.d)


@dataclass
class ForwardTrace:
    """Per-layer activations of one forward pass (detached copies) plus the live output."""

    u: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)
    h: list[torch.Tensor] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)
    z: torch.Tensor | None = None
    mode: str = "eval"
    version: tuple = ()
    consumed: bool = False


@dataclass
class Prediction:
    kind: str
    z: np.ndarray
    class_probs: np.ndarray | None = None
    reg_value_normalized: float | None = None
    reg_value_denormalized: float | None = None


class RDBModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(Layer(cfg, first=(l == 0)) for l in range(cfg.layers))

    @property
    def d(self) -> int:
        return self.cfg.d

    def param_version(self) -> tuple:
        return tuple(p._version for p in self.parameters())

    # -- components --------------------------------------------------------

    def cross_attention(self, layer: int, u, t, m, x, mask=None):
        """Single-node or batched cross-attention read-out of layer ``layer`` (0-based)."""
        blk = self.layers[layer].attn
        if not isinstance(blk, CrossAttention):
            raise ValueError(f"layer {layer} is not a cross-attention layer")
        single = u.dim() == 1
        if single:
            u, t, m, x = u[None], t[None], m[None], x[None]
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool)
        elif single:
            mask = mask[None]
        self._check_dims(x, m)
        v, w = blk(u, t, m, x, mask, uniform=self.cfg.attention == "mean")
        return (v[0], w[0]) if single else (v, w)

    def self_attention_first_layer(self, m, x, mask=None):
        blk = self.layers[0].attn
        if not isinstance(blk, FirstLayerSelfAttention):
            raise ValueError("first layer is not configured for self-attention")
        single = x.dim() == 2
        if single:
            m, x = m[None], x[None]
            mask = None if mask is None else mask[None]
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool)
        self._check_dims(x, m)
        v, w = blk(m, x, mask)
        return (v[0], w[0]) if single else (v, w)

    def aggregate_relation(self, layer: int, neighbor_states: torch.Tensor) -> torch.Tensor:
        """Mean of ``amlp(u_j)`` over one relation's neighbours; zero if there are none."""
        if neighbor_states.shape[0] == 0:
            return torch.zeros(self.d, dtype=neighbor_states.dtype)
        return self.layers[layer].amlp(neighbor_states).mean(dim=0)

    @staticmethod
    def aggregate_across_relations(h_r: torch.Tensor, e_r: torch.Tensor) -> torch.Tensor:
        """Elementwise max over relations of ``h_r * e_r``; zero if no relation is present."""
        if h_r.shape[0] == 0:
            return torch.zeros(e_r.shape[-1], dtype=e_r.dtype)
        return (h_r * e_r).amax(dim=0)

    def _message(self, layer: Layer, u: torch.Tensor, b: GraphBatch) -> torch.Tensor:
        h = torch.zeros_like(u)
        if b.child_index.numel() == 0:
            return h
        msg = layer.amlp(u[b.child_index])
        d = u.shape[1]
        if self.cfg.aggregation == "mean":
            gated = msg * b.e[b.relation[b.child_index]]
            parents = b.parent[b.child_index]
            h = h.index_add(0, parents, gated)
            cnt = torch.bincount(parents, minlength=u.shape[0]).clamp(min=1).to(u.dtype)
            return h / cnt[:, None]
        G = b.group_parent.shape[0]
        sums = torch.zeros(G, d, dtype=u.dtype).index_add(0, b.child_group, msg)
        cnt = torch.bincount(b.child_group, minlength=G).to(u.dtype)
        gated = sums / cnt[:, None] * b.e[b.group_rel]
        idx = b.group_parent[:, None].expand(G, d)
        return h.scatter_reduce(0, idx, gated, reduce="amax", include_self=False)

    def _check_dims(self, x, m):
        if x.shape[-1] != self.d or m.shape != x.shape:
            raise DimensionMismatch(f"cells {tuple(x.shape)} / metadata {tuple(m.shape)} vs model d={self.d}")

    # -- forward ------------------------------------------------------------

    def encode(self, b: GraphBatch, trace: ForwardTrace | None = None) -> torch.Tensor:
        """Root representations ``z`` (B, d) for a collated batch."""
        self._check_dims(b.x, b.m)
        if b.t.shape[-1] != self.d or (b.e.numel() and b.e.shape[-1] != self.d):
            raise DimensionMismatch("task/relation embeddings do not match model dimension")
        u = torch.zeros(b.num_nodes, self.d, dtype=b.x.dtype)
        t = b.t[b.example]
        uniform = self.cfg.attention == "mean"
        for layer in self.layers:
            if layer.self_attention:
                v, w = layer.attn(b.m, b.x, b.mask)
            else:
                v, w = layer.attn(u, t, b.m, b.x, b.mask, uniform=uniform)
            u = u + v
            h = self._message(layer, u, b)
            u = u + h
            if trace is not None:
                trace.v.append(v.detach().clone())
                trace.h.append(h.detach().clone())
                trace.u.append(u.detach().clone())
                trace.attention.append(w.detach().clone())
        return u[b.roots]

    def forward(self, b: GraphBatch) -> torch.Tensor:
        return self.encode(b)


def forward(model: RDBModel, eg: EnrichedSubgraph | GraphBatch, mode: str = "eval") -> tuple[torch.Tensor, ForwardTrace]:
    """Run the network on one enriched subgraph (or a batch) and keep a trace.

    Returns ``z`` with shape (d,) for a single subgraph, (B, d) for a batch.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    single = isinstance(eg, EnrichedSubgraph)
    if single and eg.dimension != model.d:
        raise DimensionMismatch(f"subgraph dimension {eg.dimension} != model d={model.d}")
    b = collate_enriched([eg]) if single else eg
    dtype = next(model.parameters()).dtype
    b = b.to(dtype)
    model.train(mode == "train")
    trace = ForwardTrace(mode=mode, version=model.param_version())
    with torch.set_grad_enabled(mode == "train"):
        z = model.encode(b, trace)
    trace.z = z
    return (z[0] if single else z), trace


def backward(model: RDBModel, trace: ForwardTrace, loss_grad) -> dict[str, torch.Tensor]:
    """Gradients of <z, loss_grad> w.r.t. every trainable parameter, by name.

    Frozen inputs (codec, provider embeddings) are not parameters of the
    model and so never appear here.
    """
    if trace.mode != "train" or trace.z is None or not trace.z.requires_grad:
        raise StaleTrace("trace was not produced by a train-mode forward pass")
    if trace.consumed:
        raise StaleTrace("trace has already been back-propagated")
    if trace.version != model.param_version():
        raise StaleTrace("model parameters changed since the forward pass")
    g = torch.as_tensor(loss_grad, dtype=trace.z.dtype)
    z = trace.z
    if g.shape != z.shape:
        g = g.reshape(z.shape)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(z, [p for _, p in named], grad_outputs=g, allow_unused=True)
    trace.consumed = True
    return {n: (torch.zeros_like(p) if gr is None else gr) for (n, p), gr in zip(named, grads)}


# ---------------------------------------------------------------------------
# decoders


def label_matrix(label_texts: list[str], provider: EmbeddingProvider) -> np.ndarray:
    if len(label_texts) < 2:
        raise ValueError("classification needs at least two labels")
    if len(set(label_texts)) != len(label_texts):
        raise DuplicateLabels(f"duplicate label texts in {label_texts}")
    return provider.embed_many(list(label_texts))


def decode_classification(z, label_texts: list[str], provider: EmbeddingProvider) -> np.ndarray:
    """Softmax over inner products of ``z`` with each label's text embedding."""
    labels = label_matrix(label_texts, provider)
    z = np.asarray(z.detach() if isinstance(z, torch.Tensor) else z, dtype=np.float64)
    logits = z @ labels.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def decode_regression(z, codec: FloatCodec, target_normalizer) -> tuple:
    """``DEC(z)`` in normalised units and mapped back through the target normaliser."""
    if target_normalizer is None:
        raise NotFitted("target normalizer is not fitted")
    if not codec.frozen:
        raise NotFitted("float codec must be pretrained and frozen")
    z = np.asarray(z.detach() if isinstance(z, torch.Tensor) else z, dtype=np.float32)
    normalized = codec.decode_np(z)
    denorm = target_normalizer.inverse_transform(normalized)
    if np.ndim(normalized) == 0:
        return float(normalized), float(denorm)
    return normalized, denorm


def predict(model: RDBModel, eg: EnrichedSubgraph, kind: str, provider=None, label_texts=None, codec=None, target_normalizer=None) -> Prediction:
    z, _ = forward(model, eg, mode="eval")
    zn = z.detach().double().numpy()
    if kind == "classification":
        return Prediction(kind, zn, class_probs=decode_classification(zn, label_texts, provider))
    norm, denorm = decode_regression(zn, codec, target_normalizer)
    return Prediction(kind, zn, reg_value_normalized=norm, reg_value_denormalized=denorm)


def attention_dump(trace: ForwardTrace, batch: GraphBatch | None = None) -> list[dict]:
    """Attention weights per layer and node as JSON-ready records.

    First-layer self-attention weights are averaged over query cells so every
    layer reports one weight per (head, cell).
    """
    out = []
    for l, w in enumerate(trace.attention):
        if w.dim() == 4:
            w = w.mean(dim=2)
        for i in range(w.shape[0]):
            rec = {"layer": l + 1, "node": i, "weights": w[i].double().numpy().round(6).tolist()}
            if batch is not None:
                rec["cells"] = int(batch.mask[i].sum())
            out.append(rec)
    return out


def model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
