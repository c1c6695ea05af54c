"""Unified cell encoders and subgraph enrichment.

Text and categorical cells go through one sentence-embedding provider;
numbers are quantile-normalised and then mapped through a small frozen
encoder network (``FloatCodec``); timestamps combine a calendar description
with the normalised epoch value. Column names, relation descriptions and the
task column name are embedded with the same provider.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from scipy.special import ndtr, ndtri
from torch import nn
from torch.nn import functional as F

from .errors import EmptyText, InsufficientData, NonConvergence, NotFitted, ParseError, ServiceError
from .graph import HeteroGraph, relation_metadata_text
from .ingest import ColumnSpec, Kind, TableFrame
from .sampler import RootedSubgraph

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"[a-z0-9]+")


# ---------------------------------------------------------------------------
# text embedding providers


class EmbeddingProvider:
    """Maps text to a fixed-length vector, caching results.

    Subclasses implement ``_embed_batch``. The cache permits concurrent reads;
    inserts take a lock.
    """

    mode = "abstract"

    def __init__(self, dimension: int):
        self.dimension = int(dimension)
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError

    def embed_many(self, texts: list[str]) -> np.ndarray:
        keys = []
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise EmptyText(f"cannot embed empty text {t!r}")
            keys.append(t.strip())
        missing = list(dict.fromkeys(k for k in keys if k not in self._cache))
        if missing:
            vecs = self._embed_batch(missing)
            with self._lock:
                for k, v in zip(missing, vecs):
                    v = np.asarray(v, dtype=np.float64)
                    if v.shape != (self.dimension,) or not np.all(np.isfinite(v)):
                        raise ServiceError(f"provider returned a bad vector for {k!r}: shape {v.shape}")
                    v.setflags(write=False)
                    self._cache[k] = v
        if not keys:
            return np.zeros((0, self.dimension))
        return np.stack([self._cache[k] for k in keys])

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def config(self) -> dict:
        return {"mode": self.mode, "dimension": self.dimension}


class StubEmbedding(EmbeddingProvider):
    """Deterministic offline stand-in: a signed hashed bag of lower-cased tokens.

    Each alphanumeric token lands on four signed coordinates; the sum is
    L2-normalised. Texts that share tokens get positive cosine similarity.
    """

    mode = "deterministic_stub"

    def _token_vector(self, token: str, out: np.ndarray) -> None:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=32).digest()
        for j in range(4):
            chunk = int.from_bytes(digest[8 * j : 8 * j + 8], "little")
            out[chunk % self.dimension] += 1.0 if (chunk >> 63) & 1 else -1.0

    def _embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            v = np.zeros(self.dimension)
            tokens = _TOKEN.findall(text.lower()) or [text.strip().lower()]
            for tok in tokens:
                self._token_vector(tok, v)
            n = np.linalg.norm(v)
            if n == 0.0:
                # every token cancelled out; fall back to the whole string
                self._token_vector("\x00" + text, v)
                n = np.linalg.norm(v)
            out.append(v / n)
        return out


class ExternalEmbedding(EmbeddingProvider):
    """JSON-over-HTTP provider: POST {"texts": [...]} -> {"vectors": [[...], ...]}.

    Endpoint and bearer token come from ``RDBFM_EMBED_URL`` and
    ``RDBFM_EMBED_TOKEN`` unless passed explicitly. Vectors are used as
    returned (no renormalisation).
    """

    mode = "external_service"

    def __init__(
        self,
        dimension: int,
        endpoint: str | None = None,
        token: str | None = None,
        batch_size: int = 64,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
        transport=None,
    ):
        import httpx

        super().__init__(dimension)
        self.endpoint = endpoint or os.environ.get("RDBFM_EMBED_URL")
        if not self.endpoint:
            raise ServiceError("no embedding endpoint configured (set RDBFM_EMBED_URL)")
        token = token if token is not None else os.environ.get("RDBFM_EMBED_TOKEN")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.batch_size = batch_size
        self.retries = retries
        self.backoff = backoff
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def _post(self, texts: list[str]) -> list[list[float]]:
        import httpx

        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.endpoint, json={"texts": texts})
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = ServiceError(f"embedding service returned {resp.status_code}")
                elif resp.status_code != 200:
                    raise ServiceError(f"embedding service returned {resp.status_code}: {resp.text[:200]}")
                else:
                    vectors = resp.json()["vectors"]
                    if len(vectors) != len(texts):
                        raise ServiceError(f"asked for {len(texts)} vectors, got {len(vectors)}")
                    return vectors
            except (httpx.TransportError, ValueError, KeyError) as e:
                last = ServiceError(f"embedding request failed: {e}")
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise last

    def _embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for i in range(0, len(texts), self.batch_size):
            out.extend(np.asarray(v, dtype=np.float64) for v in self._post(texts[i : i + self.batch_size]))
        return out

    def config(self) -> dict:
        return super().config() | {"endpoint": self.endpoint}


def make_provider(mode: str, dimension: int, **kw) -> EmbeddingProvider:
    if mode in ("stub", "deterministic_stub"):
        return StubEmbedding(dimension)
    if mode in ("external", "external_service"):
        return ExternalEmbedding(dimension, **kw)
    raise ValueError(f"unknown embedding mode {mode!r}")


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return provider.embed(text)


def categorical_text(column: str, value: str) -> str:
    return f"{column} is {value}"


def encode_categorical(provider: EmbeddingProvider, column: ColumnSpec | str, value: str) -> np.ndarray:
    name = column.name if isinstance(column, ColumnSpec) else column
    if value is None or not str(value).strip():
        raise EmptyText(f"empty category for column {name}")
    return provider.embed(categorical_text(name, value))


# ---------------------------------------------------------------------------
# numeric normalisation

QUANTILE_EPS = 1e-6


@dataclass
class QuantileNormalizer:
    """Rank-based map of a numeric column onto the standard normal.

    ``references`` are evenly spaced order statistics of the fitted values;
    ``transform`` interpolates the empirical CDF between them, clips to
    [eps, 1 - eps] and applies the normal quantile function.
    """

    references: np.ndarray
    n_quantiles: int = 1000
    column: str | None = None

    @property
    def _probs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.references))

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        q, p = self.references, self._probs
        # average of forward and backward interpolation resolves tied references
        cdf = 0.5 * (np.interp(x, q, p) - np.interp(-x, -q[::-1], -p[::-1]))
        return ndtri(np.clip(cdf, QUANTILE_EPS, 1.0 - QUANTILE_EPS))

    def inverse_transform(self, y):
        y = np.asarray(y, dtype=np.float64)
        return np.interp(ndtr(y), self._probs, self.references)

    def to_json(self) -> dict:
        return {"type": "quantile", "column": self.column, "n_quantiles": self.n_quantiles,
                "references": self.references.tolist()}


@dataclass
class StandardNormalizer:
    """Fallback for columns with fewer than two finite values."""

    mean: float = 0.0
    std: float = 1.0
    column: str | None = None

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, y):
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    def to_json(self) -> dict:
        return {"type": "standard", "column": self.column, "mean": self.mean, "std": self.std}


def normalizer_from_json(doc: dict):
    if doc["type"] == "quantile":
        return QuantileNormalizer(np.asarray(doc["references"], dtype=np.float64), doc["n_quantiles"], doc.get("column"))
    if doc["type"] == "standard":
        return StandardNormalizer(doc["mean"], doc["std"], doc.get("column"))
    raise ParseError(f"unknown normalizer type {doc['type']!r}")


def fit_quantile(values, n_quantiles: int = 1000, column: str | None = None) -> QuantileNormalizer:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if len(v) < 2:
        raise InsufficientData(f"need at least 2 finite values, got {len(v)}")
    n = min(n_quantiles, len(v))
    refs = np.quantile(v, np.linspace(0.0, 1.0, n))
    return QuantileNormalizer(refs, n_quantiles, column)


def fit_numeric_normalizer(values, n_quantiles: int = 1000, column: str | None = None):
    try:
        return fit_quantile(values, n_quantiles, column)
    except InsufficientData:
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        log.info("column %s: %d finite values, falling back to standardisation", column, len(v))
        return StandardNormalizer(float(v[0]) if len(v) else 0.0, 1.0, column)


# ---------------------------------------------------------------------------
# float codec

CODEC_FORMAT = "rdbfm-float-codec"
CODEC_VERSION = 1


class FloatCodec(nn.Module):
    """Scalar <-> vector networks. The encoder ends in a LayerNorm without affine weights."""

    def __init__(self, d: int, hidden: int = 64):
        super().__init__()
        self.d = d
        self.hidden = hidden
        self.enc = nn.Sequential(nn.Linear(1, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, d))
        self.dec = nn.Sequential(nn.Linear(d, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, 1))
        self.frozen = False

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        w = self.enc(x.unsqueeze(-1))
        return F.layer_norm(w, (self.d,))

    def decode(self, w: torch.Tensor) -> torch.Tensor:
        return self.dec(w).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def freeze(self) -> "FloatCodec":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    @torch.no_grad()
    def encode_np(self, x) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
        return self.encode(x).double().numpy()

    @torch.no_grad()
    def decode_np(self, w) -> np.ndarray:
        w = torch.as_tensor(np.asarray(w, dtype=np.float32))
        return self.decode(w).double().numpy()

    @torch.no_grad()
    def roundtrip_error(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.mean(np.abs(self.decode_np(self.encode_np(x)) - x)))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, path: str | Path, normalizers: dict | None = None) -> None:
        payload = {
            "format": CODEC_FORMAT,
            "version": CODEC_VERSION,
            "d": self.d,
            "hidden": self.hidden,
            "state": self.state_dict(),
            "normalizers": {k: v.to_json() for k, v in (normalizers or {}).items()},
        }
        tmp = Path(str(path) + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> tuple["FloatCodec", dict]:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != CODEC_FORMAT or payload.get("version") != CODEC_VERSION:
            raise ParseError(f"{path}: not a version-{CODEC_VERSION} float codec checkpoint")
        codec = cls(payload["d"], payload["hidden"])
        codec.load_state_dict(payload["state"])
        norms = {k: normalizer_from_json(v) for k, v in payload["normalizers"].items()}
        return codec.freeze(), norms


def pretrain_float_codec(
    d: int,
    steps: int = 3000,
    seed: int = 0,
    batch_size: int = 1024,
    lr: float = 3e-3,
    hidden: int = 64,
    tolerance: float = 0.05,
    check: bool = True,
) -> FloatCodec:
    """Fit ENC/DEC on x ~ N(0, 1) under L1 round-trip loss, then freeze.

    Raises NonConvergence if the mean held-out error on U[-3, 3] exceeds
    ``tolerance``.
    """
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    codec = FloatCodec(d, hidden)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        x = torch.randn(batch_size, generator=gen)
        loss = (codec(x) - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    codec.freeze()
    if check:
        held_out = np.random.default_rng(seed + 1).uniform(-3, 3, 10_000)
        err = codec.roundtrip_error(held_out)
        log.info("float codec held-out round-trip error %.4f", err)
        if err > tolerance:
            raise NonConvergence(f"round-trip error {err:.4f} exceeds {tolerance}")
    return codec


def encode_numerical(codec: FloatCodec, normalizer, raw) -> np.ndarray:
    if normalizer is None:
        raise NotFitted("numeric column has no fitted normalizer")
    return codec.encode_np(normalizer.transform(raw))


def time_description(epoch_seconds: int) -> str:
    dt = datetime.fromtimestamp(int(epoch_seconds), tz=timezone.utc)
    return f"year {dt.year} month {dt.month:02d} weekday {dt.isoweekday()}"


def encode_timestamp(provider: EmbeddingProvider, codec: FloatCodec, column, epoch_seconds, reference_scale) -> np.ndarray:
    """Calendar-text embedding plus the encoded column-normalised epoch value."""
    text_part = provider.embed(time_description(epoch_seconds))
    num_part = encode_numerical(codec, reference_scale, float(epoch_seconds))
    return text_part + num_part


# ---------------------------------------------------------------------------
# per-graph feature store and enrichment


@dataclass
class EnrichedSubgraph:
    """A sampled subgraph with its cell, metadata, relation and task tensors.

    Cells are stored padded: ``x[i, :, :]`` holds all encodable columns of
    node i's table and ``mask[i]`` selects the real cells (non-null, and for
    the root row not the target column).
    """

    base: RootedSubgraph
    x: np.ndarray
    m: np.ndarray
    mask: np.ndarray
    relation_metadata: np.ndarray
    task_embedding: np.ndarray
    columns: list[list[str]] = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return self.x.shape[-1]

    @property
    def cell_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def cell_features(self, i: int) -> np.ndarray:
        return self.x[i][self.mask[i]]

    def cell_metadata(self, i: int) -> np.ndarray:
        return self.m[i][self.mask[i]]


class FeatureStore:
    """Precomputed cell encodings for every row of every table in a graph.

    Build once per (graph, provider, codec); sampling then only gathers rows.
    Numeric and timestamp normalisers are fitted per column on the rows
    selected by ``fit_rows`` (default: all non-null rows) unless supplied.
    """

    def __init__(
        self,
        graph: HeteroGraph,
        provider: EmbeddingProvider,
        codec: FloatCodec,
        normalizers: dict[str, object] | None = None,
        fit_rows: dict[str, np.ndarray] | None = None,
        n_quantiles: int = 1000,
    ):
        if provider.dimension != codec.d:
            raise ValueError(f"provider dimension {provider.dimension} != codec dimension {codec.d}")
        self.graph = graph
        self.provider = provider
        self.codec = codec
        self.d = codec.d
        self.normalizers = dict(normalizers or {})
        self.columns: list[list[str]] = []
        self.x: list[np.ndarray] = []
        self.valid: list[np.ndarray] = []
        self.m: list[np.ndarray] = []
        fit_rows = fit_rows or {}
        for k, (tname, count) in enumerate(graph.node_types):
            frame = graph.frame(k)
            cols = frame.spec.feature_columns
            self.columns.append([c.name for c in cols])
            X = np.zeros((count, len(cols), self.d), dtype=np.float32)
            V = np.zeros((count, len(cols)), dtype=bool)
            for j, col in enumerate(cols):
                key = f"{tname}.{col.name}"
                if col.kind in (Kind.NUMERICAL, Kind.TIMESTAMP) and key not in self.normalizers:
                    self.normalizers[key] = self._fit(frame, col, fit_rows.get(tname), n_quantiles)
                X[:, j], V[:, j] = self._encode_column(frame, col, self.normalizers.get(key))
            self.x.append(X)
            self.valid.append(V)
            meta = provider.embed_many([f"{tname}.{c.name}" for c in cols]) if cols else np.zeros((0, self.d))
            self.m.append(meta.astype(np.float32))
        self.max_cells = max([len(c) for c in self.columns] + [1])
        texts = [relation_metadata_text(r, graph.manifest) for r in graph.relations]
        self.relation_texts = texts
        self.relation_emb = (provider.embed_many(texts) if texts else np.zeros((0, self.d))).astype(np.float32)

    @staticmethod
    def _fit(frame: TableFrame, col: ColumnSpec, rows, n_quantiles):
        live = ~frame.null_mask[col.name]
        if rows is not None:
            sel = np.zeros(frame.row_count, dtype=bool)
            sel[rows] = True
            live &= sel
        vals = frame.columns[col.name][live].astype(np.float64)
        return fit_numeric_normalizer(vals, n_quantiles, f"{frame.name}.{col.name}")

    def _encode_column(self, frame: TableFrame, col: ColumnSpec, norm) -> tuple[np.ndarray, np.ndarray]:
        n = frame.row_count
        out = np.zeros((n, self.d), dtype=np.float32)
        valid = ~frame.null_mask[col.name].copy()
        rows = np.flatnonzero(valid)
        if len(rows) == 0:
            return out, valid
        vals = frame.columns[col.name][rows]
        if col.kind is Kind.NUMERICAL:
            out[rows] = encode_numerical(self.codec, norm, vals.astype(np.float64))
        elif col.kind is Kind.TIMESTAMP:
            num = encode_numerical(self.codec, norm, vals.astype(np.float64))
            uniq, inv = np.unique(vals, return_inverse=True)
            text = self.provider.embed_many([time_description(t) for t in uniq])[inv]
            out[rows] = text + num
        else:
            stripped = np.array([str(v).strip() for v in vals], dtype=object)
            keep = np.array([bool(s) for s in stripped], dtype=bool)
            valid[rows[~keep]] = False  # whitespace-only cells behave as nulls
            rows, stripped = rows[keep], stripped[keep]
            if len(rows):
                uniq, inv = np.unique(stripped.astype(str), return_inverse=True)
                if col.kind is Kind.CATEGORICAL:
                    texts = [categorical_text(col.name, u) for u in uniq]
                else:
                    texts = list(uniq)
                out[rows] = self.provider.embed_many(texts)[inv]
        return out, valid

    def column_index(self, node_type: int, column: str) -> int:
        return self.columns[node_type].index(column)

    def task_embedding(self, column: str) -> np.ndarray:
        return self.provider.embed(column).astype(np.float32)

    def target_encoding(self, node_type: int, row: int, column: str) -> np.ndarray:
        """The encoder embedding of one cell (completion target)."""
        j = self.column_index(node_type, column)
        if not self.valid[node_type][row, j]:
            raise ValueError(f"cell {self.graph.node_types[node_type][0]}#{row}.{column} is null")
        return self.x[node_type][row, j]

    def gather(self, node_type: np.ndarray, node_id: np.ndarray):
        """Padded (x, m, mask) for a flat list of nodes."""
        n = len(node_type)
        L = self.max_cells
        x = np.zeros((n, L, self.d), dtype=np.float32)
        m = np.zeros((n, L, self.d), dtype=np.float32)
        mask = np.zeros((n, L), dtype=bool)
        for k in np.unique(node_type):
            sel = np.flatnonzero(node_type == k)
            c = len(self.columns[k])
            if c == 0:
                continue
            rows = node_id[sel]
            x[sel, :c] = self.x[k][rows]
            m[sel, :c] = self.m[k][None]
            mask[sel, :c] = self.valid[k][rows]
        return x, m, mask

    def root_mask(self, sub: RootedSubgraph) -> np.ndarray:
        """Entries holding the root row, whose target cell must be hidden everywhere."""
        return (sub.node_type == sub.root.node_type) & (sub.node_id == sub.root.row)


def enrich(sub: RootedSubgraph, store: FeatureStore) -> EnrichedSubgraph:
    """Attach cell, metadata, relation and task tensors to a sampled subgraph."""
    x, m, mask = store.gather(sub.node_type, sub.node_id)
    r = sub.root
    if r.column in store.columns[r.node_type]:
        j = store.column_index(r.node_type, r.column)
        mask[store.root_mask(sub), j] = False
    return EnrichedSubgraph(
        base=sub,
        x=x,
        m=m,
        mask=mask,
        relation_metadata=store.relation_emb,
        task_embedding=store.task_embedding(r.column),
        columns=[store.columns[k] for k in sub.node_type],
    )
