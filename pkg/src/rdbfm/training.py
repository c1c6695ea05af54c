"""Training stages: completion pretraining, joint SFT, downstream fine-tuning.

All three stages share the same loop shape: sample temporal subgraphs for a
batch of target rows, collate them, take an AdamW step, and early-stop on a
validation signal measured once per epoch (or per evaluation round for
completion pretraining, which is step-budgeted).
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from scipy.stats import rankdata
from torch.nn import functional as F

from .batch import GraphBatch, collate
from .errors import EmptyCorpus, LeakageError, ParseError, ZeroVector
from .features import FeatureStore, FloatCodec, categorical_text, fit_numeric_normalizer
from .graph import HeteroGraph
from .ingest import TIME_NEG_INF, TIME_POS_INF, Kind
from .metrics import HIGHER_IS_BETTER, evaluate_metric
from .model import ModelConfig, RDBModel, label_matrix
from .sampler import Root, RootedSubgraph, SampleConfig, sample_subgraph

log = logging.getLogger(__name__)

STAGES = ("init", "completion", "sft", "finetuned")


def mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# configuration and task definitions


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 2e-4
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    eval_batch_size: int = 512
    hops: int = 2
    fanout: int = 20

    def __post_init__(self):
        for name in ("lr", "batch_size", "patience", "max_epochs", "eval_batch_size", "hops", "fanout"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def sample_config(self, seed: int) -> SampleConfig:
        return SampleConfig(self.hops, self.fanout, seed)


@dataclass
class Split:
    rows: np.ndarray
    cutoffs: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cutoffs = np.asarray(self.cutoffs, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx) -> "Split":
        return Split(self.rows[idx], self.cutoffs[idx])


@dataclass
class TaskSpec:
    name: str
    rdb: str
    table: str
    column: str
    kind: str  # "classification" | "regression"
    metric: str
    splits: dict[str, Split]
    label_values: list[str] = field(default_factory=list)

    @property
    def label_texts(self) -> list[str]:
        return [categorical_text(self.column, v) for v in self.label_values]

    def validate(self) -> "TaskSpec":
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"{self.name}: unknown task kind {self.kind!r}")
        if self.metric not in HIGHER_IS_BETTER:
            raise ValueError(f"{self.name}: unknown metric {self.metric!r}")
        if self.kind == "classification" and len(set(self.label_values)) < 2:
            raise ValueError(f"{self.name}: classification needs at least two labels")
        for s in ("train", "val", "test"):
            if s not in self.splits:
                raise ValueError(f"{self.name}: missing {s} split")
        seen: set[int] = set()
        for s, sp in self.splits.items():
            if len(sp.cutoffs) != len(sp.rows):
                raise ValueError(f"{self.name}: split {s} lacks a cutoff for every row")
            rows = set(sp.rows.tolist())
            if rows & seen:
                raise ValueError(f"{self.name}: split {s} overlaps another split")
            seen |= rows
        return self

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "splits"}
        d["splits"] = {s: {"rows": sp.rows.tolist(), "cutoffs": sp.cutoffs.tolist()} for s, sp in self.splits.items()}
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TaskSpec":
        try:
            splits = {s: Split(v["rows"], v["cutoffs"]) for s, v in doc["splits"].items()}
            return cls(doc["name"], doc["rdb"], doc["table"], doc["column"], doc["kind"], doc["metric"],
                       splits, list(doc.get("label_values", []))).validate()
        except KeyError as e:
            raise ParseError(f"task definition missing field {e}") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TaskSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


class TaskData:
    """A task bound to its graph and feature store, with targets resolved."""

    def __init__(self, spec: TaskSpec, graph: HeteroGraph, store: FeatureStore):
        self.spec = spec.validate()
        self.graph = graph
        self.store = store
        self.node_type = graph.type_id(spec.table)
        frame = graph.frame(self.node_type)
        col = frame.spec.column(spec.column)
        if col.kind.is_key:
            raise ValueError(f"{spec.name}: target {spec.table}.{spec.column} is a key column")
        values, null = frame.columns[spec.column], frame.null_mask[spec.column]
        self.splits: dict[str, Split] = {}
        self.targets: dict[str, np.ndarray] = {}
        self.normalizer = None
        if spec.kind == "classification":
            index = {v: i for i, v in enumerate(spec.label_values)}
            self.label_emb = torch.from_numpy(label_matrix(spec.label_texts, store.provider).astype(np.float32))
        else:
            if col.kind is not Kind.NUMERICAL:
                raise ValueError(f"{spec.name}: regression target must be numerical")
            tr = spec.splits["train"].rows
            tr = tr[~null[tr]]
            self.normalizer = fit_numeric_normalizer(values[tr].astype(np.float64), column=f"{spec.table}.{spec.column}")
            self.label_emb = None
        for s, sp in spec.splits.items():
            keep = ~null[sp.rows]
            if spec.kind == "classification":
                known = np.array([values[r] in index for r in sp.rows], dtype=bool)
                keep &= known
            dropped = int((~keep).sum())
            if dropped:
                log.warning("%s/%s: dropping %d rows with missing or unknown targets", spec.name, s, dropped)
            self.splits[s] = sp.subset(keep)
            rows = self.splits[s].rows
            if spec.kind == "classification":
                self.targets[s] = np.array([index[values[r]] for r in rows], dtype=np.int64)
            else:
                self.targets[s] = self.normalizer.transform(values[rows].astype(np.float64)).astype(np.float32)

    @property
    def name(self) -> str:
        return self.spec.name

    def roots(self, split: Split) -> list[Root]:
        return [Root(self.node_type, int(r), self.spec.column, int(c)) for r, c in zip(split.rows, split.cutoffs)]

    def sample(self, split: Split, seed: int, cfg: TrainConfig) -> list[RootedSubgraph]:
        sc = cfg.sample_config(seed)
        return [sample_subgraph(self.graph, root, None, sc) for root in self.roots(split)]


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_FORMAT = "rdbfm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict
    stage: str = "init"
    codec_fingerprint: str = ""
    provider: dict = field(default_factory=dict)
    datasets_seen: list[str] = field(default_factory=list)
    downstream_registry: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, model_cfg: ModelConfig, seed: int = 0, codec: FloatCodec | None = None, provider=None) -> "Checkpoint":
        torch.manual_seed(seed)
        model = RDBModel(model_cfg)
        return cls(
            model_cfg,
            copy.deepcopy(model.state_dict()),
            "init",
            codec.fingerprint() if codec is not None else "",
            provider.config() if provider is not None else {},
        )

    def build_model(self) -> RDBModel:
        model = RDBModel(self.model_config)
        model.load_state_dict(self.state)
        return model

    def advance(self, model: RDBModel, stage: str, datasets: Iterable[str], record: dict) -> "Checkpoint":
        """New checkpoint at ``stage``; the datasets-seen list only ever grows."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        seen = list(self.datasets_seen)
        for d in datasets:
            if d not in seen:
                seen.append(d)
        return replace(
            self,
            state=copy.deepcopy(model.state_dict()),
            stage=stage,
            datasets_seen=seen,
            history=self.history + [record | {"stage": stage}],
        )

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": asdict(self.model_config),
            "state": self.state,
            "stage": self.stage,
            "codec_fingerprint": self.codec_fingerprint,
            "provider": self.provider,
            "datasets_seen": self.datasets_seen,
            "downstream_registry": self.downstream_registry,
            "history": self.history,
        }
        tmp = Path(str(path) + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: not a version-{CHECKPOINT_VERSION} model checkpoint")
        return cls(
            ModelConfig(**payload["model_config"]),
            payload["state"],
            payload["stage"],
            payload["codec_fingerprint"],
            payload["provider"],
            list(payload["datasets_seen"]),
            list(payload["downstream_registry"]),
            list(payload["history"]),
        )


def audit_leakage(datasets: Iterable[str], downstream: Iterable[str]) -> None:
    overlap = sorted(set(datasets) & set(downstream))
    if overlap:
        raise LeakageError(f"datasets {overlap} are registered for downstream evaluation")


# ---------------------------------------------------------------------------
# losses and early stopping


def completion_loss(z_pred, cell_embedding) -> float:
    """Cosine distance ``1 - cos(z, target)``, in [0, 2]."""
    a = np.asarray(z_pred, dtype=np.float64)
    b = np.asarray(cell_embedding, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("completion loss is undefined for a zero vector")
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def _completion_loss_t(z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (1.0 - F.cosine_similarity(z, target, dim=-1, eps=1e-8)).mean()


def supervised_loss(model: RDBModel, task: TaskData, batch: GraphBatch, y: torch.Tensor, codec: FloatCodec) -> torch.Tensor:
    z = model(batch)
    if task.spec.kind == "classification":
        return F.cross_entropy(z @ task.label_emb.T, y)
    return F.mse_loss(codec.decode(z), y)


class EarlyStopping:
    """Patience-based stopping on a single scalar, keeping the best weights."""

    def __init__(self, patience: int, higher_is_better: bool):
        self.patience = patience
        self.sign = 1.0 if higher_is_better else -1.0
        self.best = -math.inf
        self.best_epoch = -1
        self.best_state = None
        self.epoch = -1

    def update(self, value: float, model: RDBModel) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        score = self.sign * value
        if score > self.best:
            self.best, self.best_epoch = score, self.epoch
            self.best_state = copy.deepcopy(model.state_dict())
        return self.epoch - self.best_epoch >= self.patience


class MeanRankStopping:
    """Multi-task early stopping on the mean (over tasks) rank of each epoch's validation metric.

    Only the states of the last ``patience + 1`` epochs and the current best
    are retained; if the best epoch shifts to an evicted one, the best
    retained epoch is used.
    """

    def __init__(self, patience: int, higher_is_better: list[bool]):
        self.patience = patience
        self.signs = np.array([1.0 if h else -1.0 for h in higher_is_better])
        self.history: list[np.ndarray] = []
        self.states: dict[int, dict] = {}
        self.best_epoch = -1

    def mean_ranks(self) -> np.ndarray:
        scores = np.stack(self.history) * self.signs  # (epochs, tasks), higher is better
        ranks = np.stack([rankdata(-scores[:, j]) for j in range(scores.shape[1])], axis=1)
        return ranks.mean(axis=1)

    def update(self, values: list[float], model: RDBModel) -> bool:
        self.history.append(np.asarray(values, dtype=np.float64))
        e = len(self.history) - 1
        self.states[e] = copy.deepcopy(model.state_dict())
        ranks = self.mean_ranks()
        order = np.argsort(ranks, kind="stable")
        self.best_epoch = int(next(i for i in order if i in self.states))
        for old in list(self.states):
            if old != self.best_epoch and old < e - self.patience:
                del self.states[old]
        return e - int(order[0]) >= self.patience

    @property
    def best_state(self):
        return self.states[self.best_epoch]


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict_split(model: RDBModel, task: TaskData, split: str, cfg: TrainConfig, codec: FloatCodec,
                  subs: list[RootedSubgraph] | None = None) -> np.ndarray:
    """Class probabilities (n, c) or normalised regression outputs (n,), in eval mode."""
    model.eval()
    sp = task.splits[split]
    if subs is None:
        subs = task.sample(sp, mix_seed(cfg.seed, 0xE7A1), cfg)
    out = []
    for i in range(0, len(subs), cfg.eval_batch_size):
        z = model(collate(subs[i : i + cfg.eval_batch_size], task.store))
        if task.spec.kind == "classification":
            out.append(torch.softmax(z @ task.label_emb.T, dim=-1).double().numpy())
        else:
            out.append(codec.decode(z).double().numpy())
    if not out:
        shape = (0, len(task.spec.label_values)) if task.spec.kind == "classification" else (0,)
        return np.zeros(shape)
    return np.concatenate(out)


def split_loss(pred: np.ndarray, task: TaskData, split: str) -> float:
    y = task.targets[split]
    if task.spec.kind == "classification":
        return float(-np.mean(np.log(np.clip(pred[np.arange(len(y)), y], 1e-15, 1.0))))
    return float(np.mean((pred - y) ** 2))


def metric_from_predictions(pred: np.ndarray, task: TaskData, split: str) -> float:
    return evaluate_metric(task.spec.metric, pred, task.targets[split])


class _EvalCache:
    """Fixed evaluation subgraphs per (task, split) so every epoch sees the same inputs."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self._subs: dict[tuple[int, str], list[RootedSubgraph]] = {}

    def get(self, task: TaskData, split: str) -> list[RootedSubgraph]:
        key = (id(task), split)
        if key not in self._subs:
            self._subs[key] = task.sample(task.splits[split], mix_seed(self.cfg.seed, 0xE7A1), self.cfg)
        return self._subs[key]


def _train_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _step(model, opt, loss: torch.Tensor) -> float:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


def _optimizer(model: RDBModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# completion pretraining


@dataclass
class CompletionSource:
    """One single-table dataset for masked-cell completion."""

    name: str
    graph: HeteroGraph
    store: FeatureStore
    train_rows: np.ndarray
    val_rows: np.ndarray
    node_type: int = 0


def completion_sources(name: str, graph: HeteroGraph, provider, codec: FloatCodec, val_fraction: float = 0.2,
                       seed: int = 0) -> list[CompletionSource]:
    """Split a database into independent single-table completion datasets (one node type, no relations)."""
    from .graph import build_graph
    from .ingest import RdbManifest

    out = []
    rng = np.random.default_rng(seed)
    for k, (tname, count) in enumerate(graph.node_types):
        frame = graph.frame(k)
        single = build_graph([frame], RdbManifest(name, (frame.spec,), ()))
        perm = rng.permutation(count)
        n_val = max(1, int(round(count * val_fraction))) if count > 1 else 0
        store = FeatureStore(single, provider, codec)
        out.append(CompletionSource(f"{name}/{tname}", single, store, np.sort(perm[n_val:]), np.sort(perm[:n_val])))
    return out


def choose_masked_columns(store: FeatureStore, node_type: int, rows, rng: np.random.Generator) -> list[str | None]:
    """One uniformly chosen non-null encodable column per row; None when the row has no other cell to condition on."""
    valid = store.valid[node_type][np.asarray(rows, dtype=np.int64)]
    names = store.columns[node_type]
    out: list[str | None] = []
    for v in valid:
        cand = np.flatnonzero(v)
        out.append(names[int(rng.choice(cand))] if len(cand) >= 2 else None)
    return out


def _completion_batch(src: CompletionSource, rows, rng, seed: int, cfg: TrainConfig):
    cols = choose_masked_columns(src.store, src.node_type, rows, rng)
    times = src.graph.node_times[src.node_type]
    sc = cfg.sample_config(seed)
    subs, targets = [], []
    skipped = 0
    for r, c in zip(rows, cols):
        if c is None:
            skipped += 1
            continue
        t = int(times[r])
        cutoff = t if t not in (TIME_NEG_INF, TIME_POS_INF) else TIME_POS_INF
        subs.append(sample_subgraph(src.graph, Root(src.node_type, int(r), c, cutoff), None, sc))
        targets.append(src.store.target_encoding(src.node_type, int(r), c))
    if not subs:
        return None, None, skipped
    return collate(subs, src.store), torch.from_numpy(np.stack(targets)), skipped


def _completion_eval(model, batches) -> float:
    model.eval()
    tot, n = 0.0, 0
    with torch.no_grad():
        for b, tgt in batches:
            tot += float(_completion_loss_t(model(b), tgt)) * len(tgt)
            n += len(tgt)
    return tot / max(n, 1)


def pretrain_completion(checkpoint: Checkpoint, corpus: list[CompletionSource], cfg: TrainConfig,
                        max_steps: int = 2000, eval_every: int = 100) -> Checkpoint:
    """Masked-cell completion: predict the encoder embedding of one hidden cell per row."""
    corpus = [s for s in corpus if len(s.train_rows)]
    if not corpus:
        raise EmptyCorpus("completion corpus has no training rows")
    audit_leakage([s.name.split("/")[0] for s in corpus], checkpoint.downstream_registry)
    torch.manual_seed(cfg.seed)
    model = checkpoint.build_model()
    opt = _optimizer(model, cfg)
    rng = np.random.default_rng(mix_seed(cfg.seed, 0xC0))

    val_rng = np.random.default_rng(mix_seed(cfg.seed, 0xC1))
    val_batches = []
    skipped = 0
    for s in corpus:
        for i in range(0, len(s.val_rows), cfg.eval_batch_size):
            b, tgt, sk = _completion_batch(s, s.val_rows[i : i + cfg.eval_batch_size], val_rng, mix_seed(cfg.seed, 0xC2), cfg)
            skipped += sk
            if b is not None:
                val_batches.append((b, tgt))
    curve = [(0, _completion_eval(model, val_batches))]
    log.info("completion step 0 val loss %.4f", curve[0][1])
    stopper = EarlyStopping(cfg.patience, higher_is_better=False)
    stopper.update(curve[0][1], model)

    step = 0
    while step < max_steps:
        src = corpus[step % len(corpus)]
        rows = rng.choice(src.train_rows, size=min(cfg.batch_size, len(src.train_rows)), replace=False)
        b, tgt, sk = _completion_batch(src, rows, rng, mix_seed(cfg.seed, step), cfg)
        skipped += sk
        step += 1
        if b is None:
            continue
        model.train()
        _step(model, opt, _completion_loss_t(model(b), tgt))
        if step % eval_every == 0 or step == max_steps:
            val = _completion_eval(model, val_batches)
            curve.append((step, val))
            log.info("completion step %d val loss %.4f", step, val)
            if stopper.update(val, model):
                break
    if skipped:
        log.warning("completion pretraining skipped %d rows without maskable context", skipped)
    model.load_state_dict(stopper.best_state)
    record = {"corpus": [s.name for s in corpus], "curve": curve, "skipped_rows": skipped, "steps": step}
    return checkpoint.advance(model, "completion", [s.name.split("/")[0] for s in corpus], record)


# ---------------------------------------------------------------------------
# joint supervised fine-tuning


def sft(checkpoint: Checkpoint, tasks: list[TaskData], cfg: TrainConfig, codec: FloatCodec,
        downstream: Iterable[str] = ()) -> Checkpoint:
    """Round-robin multi-task fine-tuning with mean-rank early stopping."""
    registry = sorted(set(checkpoint.downstream_registry) | set(downstream))
    audit_leakage([t.spec.rdb for t in tasks], registry)
    audit_leakage(checkpoint.datasets_seen, registry)
    if not tasks:
        return checkpoint
    torch.manual_seed(cfg.seed)
    model = checkpoint.build_model()
    opt = _optimizer(model, cfg)
    evals = _EvalCache(cfg)
    rng = np.random.default_rng(mix_seed(cfg.seed, 0x5F7))
    stopper = MeanRankStopping(cfg.patience, [HIGHER_IS_BETTER[t.spec.metric] for t in tasks])

    def validate():
        metrics, losses = [], []
        for t in tasks:
            pred = predict_split(model, t, "val", cfg, codec, evals.get(t, "val"))
            metrics.append(metric_from_predictions(pred, t, "val"))
            losses.append(split_loss(pred, t, "val"))
        return metrics, losses

    m0, l0 = validate()
    curve = [{"epoch": 0, "val_metric": m0, "val_loss": l0}]
    stopper.update(m0, model)
    for epoch in range(1, cfg.max_epochs + 1):
        queues = [_train_batches(len(t.splits["train"]), cfg.batch_size, rng) for t in tasks]
        model.train()
        for rnd in range(max(len(q) for q in queues)):
            for ti, t in enumerate(tasks):
                q = queues[ti]
                if rnd >= len(q):
                    # shorter tasks cycle so every round visits every task
                    q.extend(_train_batches(len(t.splits["train"]), cfg.batch_size, rng))
                idx = q[rnd]
                sp = t.splits["train"].subset(idx)
                b = collate(t.sample(sp, mix_seed(cfg.seed, epoch, ti), cfg), t.store)
                y = torch.from_numpy(t.targets["train"][idx])
                model.train()
                _step(model, opt, supervised_loss(model, t, b, y, codec))
        m, l = validate()
        curve.append({"epoch": epoch, "val_metric": m, "val_loss": l})
        log.info("sft epoch %d val %s", epoch, m)
        if stopper.update(m, model):
            break
    model.load_state_dict(stopper.best_state)
    out = checkpoint.advance(model, "sft", [t.spec.rdb for t in tasks],
                             {"tasks": [t.name for t in tasks], "curve": curve, "best_epoch": stopper.best_epoch})
    out.downstream_registry = registry
    audit_leakage(out.datasets_seen, out.downstream_registry)
    return out


# ---------------------------------------------------------------------------
# downstream fine-tuning


@dataclass
class SeedResult:
    seed: int
    test: float
    val: float
    epochs: int
    train_size: int


@dataclass
class MetricReport:
    task: str
    metric: str
    variant: str
    results: list[SeedResult]

    @property
    def values(self) -> np.ndarray:
        return np.array([r.test for r in self.results])

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std(ddof=1)) if len(self.results) > 1 else 0.0

    def to_json(self) -> dict:
        return {"task": self.task, "metric": self.metric, "variant": self.variant,
                "per_seed": [asdict(r) for r in self.results], "mean": self.mean, "std": self.std}

    def csv_rows(self) -> list[dict]:
        rows = [{"task": self.task, "variant": self.variant, "metric": self.metric, "seed": r.seed,
                 "value": f"{r.test:.6f}", "train_size": r.train_size} for r in self.results]
        rows.append({"task": self.task, "variant": self.variant, "metric": self.metric, "seed": "mean",
                     "value": f"{self.mean:.6f}", "train_size": ""})
        rows.append({"task": self.task, "variant": self.variant, "metric": self.metric, "seed": "std",
                     "value": f"{self.std:.6f}", "train_size": ""})
        return rows


def subsample(split: Split, limit: int | None, seed: int) -> Split:
    """Seeded subset of ``limit`` rows; the whole split, unchanged, when limit covers it."""
    if limit is None or limit >= len(split):
        return split
    if limit <= 0:
        raise ValueError("limit must be positive")
    idx = np.sort(np.random.default_rng(mix_seed(seed, 0x11)).choice(len(split), limit, replace=False))
    return split.subset(idx)


def finetune(checkpoint: Checkpoint, task: TaskData, cfg: TrainConfig, codec: FloatCodec,
             limit: int | None = None, seed: int | None = None,
             on_epoch: Callable[[int, float, float], None] | None = None) -> tuple[RDBModel, SeedResult]:
    """Fine-tune one copy of the checkpoint on ``task`` for one seed."""
    seed = cfg.seed if seed is None else seed
    audit_leakage([task.spec.rdb], checkpoint.datasets_seen)
    run_cfg = replace(cfg, seed=seed)
    if checkpoint.stage == "init":
        torch.manual_seed(seed)
        model = RDBModel(checkpoint.model_config)
    else:
        model = checkpoint.build_model()
    torch.manual_seed(mix_seed(seed, 0xF7))
    opt = _optimizer(model, run_cfg)
    rng = np.random.default_rng(mix_seed(seed, 0xF8))
    full = task.splits["train"]
    train = subsample(full, limit, seed)
    if train is full:
        y_all = task.targets["train"]
    else:
        pos = {r: i for i, r in enumerate(full.rows.tolist())}
        y_all = task.targets["train"][[pos[r] for r in train.rows.tolist()]]
    evals = _EvalCache(run_cfg)
    stopper = EarlyStopping(cfg.patience, HIGHER_IS_BETTER[task.spec.metric])
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        for idx in _train_batches(len(train), cfg.batch_size, rng):
            b = collate(task.sample(train.subset(idx), mix_seed(seed, epoch), run_cfg), task.store)
            model.train()
            _step(model, opt, supervised_loss(model, task, b, torch.from_numpy(y_all[idx]), codec))
        pred = predict_split(model, task, "val", run_cfg, codec, evals.get(task, "val"))
        val = metric_from_predictions(pred, task, "val")
        if on_epoch is not None:
            on_epoch(epoch, val, split_loss(pred, task, "val"))
        if stopper.update(val, model):
            break
    model.load_state_dict(stopper.best_state)
    pred = predict_split(model, task, "test", run_cfg, codec, evals.get(task, "test"))
    test = metric_from_predictions(pred, task, "test")
    sign = 1.0 if HIGHER_IS_BETTER[task.spec.metric] else -1.0
    return model, SeedResult(seed, test, sign * stopper.best, epoch, len(train))


def finetune_and_eval(checkpoint: Checkpoint, task: TaskData, cfg: TrainConfig, codec: FloatCodec,
                      limit: int | None = None, seeds: Iterable[int] = (0,), variant: str | None = None) -> MetricReport:
    """Fine-tune per seed and report the test metric per seed plus mean and std."""
    results = []
    for s in seeds:
        t0 = time.time()
        _, res = finetune(checkpoint, task, cfg, codec, limit=limit, seed=s)
        log.info("%s seed %d: test %s=%.4f (%d epochs, %.1fs)", task.name, s, task.spec.metric, res.test,
                 res.epochs, time.time() - t0)
        results.append(res)
    return MetricReport(task.name, task.spec.metric, variant or checkpoint.stage, results)


def open_rdb(manifest_path: str | Path, provider, codec: FloatCodec, data_dir: str | Path | None = None,
             workers: int = 1):
    """Load, validate and encode one database: returns (graph, feature store, load report)."""
    from .graph import build_graph
    from .ingest import load_manifest, load_tables

    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    frames, report = load_tables(manifest, data_dir or manifest_path.parent, workers=workers)
    graph = build_graph(frames, manifest, workers=workers)
    return graph, FeatureStore(graph, provider, codec), report
