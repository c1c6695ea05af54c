"""Command-line entry point: ``rdbfm <command> [options]``.

Configuration precedence is flags > ``--config`` TOML file > built-in
defaults. The fully resolved configuration is written to every run
directory as ``config.toml`` together with a ``run.json`` manifest, a
line-delimited ``log.jsonl`` and the stage's metric CSVs.

Exit codes: 0 success, 1 unexpected error, 2 manifest/schema/parse error,
3 ingestion I/O or cell type error, 4 referential inconsistency, 5 bad root,
6 encoder input error, 7 embedding service failure, 8 codec did not
converge, 9 shape/label/trace error, 10 degenerate data, 11 data leakage,
12 missing checkpoint, 13 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomlkit

from .errors import ConfigError, MissingCheckpoint, RdbError
from .features import FloatCodec, make_provider, pretrain_float_codec
from .graph import build_graph, load_graph, save_graph
from .ingest import load_manifest, load_tables, parse_timestamp
from .model import ModelConfig
from .sampler import SampleConfig, format_tree, resolve_root, sample_subgraph
from .synth import SynthSpec, generate
from .training import (
    Checkpoint,
    TaskData,
    TaskSpec,
    TrainConfig,
    completion_sources,
    finetune,
    open_rdb,
    predict_split,
    metric_from_predictions,
    pretrain_completion,
    sft,
    MetricReport,
)

log = logging.getLogger("rdbfm")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ProviderConfig:
    mode: str = "stub"
    endpoint: str | None = None
    batch_size: int = 64
    retries: int = 3


@dataclass
class CodecConfig:
    steps: int = 3000
    hidden: int = 64


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def to_toml(self) -> str:
        doc = tomlkit.document()
        for section in ("model", "train", "provider", "codec"):
            tbl = tomlkit.table()
            for k, v in asdict(getattr(self, section)).items():
                if v is not None:
                    tbl.add(k, v)
            doc.add(section, tbl)
        return tomlkit.dumps(doc)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "provider": ProviderConfig, "codec": CodecConfig}

# flag name -> (section, field)
_FLAG_MAP = {
    "d": ("model", "d"), "layers": ("model", "layers"), "heads": ("model", "heads"),
    "dropout": ("model", "dropout"), "first_layer": ("model", "first_layer"),
    "attention": ("model", "attention"), "aggregation": ("model", "aggregation"),
    "lr": ("train", "lr"), "weight_decay": ("train", "weight_decay"), "batch_size": ("train", "batch_size"),
    "patience": ("train", "patience"), "max_epochs": ("train", "max_epochs"), "seed": ("train", "seed"),
    "hops": ("train", "hops"), "fanout": ("train", "fanout"),
    "provider": ("provider", "mode"), "codec_steps": ("codec", "steps"),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional TOML file and explicit flags; validate everything up front."""
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = tomlkit.parse(path.read_text(encoding="utf-8")).unwrap()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomlkit.exceptions.ParseError as e:
            raise ConfigError(f"{path}: {e}") from None
        for section, body in doc.items():
            if section not in _SECTIONS or not isinstance(body, dict):
                raise ConfigError(f"{path}: unknown section [{section}]")
            known = {f.name for f in fields(_SECTIONS[section])}
            for k, v in body.items():
                if k not in known:
                    raise ConfigError(f"{path}: unknown key {section}.{k}")
                values[section][k] = tuple(v) if isinstance(v, list) else v
    for flag, (section, key) in _FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[section][key] = v
    try:
        cfg = RunConfig(**{s: cls(**values[s]) for s, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg.provider.mode not in ("stub", "external"):
        raise ConfigError(f"unknown provider mode {cfg.provider.mode!r}")
    return cfg


def _provider(cfg: RunConfig):
    kw = {}
    if cfg.provider.mode == "external":
        kw = {"endpoint": cfg.provider.endpoint, "batch_size": cfg.provider.batch_size, "retries": cfg.provider.retries}
    return make_provider(cfg.provider.mode, cfg.model.d, **kw)


# ---------------------------------------------------------------------------
# run directory plumbing


class _JsonLines(logging.Handler):
    def __init__(self, path: Path):
        super().__init__()
        self.fh = open(path, "a", encoding="utf-8")

    def emit(self, record: logging.LogRecord) -> None:
        rec = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        self.fh.write(json.dumps(rec) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()
        super().close()


class RunDir:
    def __init__(self, path: str | Path, command: str, cfg: RunConfig, argv: list[str]):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
        self.manifest = {"command": command, "argv": argv, "stages": [], "datasets": {}, "seeds": []}
        self.handler = _JsonLines(self.path / "log.jsonl")
        logging.getLogger("rdbfm").addHandler(self.handler)

    def record(self, event: str, **kv) -> None:
        log.info(event, extra={"fields": {"event": event} | kv})

    def write_csv(self, name: str, rows: list[dict]) -> Path:
        path = self.path / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if rows:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        return path

    def close(self) -> None:
        (self.path / "run.json").write_text(json.dumps(self.manifest, indent=2) + "\n", encoding="utf-8")
        logging.getLogger("rdbfm").removeHandler(self.handler)
        self.handler.close()


def _load_checkpoint(path: str | None) -> Checkpoint:
    if path is None:
        raise MissingCheckpoint("this stage needs --checkpoint")
    if not Path(path).is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _load_codec(path: str | None, cfg: RunConfig) -> FloatCodec:
    if path is None:
        raise MissingCheckpoint("this stage needs --codec (run pretrain-codec first)")
    if not Path(path).is_file():
        raise MissingCheckpoint(f"codec checkpoint not found: {path}")
    codec, _ = FloatCodec.load(path)
    if codec.d != cfg.model.d:
        raise ConfigError(f"codec dimension {codec.d} != model dimension {cfg.model.d}")
    return codec


def _check_codec(ck: Checkpoint, codec: FloatCodec) -> None:
    if ck.codec_fingerprint and ck.codec_fingerprint != codec.fingerprint():
        raise ConfigError("checkpoint was trained with a different float codec")


def _task_manifest(task_path: Path) -> Path:
    path = task_path.parent.parent / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"cannot locate manifest.json for task {task_path} (expected {path})")
    return path


class _Loader:
    """Caches one (graph, store) per database so several tasks on one database share it."""

    def __init__(self, provider, codec, workers: int):
        self.provider, self.codec, self.workers = provider, codec, workers
        self._rdb: dict[Path, tuple] = {}

    def rdb(self, manifest: Path):
        manifest = manifest.resolve()
        if manifest not in self._rdb:
            self._rdb[manifest] = open_rdb(manifest, self.provider, self.codec, workers=self.workers)[:2]
        return self._rdb[manifest]

    def task(self, path: str) -> TaskData:
        p = Path(path)
        graph, store = self.rdb(_task_manifest(p))
        return TaskData(TaskSpec.load(p), graph, store)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg) -> int:
    manifest = load_manifest(args.manifest)
    frames, report = load_tables(manifest, args.data_dir or Path(args.manifest).parent, workers=args.workers)
    graph = build_graph(frames, manifest, workers=args.workers)
    out = report.to_json() | {
        "rdb": manifest.name,
        "nodes": {n: c for n, c in graph.node_types},
        "edges": {r.name: r.num_edges for r in graph.relations},
    }
    if args.graph_out:
        save_graph(graph, args.graph_out)
        out["graph_snapshot"] = str(args.graph_out)
    print(json.dumps(out, indent=2, ensure_ascii=False))
    return 0


def cmd_generate_synth(args, cfg) -> int:
    kw = {k: getattr(args, k) for k in ("name", "domain", "rule", "n_roots", "label_noise") if getattr(args, k) is not None}
    kw["seed"] = args.seed if args.seed is not None else 0
    if args.events is not None:
        kw["events_per_root"] = tuple(args.events)
    try:
        spec = SynthSpec(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    g = generate(spec, args.out)
    print(json.dumps({"manifest": str(g.manifest_path), "tasks": [str(t) for t in g.tasks]}, indent=2))
    return 0


def cmd_pretrain_codec(args, cfg) -> int:
    run = RunDir(args.run_dir, "pretrain-codec", cfg, sys.argv[1:])
    try:
        t0 = time.time()
        codec = pretrain_float_codec(cfg.model.d, steps=cfg.codec.steps, seed=cfg.train.seed, hidden=cfg.codec.hidden)
        err = codec.roundtrip_error(np.random.default_rng(cfg.train.seed + 1).uniform(-3, 3, 10_000))
        out = Path(args.out or run.path / "codec.pt")
        codec.save(out)
        run.record("codec", roundtrip_error=err, wall=round(time.time() - t0, 2), path=str(out))
        run.manifest["stages"].append("codec")
        run.write_csv("metrics.csv", [{"stage": "codec", "metric": "roundtrip_mae", "value": f"{err:.6f}"}])
        print(json.dumps({"codec": str(out), "roundtrip_mae": err}))
    finally:
        run.close()
    return 0


def _write_checkpoint(run: RunDir, ck: Checkpoint, out: str | None) -> Path:
    path = Path(out or run.path / f"{ck.stage}.ckpt")
    ck.save(path)
    run.manifest["stages"] = [h["stage"] for h in ck.history]
    run.manifest["datasets"] = {"seen": ck.datasets_seen, "downstream": ck.downstream_registry}
    run.manifest["checkpoint"] = str(path)
    return path


def _initial_or_loaded(args, cfg, codec, provider) -> Checkpoint:
    if args.checkpoint:
        ck = _load_checkpoint(args.checkpoint)
        _check_codec(ck, codec)
        return ck
    return Checkpoint.initial(cfg.model, cfg.train.seed, codec, provider)


def cmd_pretrain_completion(args, cfg) -> int:
    codec = _load_codec(args.codec, cfg)
    provider = _provider(cfg)
    run = RunDir(args.run_dir, "pretrain-completion", cfg, sys.argv[1:])
    try:
        ck = _initial_or_loaded(args, cfg, codec, provider)
        ck.downstream_registry = sorted(set(ck.downstream_registry) | set(args.downstream or []))
        corpus = []
        for m in args.rdb:
            graph, _, _ = open_rdb(m, provider, codec, workers=args.workers)
            corpus += completion_sources(graph.manifest.name, graph, provider, codec, seed=cfg.train.seed)
        ck = pretrain_completion(ck, corpus, cfg.train, max_steps=args.steps, eval_every=args.eval_every)
        curve = ck.history[-1]["curve"]
        for step, loss in curve:
            run.record("completion", step=step, val_loss=loss)
        run.write_csv("curve.csv", [{"step": s, "val_loss": f"{v:.6f}"} for s, v in curve])
        print(json.dumps({"checkpoint": str(_write_checkpoint(run, ck, args.out)), "val_loss": curve[-1][1]}))
    finally:
        run.close()
    return 0


def cmd_sft(args, cfg) -> int:
    codec = _load_codec(args.codec, cfg)
    provider = _provider(cfg)
    run = RunDir(args.run_dir, "sft", cfg, sys.argv[1:])
    try:
        ck = _initial_or_loaded(args, cfg, codec, provider)
        loader = _Loader(provider, codec, args.workers)
        tasks = [loader.task(p) for p in args.task]
        ck = sft(ck, tasks, cfg.train, codec, downstream=args.downstream or [])
        rows = []
        if ck.history and ck.history[-1]["stage"] == "sft":
            for rec in ck.history[-1]["curve"]:
                for t, m, l in zip(tasks, rec["val_metric"], rec["val_loss"]):
                    run.record("sft", epoch=rec["epoch"], task=t.name, val_metric=m, val_loss=l)
                    rows.append({"epoch": rec["epoch"], "task": t.name, "val_metric": f"{m:.6f}", "val_loss": f"{l:.6f}"})
        run.write_csv("curve.csv", rows)
        print(json.dumps({"checkpoint": str(_write_checkpoint(run, ck, args.out))}))
    finally:
        run.close()
    return 0


def cmd_finetune(args, cfg) -> int:
    ck = None if args.unpretrained else _load_checkpoint(args.checkpoint)
    codec = _load_codec(args.codec, cfg)
    provider = _provider(cfg)
    if ck is None:
        ck = Checkpoint.initial(cfg.model, cfg.train.seed, codec, provider)
    _check_codec(ck, codec)
    run = RunDir(args.run_dir, "finetune", cfg, sys.argv[1:])
    try:
        loader = _Loader(provider, codec, args.workers)
        seeds = list(range(cfg.train.seed, cfg.train.seed + args.seeds))
        run.manifest["seeds"] = seeds
        rows = []
        for path in args.task:
            task = loader.task(path)
            results = []
            for s in seeds:
                def on_epoch(e, v, l, s=s):
                    run.record("epoch", task=task.name, seed=s, epoch=e, val_metric=v, val_loss=l)

                model, res = finetune(ck, task, cfg.train, codec, limit=args.limit, seed=s, on_epoch=on_epoch)
                results.append(res)
                out = ck.advance(model, "finetuned", [task.spec.rdb], {"task": task.name, "seed": s, "test": res.test})
                out.save(run.path / f"{task.name}.seed{s}.ckpt")
            report = MetricReport(task.name, task.spec.metric, args.variant or ck.stage, results)
            run.record("report", **report.to_json())
            rows += report.csv_rows()
            print(f"{task.name}: {task.spec.metric} = {report.mean:.4f} ± {report.std:.4f} over {len(seeds)} seeds")
        run.write_csv("metrics.csv", rows)
        run.manifest["stages"] = [h["stage"] for h in ck.history] + ["finetuned"]
        run.manifest["datasets"] = {"seen": ck.datasets_seen, "downstream": ck.downstream_registry}
    finally:
        run.close()
    return 0


def cmd_eval(args, cfg) -> int:
    ck = _load_checkpoint(args.checkpoint)
    codec = _load_codec(args.codec, cfg)
    provider = _provider(cfg)
    _check_codec(ck, codec)
    model = ck.build_model()
    run = RunDir(args.run_dir, "eval", cfg, sys.argv[1:])
    try:
        loader = _Loader(provider, codec, args.workers)
        rows = []
        for path in args.task:
            task = loader.task(path)
            pred = predict_split(model, task, args.split, cfg.train, codec)
            value = metric_from_predictions(pred, task, args.split)
            rows.append({"task": task.name, "variant": args.variant or ck.stage, "split": args.split,
                         "metric": task.spec.metric, "value": f"{value:.6f}"})
            per = []
            for r, y, p in zip(task.splits[args.split].rows, task.targets[args.split], pred):
                if task.spec.kind == "classification":
                    per.append({"row": int(r), "target": task.spec.label_values[int(y)],
                                "prediction": task.spec.label_values[int(np.argmax(p))],
                                **{f"p_{v}": f"{q:.6f}" for v, q in zip(task.spec.label_values, p)}})
                else:
                    per.append({"row": int(r), "target": f"{float(y):.6f}", "prediction": f"{float(p):.6f}",
                                "prediction_raw": f"{float(task.normalizer.inverse_transform(np.array([p]))[0]):.6f}"})
            run.write_csv(f"predictions_{task.name}.csv", per)
            run.record("eval", task=task.name, split=args.split, metric=task.spec.metric, value=value)
            print(f"{task.name}: {task.spec.metric} = {value:.4f}")
        run.write_csv("metrics.csv", rows)
        run.manifest["stages"] = [h["stage"] for h in ck.history]
    finally:
        run.close()
    return 0


def cmd_sample_debug(args, cfg) -> int:
    graph = load_graph(args.graph)
    cutoff = parse_timestamp(args.cutoff) if args.cutoff else None
    root = resolve_root(graph, args.table, args.row, args.column, cutoff)
    sc = SampleConfig(cfg.train.hops, cfg.train.fanout, cfg.train.seed)
    text, violations = format_tree(sample_subgraph(graph, root, None, sc), graph)
    print(text)
    if violations:
        print(f"!! {violations} CAUSALITY VIOLATIONS", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--d", type=int, help="embedding dimension (default 512)")
    g.add_argument("--layers", type=int, help="message-passing layers (default 4)")
    g.add_argument("--heads", type=int, help="attention heads (default 8)")
    g.add_argument("--dropout", type=float, help="attention dropout (default 0.1)")
    g.add_argument("--first-layer", dest="first_layer", choices=["self", "cross"], help="first attention layer type")
    g.add_argument("--attention", choices=["cross", "mean"], help="'mean' is the average-attention ablation")
    g.add_argument("--aggregation", choices=["hier", "mean"], help="'mean' is the flat mean-GNN ablation")
    g.add_argument("--provider", choices=["stub", "external"],
                   help="text embedding provider; external reads RDBFM_EMBED_URL / RDBFM_EMBED_TOKEN")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, help="learning rate (default 3e-4)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, help="AdamW weight decay (default 2e-4)")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="batch size (default 256)")
    g.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 10)")
    g.add_argument("--max-epochs", dest="max_epochs", type=int, help="epoch budget (default 100)")
    g.add_argument("--hops", type=int, help="sampling depth (default 2)")
    g.add_argument("--fanout", type=int, help="neighbors per relation per node (default 20)")


def _common(p: argparse.ArgumentParser, run_dir: bool = True) -> None:
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--seed", type=int, help="base random seed (default 0)")
    p.add_argument("--workers", type=int, default=1, help="worker threads for ingestion")
    if run_dir:
        p.add_argument("--run-dir", required=True, help="output directory for artifacts, logs and metrics")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdbfm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a database and report node/edge counts")
    p.add_argument("--manifest", required=True, help="manifest JSON")
    p.add_argument("--data-dir", help="directory of <table>.csv files (default: manifest's directory)")
    p.add_argument("--graph-out", help="write a binary graph snapshot here")
    _common(p, run_dir=False)

    p = sub.add_parser("generate-synth", help="write a synthetic database and task")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", help="database name")
    p.add_argument("--domain", choices=["commerce-like", "other-like"])
    p.add_argument("--rule", choices=["share", "wide", "fanin", "completion"])
    p.add_argument("--n-roots", dest="n_roots", type=int, help="rows in the target table")
    p.add_argument("--label-noise", dest="label_noise", type=float, help="probability of flipping each label")
    p.add_argument("--events", type=int, nargs=2, metavar=("MIN", "MAX"), help="eligible events per root")
    _common(p, run_dir=False)

    p = sub.add_parser("pretrain-codec", help="fit and freeze the float encoder/decoder")
    p.add_argument("--out", help="codec path (default: <run-dir>/codec.pt)")
    p.add_argument("--codec-steps", dest="codec_steps", type=int, help="optimizer steps (default 3000)")
    _common(p)
    _add_model_flags(p)

    p = sub.add_parser("pretrain-completion", help="masked-cell completion pretraining on single tables")
    p.add_argument("--codec", help="frozen codec from pretrain-codec")
    p.add_argument("--rdb", action="append", required=True, help="manifest whose tables join the corpus (repeatable)")
    p.add_argument("--checkpoint", help="continue from this checkpoint instead of a fresh model")
    p.add_argument("--downstream", action="append", help="database name reserved for downstream evaluation")
    p.add_argument("--steps", type=int, default=2000, help="step budget (default 2000)")
    p.add_argument("--eval-every", dest="eval_every", type=int, default=100, help="validation interval in steps")
    p.add_argument("--out", help="checkpoint path (default: <run-dir>/completion.ckpt)")
    _common(p)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("sft", help="joint supervised fine-tuning over several tasks")
    p.add_argument("--codec", help="frozen codec from pretrain-codec")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--task", action="append", default=[], help="task JSON (inside <rdb>/tasks/); repeatable")
    p.add_argument("--downstream", action="append", help="database name reserved for downstream evaluation")
    p.add_argument("--out", help="checkpoint path (default: <run-dir>/sft.ckpt)")
    _common(p)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("finetune", help="fine-tune on downstream tasks and report test metrics per seed")
    p.add_argument("--codec", help="frozen codec from pretrain-codec")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint", help="pretrained checkpoint")
    src.add_argument("--unpretrained", action="store_true", help="start from a fresh model")
    p.add_argument("--task", action="append", required=True, help="task JSON; repeatable")
    p.add_argument("--limit", type=int, help="train on at most this many sampled rows (e.g. 512 or 4096)")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.add_argument("--variant", help="label for the metric report")
    _common(p)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write per-task CSVs")
    p.add_argument("--codec", help="frozen codec from pretrain-codec")
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--task", action="append", required=True, help="task JSON; repeatable")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--variant", help="label for the metric rows")
    _common(p)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("sample-debug", help="print the temporal subgraph sampled around one row")
    p.add_argument("--graph", required=True, help="graph snapshot from ingest --graph-out")
    p.add_argument("--table", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--column", required=True, help="target column of the root")
    p.add_argument("--cutoff", help="ISO-8601 or epoch-seconds cutoff (default: the row's timestamp)")
    _common(p, run_dir=False)
    _add_train_flags(p)
    return ap


COMMANDS = {
    "ingest": cmd_ingest,
    "generate-synth": cmd_generate_synth,
    "pretrain-codec": cmd_pretrain_codec,
    "pretrain-completion": cmd_pretrain_completion,
    "sft": cmd_sft,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sample-debug": cmd_sample_debug,
}


def _adopt_checkpoint_model(args, cfg: RunConfig) -> RunConfig:
    """Later stages take model dimensions from their checkpoint unless overridden."""
    path = getattr(args, "checkpoint", None)
    if path and Path(path).is_file() and not any(getattr(args, f, None) is not None for f in ("d", "layers", "heads")):
        return replace(cfg, model=Checkpoint.load(path).model_config)
    return cfg


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time, so repeated in-process calls stay valid."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _):
        pass


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    pkg_log = logging.getLogger("rdbfm")
    pkg_log.setLevel(logging.INFO)
    if not any(getattr(h, "_rdbfm_stderr", False) for h in pkg_log.handlers):
        h = _StderrHandler()
        h._rdbfm_stderr = True
        h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        pkg_log.addHandler(h)
    for h in pkg_log.handlers:
        if getattr(h, "_rdbfm_stderr", False):
            h.setLevel(logging.INFO if args.verbose else logging.WARNING)
    pkg_log.propagate = False
    try:
        cfg = resolve_config(args)
        cfg = _adopt_checkpoint_model(args, cfg)
        return COMMANDS[args.command](args, cfg)
    except RdbError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
