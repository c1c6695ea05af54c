import copy
import logging
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import write_db
from rdbfm.errors import EmptyCorpus, LeakageError, ParseError, ZeroVector
from rdbfm.model import ModelConfig
from rdbfm.synth import SynthSpec, generate
from rdbfm.training import (
    Checkpoint,
    EarlyStopping,
    MeanRankStopping,
    MetricReport,
    SeedResult,
    Split,
    TaskData,
    TaskSpec,
    TrainConfig,
    _completion_batch,
    audit_leakage,
    choose_masked_columns,
    completion_loss,
    completion_sources,
    finetune,
    finetune_and_eval,
    mix_seed,
    open_rdb,
    pretrain_completion,
    sft,
    subsample,
)

MODEL = ModelConfig(d=16, layers=2, heads=4, dropout=0.0)
FAST = TrainConfig(lr=3e-3, batch_size=32, patience=3, max_epochs=4, fanout=5, eval_batch_size=256)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory, codec16, stub16):
    """Two small share-rule databases bound to their tasks."""
    out = {}
    for name, seed in (("tiny-a", 1), ("tiny-b", 2)):
        g = generate(SynthSpec(name=name, seed=seed, n_roots=120, n_hubs=20), tmp_path_factory.mktemp(name))
        graph, store, _ = open_rdb(g.manifest_path, stub16, codec16)
        out[name] = TaskData(g.task(), graph, store)
    return out


def _ck(codec16, stub16, **kw):
    ck = Checkpoint.initial(MODEL, seed=0, codec=codec16, provider=stub16)
    for k, v in kw.items():
        setattr(ck, k, v)
    return ck


# ---------------------------------------------------------------------------
# small pieces


def test_completion_loss_values():
    a = np.array([1.0, 0.0, 0.0])
    assert completion_loss(a, 3 * a) == pytest.approx(0.0)
    assert completion_loss(a, [0.0, 2.0, 0.0]) == pytest.approx(1.0)
    assert completion_loss(a, -a) == pytest.approx(2.0)
    with pytest.raises(ZeroVector):
        completion_loss(np.zeros(3), a)


def test_mix_seed_is_stable():
    assert mix_seed(1, 2) == mix_seed(1, 2)
    assert mix_seed(1, 2) != mix_seed(2, 1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1)
    assert FAST.sample_config(5).seed == 5


def test_early_stopping_by_hand():
    model = torch.nn.Linear(1, 1)
    es = EarlyStopping(patience=2, higher_is_better=True)
    stops = [es.update(v, model) for v in [0.5, 0.7, 0.9, 0.8, 0.85]]
    assert stops == [False, False, False, False, True]
    assert es.best_epoch == 2
    lo = EarlyStopping(patience=1, higher_is_better=False)
    assert [lo.update(v, model) for v in [3.0, 2.0, 2.5]] == [False, False, True]


def test_mean_rank_stopping_by_hand():
    model = torch.nn.Linear(1, 1)
    mr = MeanRankStopping(patience=2, higher_is_better=[True, False])
    # task 1 accuracy (higher better), task 2 mae (lower better)
    mr.update([0.5, 1.0], model)
    mr.update([0.7, 0.9], model)
    mr.update([0.9, 0.95], model)
    # ranks: t1 -> [3, 2, 1]; t2 -> [3, 1, 2]; means [3, 1.5, 1.5]; ties go to the earlier epoch
    assert mr.mean_ranks().tolist() == [3.0, 1.5, 1.5]
    assert mr.best_epoch == 1
    # epoch 3 is two epochs past the best with no improvement
    assert mr.update([0.6, 1.2], model)
    assert 1 in mr.states and 0 not in mr.states


def test_checkpoint_round_trip_and_history(tmp_path, codec16, stub16):
    ck = _ck(codec16, stub16)
    model = ck.build_model()
    a = ck.advance(model, "completion", ["db1", "db2"], {"steps": 3})
    b = a.advance(model, "sft", ["db2", "db3"], {"tasks": ["x"]})
    assert b.datasets_seen == ["db1", "db2", "db3"]
    assert [h["stage"] for h in b.history] == ["completion", "sft"]
    assert ck.history == [] and a.datasets_seen == ["db1", "db2"]
    b.save(tmp_path / "m.ckpt")
    c = Checkpoint.load(tmp_path / "m.ckpt")
    assert (c.stage, c.datasets_seen, c.history, c.model_config) == (b.stage, b.datasets_seen, b.history, b.model_config)
    assert c.codec_fingerprint == codec16.fingerprint() and c.provider["mode"] == "deterministic_stub"
    for k, v in b.state.items():
        assert torch.equal(c.state[k], v)
    torch.save({"format": "x"}, tmp_path / "bad.ckpt")
    with pytest.raises(ParseError):
        Checkpoint.load(tmp_path / "bad.ckpt")
    with pytest.raises(ValueError):
        ck.advance(model, "bogus", [], {})


def test_audit_leakage():
    audit_leakage(["a"], ["b"])
    with pytest.raises(LeakageError, match="'a'"):
        audit_leakage(["a", "c"], ["a", "b"])


def test_subsample():
    sp = Split(np.arange(100, 200), np.arange(100))
    assert subsample(sp, None, 0) is sp
    assert subsample(sp, 100, 0) is sp
    a, b = subsample(sp, 10, 3), subsample(sp, 10, 3)
    assert np.array_equal(a.rows, b.rows) and len(a) == 10
    assert (np.diff(a.rows) > 0).all() and np.array_equal(a.cutoffs, a.rows - 100)
    assert not np.array_equal(a.rows, subsample(sp, 10, 4).rows)
    with pytest.raises(ValueError):
        subsample(sp, 0, 0)


def test_metric_report():
    r = MetricReport("t", "accuracy", "init", [SeedResult(s, v, v, 1, 10) for s, v in enumerate([0.5, 0.7, 0.9])])
    assert r.mean == pytest.approx(0.7) and r.std == pytest.approx(0.2)
    rows = r.csv_rows()
    assert [x["seed"] for x in rows] == [0, 1, 2, "mean", "std"]
    assert rows[-1]["value"] == "0.200000"


# ---------------------------------------------------------------------------
# task definitions


def test_task_spec_validation_and_json(tmp_path, tiny):
    spec = tiny["tiny-a"].spec
    spec.save(tmp_path / "t.json")
    again = TaskSpec.load(tmp_path / "t.json")
    assert again.to_json() == spec.to_json()
    doc = spec.to_json()
    del doc["metric"]
    with pytest.raises(ParseError):
        TaskSpec.from_json(doc)
    bad = copy.deepcopy(spec.to_json())
    bad["splits"]["val"]["rows"][0] = bad["splits"]["train"]["rows"][0]
    with pytest.raises(ValueError, match="overlaps"):
        TaskSpec.from_json(bad)
    bad = copy.deepcopy(spec.to_json())
    bad["label_values"] = ["no"]
    with pytest.raises(ValueError):
        TaskSpec.from_json(bad)


def test_task_data_drops_null_targets(shop_manifest, codec16, stub16, caplog):
    graph, store, _ = open_rdb(shop_manifest, stub16, codec16)
    spec = TaskSpec("shop-age", "shop", "users", "age", "regression", "mae",
                    {"train": Split([0, 1, 2], [10**10] * 3), "val": Split([], []), "test": Split([], [])})
    with caplog.at_level(logging.WARNING):
        td = TaskData(spec, graph, store)
    assert td.splits["train"].rows.tolist() == [0, 1]
    assert "dropping 1 rows" in caplog.text
    # two finite training values, so a quantile normaliser maps them to the tails
    assert td.targets["train"][0] < 0 < td.targets["train"][1]


# ---------------------------------------------------------------------------
# completion pretraining


def _five_column_store(tmp_path, codec16, stub16, n=1000):
    doc = {"name": "five", "tables": [{"name": "t", "columns": [{"name": "id", "kind": "primary_key"}] +
                                       [{"name": f"c{j}", "kind": "numerical"} for j in range(5)]}]}
    rows = [[i] + [float(i + j) for j in range(5)] for i in range(n)]
    rows += [[n, 1.0, None, None, None, None]]  # a single usable cell
    p = write_db(tmp_path, doc, {"t": rows})
    graph, store, _ = open_rdb(p, stub16, codec16)
    return graph, store


def test_masking_is_uniform_over_columns(tmp_path, codec16, stub16):
    _, store = _five_column_store(tmp_path, codec16, stub16)
    rng = np.random.default_rng(0)
    picks = []
    for _ in range(5):
        picks += choose_masked_columns(store, 0, np.arange(1000), rng)
    freq = np.array([picks.count(f"c{j}") for j in range(5)]) / len(picks)
    assert np.all(np.abs(freq - 0.2) <= 0.02)


def test_rows_with_one_cell_are_skipped(tmp_path, codec16, stub16):
    graph, store = _five_column_store(tmp_path, codec16, stub16)
    assert choose_masked_columns(store, 0, [1000], np.random.default_rng(0)) == [None]
    src = completion_sources("five", graph, stub16, codec16)[0]
    b, tgt, skipped = _completion_batch(src, np.array([0, 1000]), np.random.default_rng(0), 0, FAST)
    assert skipped == 1 and b.size == 1
    # the masked cell is hidden from the root and the target is its encoding
    hidden = np.flatnonzero(~b.mask[0].numpy())
    assert len(hidden) == 1
    assert torch.allclose(tgt[0], torch.from_numpy(store.x[0][0, hidden[0]]))


def test_completion_sources_are_single_table(tiny, codec16, stub16):
    td = tiny["tiny-a"]
    srcs = completion_sources("tiny-a", td.graph, stub16, codec16)
    assert [s.name for s in srcs] == ["tiny-a/users", "tiny-a/items", "tiny-a/purchases"]
    for s in srcs:
        assert len(s.graph.node_types) == 1 and s.graph.relations == []
        assert not set(s.train_rows) & set(s.val_rows)


def test_completion_pretraining_lowers_validation_loss(tiny, codec16, stub16):
    td = tiny["tiny-b"]
    corpus = completion_sources("tiny-b", td.graph, stub16, codec16)
    ck = _ck(codec16, stub16)
    out = pretrain_completion(ck, corpus, FAST, max_steps=60, eval_every=20)
    curve = out.history[-1]["curve"]
    assert curve[0][0] == 0 and len(curve) >= 2
    assert min(v for _, v in curve[1:]) < curve[0][1]
    assert out.stage == "completion" and out.datasets_seen == ["tiny-b"]
    assert ck.stage == "init"
    with pytest.raises(EmptyCorpus):
        pretrain_completion(ck, [], FAST)
    with pytest.raises(LeakageError):
        pretrain_completion(_ck(codec16, stub16, downstream_registry=["tiny-b"]), corpus, FAST, max_steps=1)


# ---------------------------------------------------------------------------
# sft and fine-tuning


def test_sft_noop_and_leakage(tiny, codec16, stub16):
    ck = _ck(codec16, stub16)
    assert sft(ck, [], FAST, codec16) is ck
    with pytest.raises(LeakageError):
        sft(ck, [tiny["tiny-a"]], FAST, codec16, downstream=["tiny-a"])
    seen = _ck(codec16, stub16, datasets_seen=["tiny-b"])
    with pytest.raises(LeakageError):
        sft(seen, [tiny["tiny-a"]], FAST, codec16, downstream=["tiny-b"])


def test_sft_lowers_validation_loss_on_both_tasks(tiny, codec16, stub16):
    ck = _ck(codec16, stub16)
    cfg = TrainConfig(lr=3e-3, batch_size=32, patience=5, max_epochs=5, fanout=5)
    out = sft(ck, [tiny["tiny-a"], tiny["tiny-b"]], cfg, codec16, downstream=["held-out"])
    curve = out.history[-1]["curve"]
    first = curve[0]["val_loss"]
    best = np.min([c["val_loss"] for c in curve[1:]], axis=0)
    assert (best < np.asarray(first)).all()
    assert out.datasets_seen == ["tiny-a", "tiny-b"] and out.downstream_registry == ["held-out"]
    with pytest.raises(LeakageError):
        finetune(out, tiny["tiny-a"], FAST, codec16)


def test_finetune_is_deterministic(tiny, codec16, stub16):
    ck = _ck(codec16, stub16)
    m1, r1 = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=5)
    m2, r2 = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=5)
    assert r1 == r2
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k


def test_full_limit_equals_no_limit(tiny, codec16, stub16):
    ck = _ck(codec16, stub16)
    n = len(tiny["tiny-a"].splits["train"])
    _, a = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=1)
    _, b = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=1, limit=n)
    _, c = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=1, limit=n + 50)
    assert a == b == c
    _, d = finetune(ck, tiny["tiny-a"], FAST, codec16, seed=1, limit=16)
    assert d.train_size == 16


def test_finetune_leaves_codec_and_checkpoint_untouched(tiny, codec16, stub16):
    ck = Checkpoint.initial(MODEL, seed=0, codec=codec16, provider=stub16)
    fp = codec16.fingerprint()
    before = {k: v.clone() for k, v in ck.state.items()}
    epochs = []
    finetune(ck.advance(ck.build_model(), "completion", [], {}), tiny["tiny-a"], FAST, codec16,
             on_epoch=lambda e, v, l: epochs.append(e))
    assert codec16.fingerprint() == fp
    assert all(torch.equal(before[k], v) for k, v in ck.state.items())
    assert epochs == list(range(1, len(epochs) + 1)) and epochs


def test_finetune_and_eval_report(tiny, codec16, stub16):
    rep = finetune_and_eval(_ck(codec16, stub16), tiny["tiny-a"], FAST, codec16, limit=32, seeds=(0, 1), variant="v")
    assert rep.variant == "v" and [r.seed for r in rep.results] == [0, 1]
    assert all(0.0 <= r.test <= 1.0 and r.train_size == 32 for r in rep.results)


def test_regression_finetune_runs(tiny, codec16, stub16):
    td = tiny["tiny-a"]
    g = td.graph
    k = g.type_id("purchases")
    n = g.num_nodes(k)
    t = g.node_times[k]
    rows = np.arange(n)
    spec = TaskSpec("tiny-a-amount", "tiny-a", "purchases", "amount", "regression", "mae",
                    {"train": Split(rows[: n // 2], t[: n // 2]), "val": Split(rows[n // 2 : 3 * n // 4], t[n // 2 : 3 * n // 4]),
                     "test": Split(rows[3 * n // 4 :], t[3 * n // 4 :])})
    reg = TaskData(spec, g, td.store)
    _, res = finetune(_ck(codec16, stub16), reg, replace(FAST, max_epochs=2), codec16)
    assert np.isfinite(res.test) and res.test >= 0

