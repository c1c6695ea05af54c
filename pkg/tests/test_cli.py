import copy
import csv
import json

import pytest
import tomlkit

from conftest import SHOP_DOC, SHOP_ROWS, star_doc, write_db
from rdbfm.cli import main
from rdbfm.features import pretrain_float_codec
from rdbfm.model import ModelConfig
from rdbfm.synth import SynthSpec, generate
from rdbfm.training import Checkpoint

SMALL = ["--d", "16", "--layers", "2", "--heads", "4", "--dropout", "0"]
QUICK = ["--lr", "3e-3", "--batch-size", "32", "--patience", "2", "--max-epochs", "2", "--fanout", "5"]


@pytest.fixture(scope="module")
def env(tmp_path_factory, codec16):
    root = tmp_path_factory.mktemp("cli")
    codec16.save(root / "codec.pt")
    a = generate(SynthSpec(name="cli-a", seed=1, n_roots=80, n_hubs=20), root / "cli-a")
    b = generate(SynthSpec(name="cli-b", seed=2, n_roots=80, n_hubs=20), root / "cli-b")
    return {"root": root, "codec": str(root / "codec.pt"), "a": a, "b": b}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_ingest_report(shop_manifest, tmp_path, capsys):
    assert main(["ingest", "--manifest", str(shop_manifest), "--graph-out", str(tmp_path / "g.bin")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["dangling_fks"] == {"purchases.user_id→users": 1}
    assert rep["nodes"] == {"users": 3, "purchases": 6}
    assert rep["edges"] == {"purchases.user_id→users": 5, "users←purchases.user_id": 5}
    assert (tmp_path / "g.bin").is_file()


@pytest.mark.parametrize(
    "mutate, code",
    [
        (lambda d, r: d["tables"][0]["columns"].append({"name": "age", "kind": "numerical"}), 2),
        (lambda d, r: r["users"][0].__setitem__(1, "old"), 3),
    ],
)
def test_ingest_exit_codes(tmp_path, capsys, mutate, code):
    doc, rows = copy.deepcopy(SHOP_DOC), copy.deepcopy(SHOP_ROWS)
    mutate(doc, rows)
    p = write_db(tmp_path, doc, rows)
    assert main(["ingest", "--manifest", str(p)]) == code
    assert "error:" in capsys.readouterr().err


def test_malformed_manifest_exit_code(tmp_path, capsys):
    (tmp_path / "m.json").write_text("[1, 2")
    assert main(["ingest", "--manifest", str(tmp_path / "m.json")]) == 2
    assert main(["ingest", "--manifest", str(tmp_path / "missing.json")]) == 3


def test_sample_debug(tmp_path, capsys):
    rows = {"users": [[0, "no"]], "purchases": [[i, 0, 1.0, i + 1] for i in range(30)]}
    p = write_db(tmp_path, star_doc(), rows)
    g = tmp_path / "g.bin"
    assert main(["ingest", "--manifest", str(p), "--graph-out", str(g)]) == 0
    capsys.readouterr()
    args = ["sample-debug", "--graph", str(g), "--table", "users", "--row", "0", "--column", "churn"]
    assert main(args + ["--cutoff", "21", "--hops", "1", "--fanout", "20"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("root users#0 target=churn") and "nodes=21" in out[0]
    kids = [l for l in out[1:] if l.startswith("  [hop 1]")]
    assert len(kids) == 20 and "CAUSALITY" not in "\n".join(out)
    # a purchase row as root defaults its cutoff to its own time and sees only earlier history
    assert main(["sample-debug", "--graph", str(g), "--table", "purchases", "--row", "3", "--column", "amount"]) == 0
    out = capsys.readouterr().out
    assert "hop 2" in out and "purchases#3 " not in out.split("\n", 1)[1]
    assert main(args + ["--cutoff", "5"] + ["--row", "0"]) == 0
    capsys.readouterr()
    assert main(["sample-debug", "--graph", str(g), "--table", "users", "--row", "9", "--column", "churn",
                 "--cutoff", "5"]) == 5


def test_generate_synth(tmp_path, capsys):
    assert main(["generate-synth", "--out", str(tmp_path / "s"), "--name", "gen", "--n-roots", "40", "--rule", "fanin"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["tasks"][0].endswith("gen-churn.json")
    assert main(["generate-synth", "--out", str(tmp_path / "t"), "--label-noise", "0.9"]) == 13


def test_codec_stage(tmp_path, capsys):
    run = tmp_path / "codec"
    assert main(["pretrain-codec", "--run-dir", str(run), "--d", "8", "--heads", "4", "--codec-steps", "800"]) == 0
    assert (run / "codec.pt").is_file() and (run / "config.toml").is_file()
    assert float(_rows(run / "metrics.csv")[0]["value"]) < 0.05
    assert main(["pretrain-codec", "--run-dir", str(tmp_path / "bad"), "--d", "8", "--heads", "4",
                 "--codec-steps", "1"]) == 8


def test_config_precedence(tmp_path, env, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[train]\nlr = 0.01\npatience = 4\n[model]\nd = 16\nheads = 4\nlayers = 1\n')
    run = tmp_path / "run"
    code = main(["finetune", "--config", str(cfg), "--unpretrained", "--codec", env["codec"], "--task", str(env["a"].tasks[0]),
                 "--run-dir", str(run), "--lr", "0.02", "--max-epochs", "1", "--limit", "16"])
    assert code == 0
    written = tomlkit.parse((run / "config.toml").read_text()).unwrap()
    assert written["train"]["lr"] == 0.02 and written["train"]["patience"] == 4
    assert written["model"]["layers"] == 1 and written["provider"]["mode"] == "stub"
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["finetune", "--config", str(bad), "--unpretrained", "--codec", env["codec"],
                 "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "x")]) == 13
    bad.write_text("[train]\nlr = -1\n")
    assert main(["finetune", "--config", str(bad), "--unpretrained", "--codec", env["codec"],
                 "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "x")]) == 13


def test_finetune_writes_per_seed_rows(tmp_path, env, capsys):
    run = tmp_path / "ft"
    code = main(["finetune", "--unpretrained", "--codec", env["codec"], "--task", str(env["a"].tasks[0]),
                 "--run-dir", str(run), "--limit", "24", "--seeds", "2", "--seed", "3", *SMALL, *QUICK])
    assert code == 0
    rows = _rows(run / "metrics.csv")
    assert [r["seed"] for r in rows] == ["3", "4", "mean", "std"]
    assert {r["train_size"] for r in rows[:2]} == {"24"}
    manifest = json.loads((run / "run.json").read_text())
    assert manifest["command"] == "finetune" and manifest["seeds"] == [3, 4]
    assert (run / "cli-a-churn.seed3.ckpt").is_file()
    events = [json.loads(l) for l in (run / "log.jsonl").read_text().splitlines()]
    assert any(e.get("event") == "epoch" and e["seed"] == 4 for e in events)
    assert "cli-a-churn: accuracy" in capsys.readouterr().out


def test_missing_checkpoint_exit_code(tmp_path, env, capsys):
    code = main(["finetune", "--checkpoint", str(tmp_path / "nope.ckpt"), "--codec", env["codec"],
                 "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "r")])
    assert code == 12
    assert main(["eval", "--codec", env["codec"], "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "e")]) == 12
    assert main(["sft", "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "s"), *SMALL]) == 12


def test_pipeline_leakage_and_eval_determinism(tmp_path, env, capsys):
    root = tmp_path
    c = ["--codec", env["codec"]]
    assert main(["pretrain-completion", *c, "--rdb", str(env["b"].manifest_path), "--downstream", "cli-a",
                 "--steps", "20", "--eval-every", "10", "--run-dir", str(root / "pc"), *SMALL, *QUICK]) == 0
    pc = Checkpoint.load(root / "pc" / "completion.ckpt")
    assert pc.datasets_seen == ["cli-b"] and pc.downstream_registry == ["cli-a"]
    assert len(_rows(root / "pc" / "curve.csv")) >= 2

    # the reserved downstream database cannot be used for sft
    assert main(["sft", *c, "--checkpoint", str(root / "pc" / "completion.ckpt"), "--task", str(env["a"].tasks[0]),
                 "--run-dir", str(root / "leak"), *QUICK]) == 11
    assert main(["sft", *c, "--checkpoint", str(root / "pc" / "completion.ckpt"), "--task", str(env["b"].tasks[0]),
                 "--run-dir", str(root / "sft"), *QUICK]) == 0
    ck = Checkpoint.load(root / "sft" / "sft.ckpt")
    assert [h["stage"] for h in ck.history] == ["completion", "sft"]
    # fine-tuning on a database the checkpoint has already seen is leakage too
    assert main(["finetune", *c, "--checkpoint", str(root / "sft" / "sft.ckpt"), "--task", str(env["b"].tasks[0]),
                 "--run-dir", str(root / "ft-leak"), *QUICK]) == 11

    for name in ("e1", "e2"):
        assert main(["eval", *c, "--checkpoint", str(root / "sft" / "sft.ckpt"), "--task", str(env["a"].tasks[0]),
                     "--run-dir", str(root / name)]) == 0
    for f in ("metrics.csv", "predictions_cli-a-churn.csv"):
        assert (root / "e1" / f).read_bytes() == (root / "e2" / f).read_bytes()
    preds = _rows(root / "e1" / "predictions_cli-a-churn.csv")
    assert len(preds) == 16 and set(preds[0]) == {"row", "target", "prediction", "p_no", "p_yes"}


def test_codec_mismatch_is_config_error(tmp_path, env, codec16, capsys):
    other = tmp_path / "other.pt"
    pretrain_float_codec(16, steps=5, seed=9, check=False).save(other)
    Checkpoint.initial(ModelConfig(d=16, layers=1, heads=4), codec=codec16).save(tmp_path / "m.ckpt")
    assert main(["eval", "--codec", str(other), "--checkpoint", str(tmp_path / "m.ckpt"),
                 "--task", str(env["a"].tasks[0]), "--run-dir", str(tmp_path / "e")]) == 13
