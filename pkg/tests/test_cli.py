import json

import numpy as np
import pytest

from kglink.cli import MANIFEST, dispatch
from kglink.config import preset_names, preset_text, validate_config
from kglink.synthetic import clustered_kg

SMALL = """
model.type = "ComplEx"
embedding_size = 4
max_epochs = 3
valid.every = 1
"""


@pytest.fixture
def data(tmp_path):
    store = clustered_kg(4, 5, 2, 2, seed=0)
    raw = tmp_path / "raw.tsv"
    raw.write_text("".join(f"{s}\t{p}\t{o}\n" for s, p, o in store.names()))
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    assert dispatch(["split", "--input", str(raw), "--output", str(tmp_path / "splits"),
                     "--seed", "3"]) == 0
    return tmp_path


def _manifest(directory):
    return json.loads((directory / MANIFEST).read_text())


def test_ingest_and_stats(data, capsys):
    assert dispatch(["ingest", "--input", str(data / "raw.tsv"), "--output", str(data / "ing")]) == 0
    assert (data / "ing" / "triples.tsv").exists()
    m = _manifest(data / "ing")
    assert m["subcommand"] == "ingest" and str(data / "raw.tsv") in m["inputs"]
    capsys.readouterr()
    assert dispatch(["stats", "--input", str(data / "raw.tsv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "relation,mean,median,std,max,min"
    assert lines[1].startswith("Total,")


def test_split_writes_manifest(data):
    d = data / "splits"
    for name in ("train.tsv", "valid.tsv", "test.tsv", "split_manifest.json", MANIFEST):
        assert (d / name).exists()
    assert _manifest(d)["seeds"]["root"] == 3


def test_train_eval_deterministic(data, capsys):
    out = data / "run"
    assert dispatch(["train", "--splits", str(data / "splits"), "--config", str(data / "small.toml"),
                     "--set", "optimizer.learning_rate=0.2", "--output", str(out)]) == 0
    m = _manifest(out)
    assert m["config"]["optimizer.learning_rate"] == 0.2
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 3
    capsys.readouterr()
    args = ["eval", "--checkpoint", str(out / "model.ckpt"), "--splits", str(data / "splits")]
    assert dispatch(args) == 0
    first = capsys.readouterr().out
    assert dispatch(args) == 0
    assert capsys.readouterr().out == first
    assert "mrr" in json.loads(first)
    assert dispatch(args + ["--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("relation,train_frequency")
    # retraining with the manifest's argv reproduces the checkpoint
    again = data / "run2"
    argv = [a if a != str(out) else str(again) for a in m["argv"]]
    assert dispatch(argv) == 0
    assert (again / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_export(data):
    out = data / "run"
    dispatch(["train", "--splits", str(data / "splits"), "--config", str(data / "small.toml"),
              "--output", str(out)])
    assert dispatch(["export", "--checkpoint", str(out / "model.ckpt"), "--output",
                     str(data / "exp"), "--float32"]) == 0
    rows = (data / "exp" / "entity_embeddings.tsv").read_text().splitlines()
    assert len(rows) == 20 and len(rows[0].split("\t")) == 1 + 8
    assert (data / "exp" / "model.f32.ckpt").exists()


def test_hpo_and_rules(data, capsys):
    space = data / "space.toml"
    space.write_text(SMALL + 'hpo.embedding_size = [4]\nhpo.training_type = "1vsAll"\n'
                     'hpo.optimizer.batch_size = [128]\n')
    assert dispatch(["hpo", "--splits", str(data / "splits"), "--config", str(space),
                     "--trials", "2", "--output", str(data / "hpo")]) == 0
    assert len((data / "hpo" / "trials.jsonl").read_text().splitlines()) == 2
    assert (data / "hpo" / "best_config.toml").exists()
    assert dispatch(["rules-learn", "--splits", str(data / "splits"), "--time-budget", "0.5",
                     "--output", str(data / "rules")]) == 0
    capsys.readouterr()
    assert dispatch(["rules-eval", "--splits", str(data / "splits"), "--rules",
                     str(data / "rules" / "rules.tsv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0.0 <= rep["coverage"] <= 1.0


def test_transfer_and_classify(data, capsys):
    out = data / "run"
    dispatch(["train", "--splits", str(data / "splits"), "--config", str(data / "small.toml"),
              "--output", str(out)])
    assert dispatch(["transfer-lp", "--splits", str(data / "splits"), "--config",
                     str(data / "small.toml"), "--checkpoint", str(out / "model.ckpt"),
                     "--output", str(data / "tl")]) == 0
    rep = json.loads((data / "tl" / "transfer_report.json").read_text())
    assert rep["train"]["warm_start"] and rep["train"]["copied_entities"] == 20
    cls = data / "cls.toml"
    cls.write_text("classifier.dim = 8\nclassifier.epochs = 5\nclassifier.batch_size = 32\n")
    capsys.readouterr()
    assert dispatch(["classify", "--input", str(data / "raw.tsv"), "--config", str(cls),
                     "--checkpoint", str(out / "model.ckpt"), "--mode", "pretrained-frozen"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["metadata"]["mode"] == "pretrained-frozen" and 0 <= rep["auroc"] <= 1


def test_usage_errors_exit_2(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["train", "--bogus"]) == 2
    assert dispatch([]) == 2


def test_runtime_error_json(data, capsys):
    capsys.readouterr()
    code = dispatch(["train", "--splits", str(data / "splits"), "--config", str(data / "small.toml"),
                     "--set", "optimizer.learning_rate=2.0", "--set", "optimizer.batch_size=300",
                     "--output", str(data / "bad")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError"
    assert any("[0.0003, 1.0]" in i for i in err["issues"])
    assert any("{128, 256, 512, 1024}" in i for i in err["issues"])
    assert dispatch(["eval", "--checkpoint", str(data / "missing.ckpt"),
                     "--splits", str(data / "splits")]) == 1


def test_presets_validate_and_match_reported_column():
    names = preset_names()
    assert len(names) == 14
    for name in names:
        assert validate_config(preset_text(name)) == []
    from kglink.config import load_preset
    c = load_preset("complex-biokg")
    assert (c.learning_rate, c.regularizer, c.embedding_size, c.reciprocal) == (0.417, "F2", 512, True)


def test_validate_config_messages():
    issues = validate_config("optimizer.learning_rate = 2.0\noptimizer.batch_size = 300\n")
    assert len(issues) == 2
    assert "optimizer.learning_rate" in issues[0] and "[0.0003, 1.0]" in issues[0]
    assert "{128, 256, 512, 1024}" in issues[1]


def test_cache_dir_lookup(data, monkeypatch, capsys):
    monkeypatch.chdir(data / "splits")
    monkeypatch.setenv("KGLINK_CACHE_DIR", str(data))
    capsys.readouterr()
    assert dispatch(["stats", "--input", "raw.tsv", "--output", str(data / "st")]) == 0
    m = _manifest(data / "st")
    assert str(data / "raw.tsv") in m["inputs"]
    assert m["environment"]["KGLINK_CACHE_DIR"] == str(data)
    monkeypatch.delenv("KGLINK_CACHE_DIR")
    assert dispatch(["stats", "--input", "raw.tsv"]) == 1
