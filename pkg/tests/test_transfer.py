import hashlib

import numpy as np
import pytest

from conftest import random_params, random_store
from kglink.config import TrainConfig
from kglink.errors import ConfigError, FormatError, SamplingExhausted, UndefinedMetricError
from kglink.kg import TripleStore, Vocabulary, add_reciprocals, make_splits
from kglink.models import InitSpec, ModelKind, init_params
from kglink.transfer import (MAGIC, Checkpoint, ClassifierConfig, PairClassifier, PairDataset,
                             build_pair_dataset, checkpoint_bytes, downstream_lp, entity_matches,
                             load_checkpoint, parse_checkpoint, save_checkpoint, train_classifier,
                             warm_start)


def _vocab(prefix, n):
    return Vocabulary(f"{prefix}{i}" for i in range(n))


@pytest.mark.parametrize("name", ["ComplEx", "TransH", "ConvE", "RotatE"])
def test_checkpoint_round_trip_bitwise(tmp_path, name):
    params = random_params(ModelKind(name), 6, 4, 4, seed=2, reciprocal=True)
    cfg = TrainConfig(model=name, embedding_size=4, reciprocal=True, learning_rate=0.417)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, _vocab("e", 6), _vocab("r", 4), cfg, path)
    ck = load_checkpoint(path)
    for key, table in params.tables().items():
        assert table.tobytes() == ck.params.tables()[key].tobytes()
    assert ck.config == cfg and ck.params.reciprocal and ck.entities == _vocab("e", 6)
    assert ck.params.kind == params.kind


def test_checkpoint_layout_arithmetic():
    params = init_params(ModelKind("ComplEx"), 3, 1, 512, InitSpec("Normal", std=0.1))
    ck = parse_checkpoint(checkpoint_bytes(params, _vocab("e", 3), _vocab("r", 1), TrainConfig()))
    assert ck.params.entity.shape == (3, 2 * 512)


def test_checkpoint_float32_export():
    params = random_params(ModelKind("DistMult"), 4, 2, 3)
    data = checkpoint_bytes(params, _vocab("e", 4), _vocab("r", 2), TrainConfig(), float32=True)
    ck = parse_checkpoint(data)
    assert np.allclose(ck.params.entity, params.entity, atol=1e-6)


def test_checkpoint_corruption_detected():
    params = random_params(ModelKind("DistMult"), 4, 2, 3)
    data = checkpoint_bytes(params, _vocab("e", 4), _vocab("r", 2), TrainConfig())
    for cut in (0, 5, len(MAGIC) + 2, len(data) // 2, len(data) - 1):
        with pytest.raises(FormatError):
            parse_checkpoint(data[:cut])
    with pytest.raises(FormatError):
        parse_checkpoint(b"XXXXXXXX" + data[8:])
    bumped = data[:8] + (99).to_bytes(4, "little") + data[12:]
    with pytest.raises(FormatError, match="version"):
        parse_checkpoint(bumped)
    with pytest.raises(FormatError):
        parse_checkpoint(data + b"\x00")


def _checkpoint(names, d=4, name="ComplEx"):
    ent = Vocabulary(names)
    params = init_params(ModelKind(name), len(ent), 2, d, InitSpec("Normal", std=0.3), seed=5)
    return Checkpoint(params, ent, _vocab("r", 2), TrainConfig(model=name, embedding_size=d))


def _row_hashes(table):
    return [hashlib.sha256(r.tobytes()).hexdigest() for r in table]


def test_warm_start_copies_exactly_intersection():
    ck = _checkpoint([f"x{i}" for i in range(10)])
    target_names = ["x3", "y0", "x7", "y1", "x0"]
    target = TripleStore(np.array([[0, 0, 1], [2, 0, 3], [4, 0, 1]]), Vocabulary(target_names),
                         _vocab("t", 1))
    params = warm_start(ck, target, ModelKind("ComplEx"), 4, InitSpec("Normal", std=0.3), seed=1)
    fresh = init_params(ModelKind("ComplEx"), 5, 1, 4, InitSpec("Normal", std=0.3), seed=1)
    src_hashes = set(_row_hashes(ck.params.entity))
    copied = [h in src_hashes for h in _row_hashes(params.entity)]
    expected = {n for n in target_names} & set(ck.entities.names)
    assert sum(copied) == len(expected) == 3
    for i, name in enumerate(target_names):
        if name in ck.entities:
            assert np.array_equal(params.entity[i], ck.params.entity[ck.entities.id(name)])
        else:
            assert np.array_equal(params.entity[i], fresh.entity[i])
    assert np.array_equal(params.relation, fresh.relation)
    assert not np.isin(_row_hashes(params.relation), _row_hashes(ck.params.relation)).any()


def test_warm_start_subset_and_disjoint():
    ck = _checkpoint([f"x{i}" for i in range(6)])
    sub = TripleStore(np.array([[0, 0, 1]]), Vocabulary(["x4", "x1"]), _vocab("t", 1))
    params = warm_start(ck, sub, ModelKind("ComplEx"), 4, InitSpec("Normal"))
    assert np.array_equal(params.entity, ck.params.entity[[4, 1]])
    disjoint = TripleStore(np.array([[0, 0, 1]]), Vocabulary(["a", "b"]), _vocab("t", 1))
    assert len(entity_matches(ck.entities, disjoint.entities)[0]) == 0


def test_warm_start_mismatch_errors():
    ck = _checkpoint(["a", "b"])
    store = TripleStore(np.array([[0, 0, 1]]), Vocabulary(["a", "b"]), _vocab("t", 1))
    with pytest.raises(ConfigError):
        warm_start(ck, store, ModelKind("ComplEx"), 8, InitSpec("Normal"))
    with pytest.raises(ConfigError):
        warm_start(ck, store, ModelKind("TransE"), 4, InitSpec("Normal"))


def test_warm_start_reciprocal_relation_rows():
    ck = _checkpoint(["a", "b", "c"])
    store = TripleStore(np.array([[0, 0, 1], [1, 1, 2]]), Vocabulary(["a", "b", "c"]), _vocab("t", 2))
    params = warm_start(ck, store, ModelKind("ComplEx"), 4, InitSpec("Normal"), reciprocal=True)
    assert params.n_relations == 4 and params.reciprocal


def test_pair_dataset_contract():
    store = random_store(np.random.default_rng(0), 40, 3, 120)
    ds = build_pair_dataset(store, 1.0, seed=3)
    neg = ds.labels == ds.negative_class
    assert neg.sum() == len(store)
    assert ds.classes[-1] == "no_interaction" and ds.classes.count("no_interaction") == 1
    linked = {(s, o) for s, _, o in store.triples.tolist()}
    for a, b in ds.pairs[neg].tolist():
        assert (a, b) not in linked and (b, a) not in linked
    again = build_pair_dataset(store, 1.0, seed=3)
    assert np.array_equal(ds.pairs, again.pairs)
    sizes = {k: len(v) for k, v in ds.split.items()}
    assert sum(sizes.values()) == len(ds.pairs)
    assert sizes["test"] == int(0.1 * len(ds.pairs))
    assert len(ds.to_tsv().splitlines()) == len(ds.pairs)


def test_pair_dataset_exhaustion():
    ent = Vocabulary(["a", "b", "c"])
    store = TripleStore(np.array([[0, 0, 1], [1, 0, 2], [0, 0, 2]]), ent, Vocabulary(["r"]))
    with pytest.raises(SamplingExhausted):
        build_pair_dataset(store, 1.0)


def test_pair_dataset_three_classes():
    rel = Vocabulary(["increase", "decrease"])
    rng = np.random.default_rng(0)
    t = np.column_stack([rng.integers(0, 30, 60), rng.integers(0, 2, 60), rng.integers(30, 60, 60)])
    ds = build_pair_dataset(TripleStore(t, _vocab("d", 60), rel), 0.5)
    assert ds.classes == ["increase", "decrease", "no_interaction"]


def test_classifier_gradients():
    rng = np.random.default_rng(0)
    clf = PairClassifier(rng.normal(size=(6, 3)), (4,), 3, rng)
    pairs = rng.integers(0, 6, size=(5, 2))
    labels = rng.integers(0, 3, 5)
    loss, dws, dbs, demb = clf.loss_and_grads(pairs, labels)
    eps = 1e-6
    for arr, grad in [(clf.weights[0], dws[0]), (clf.weights[1], dws[1]), (clf.biases[0], dbs[0]),
                      (clf.embedding, demb.dense(6))]:
        for idx in list(np.ndindex(arr.shape))[:20]:
            old = arr[idx]
            arr[idx] = old + eps
            up = clf.loss_and_grads(pairs, labels)[0]
            arr[idx] = old - eps
            down = clf.loss_and_grads(pairs, labels)[0]
            arr[idx] = old
            assert abs((up - down) / (2 * eps) - grad[idx]) < 1e-6


def _separable_dataset(seed=0):
    """Class of a pair is determined by the group of its first entity."""
    rng = np.random.default_rng(seed)
    n = 60
    ent = _vocab("e", n)
    a = rng.integers(0, n, 900)
    b = rng.integers(0, n, 900)
    labels = a % 3
    order = rng.permutation(900)
    split = {"train": order[:720], "valid": order[720:810], "test": order[810:]}
    return PairDataset(np.column_stack([a, b]), labels, ["x", "y", "no_interaction"], ent, split, 2)


def test_classifier_separable():
    ds = _separable_dataset()
    _, rep = train_classifier(ds, None, ClassifierConfig(dim=16, batch_size=64, learning_rate=0.01,
                                                         epochs=50))
    assert rep.auroc >= 0.99


def test_frozen_embeddings_unchanged():
    ds = _separable_dataset()
    ck = _checkpoint([f"e{i}" for i in range(60)], d=4, name="DistMult")
    before = hashlib.sha256(ck.params.entity.tobytes()).hexdigest()
    clf, rep = train_classifier(ds, ck, ClassifierConfig(mode="pretrained-frozen", epochs=3,
                                                         learning_rate=0.01, batch_size=64))
    assert hashlib.sha256(clf.embedding.tobytes()).hexdigest() == before
    clf2, _ = train_classifier(ds, ck, ClassifierConfig(mode="pretrained-finetuned", epochs=3,
                                                        learning_rate=0.01, batch_size=64))
    assert not np.array_equal(clf2.embedding, ck.params.entity)
    assert rep.metadata["unresolved_entities"] == 0


def test_unresolved_entities_counted():
    ds = _separable_dataset()
    ck = _checkpoint([f"e{i}" for i in range(50)], d=4, name="DistMult")
    _, rep = train_classifier(ds, ck, ClassifierConfig(mode="pretrained-frozen", epochs=1))
    assert rep.metadata["unresolved_entities"] == 10


def test_classifier_errors():
    ds = _separable_dataset()
    single = PairDataset(ds.pairs, np.zeros_like(ds.labels), ds.classes, ds.entities, ds.split)
    with pytest.raises(UndefinedMetricError):
        train_classifier(single, None, ClassifierConfig(epochs=1))
    with pytest.raises(ConfigError):
        ClassifierConfig(mode="frozen")
    with pytest.raises(ConfigError):
        train_classifier(ds, None, ClassifierConfig(mode="pretrained-frozen"))


def test_downstream_lp_disjoint_warm_equals_scratch(tiny_splits):
    cfg = TrainConfig(model="ComplEx", embedding_size=4, max_epochs=3)
    ck = _checkpoint(["zz0", "zz1"], d=4)
    p1, r1, e1 = downstream_lp(tiny_splits, None, cfg)
    p2, r2, e2 = downstream_lp(tiny_splits, None, cfg, warm=ck)
    assert np.array_equal(p1.entity, p2.entity)
    assert e1.mrr == e2.mrr and r2.settings["copied_entities"] == 0
    assert r1.settings["epochs_to_best"] == r1.best_epoch
