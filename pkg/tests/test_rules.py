import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_store
from kglink.errors import FormatError
from kglink.kg import TripleStore, Vocabulary, make_splits, splits_from_stores
from kglink.rules import (GroundPath, Rule, RuleBase, evaluate_rules, format_rule, generalize,
                          learn, parse_rule, predict, read_rules, sample_ground_path, score_rule,
                          write_rules)


def brute_force_score(rule, triples, n_entities):
    """Try every assignment of entities to the rule's variables."""
    facts = {tuple(t) for t in triples}
    atoms = (rule.head,) + rule.body
    variables = sorted({t for a in atoms for t in a[1:] if isinstance(t, str)})
    consts = {t for a in atoms for t in a[1:] if not isinstance(t, str)}
    head_vars = [t for t in rule.head[1:] if isinstance(t, str)]
    body_heads = set()
    for values in itertools.permutations(range(n_entities), len(variables)):
        if consts & set(values):
            continue
        b = dict(zip(variables, values))
        sub = lambda t: b[t] if isinstance(t, str) else t
        if all((sub(x), p, sub(y)) in facts for p, x, y in rule.body):
            body_heads.add(tuple(b[v] for v in head_vars))
    support = 0
    for g in body_heads:
        b = dict(zip(head_vars, g))
        sub = lambda t: b[t] if isinstance(t, str) else t
        support += (sub(rule.head[1]), rule.head[0], sub(rule.head[2])) in facts
    return support, len(body_heads)


def store_from(triples, n_entities, n_relations):
    ent = Vocabulary(f"e{i}" for i in range(n_entities))
    rel = Vocabulary(f"r{i}" for i in range(n_relations))
    return TripleStore(np.array(triples, dtype=np.int64).reshape(-1, 3), ent, rel)


def test_single_triple_store_path():
    store = store_from([[0, 0, 1]], 2, 1)
    path = sample_ground_path(store, 3, np.random.default_rng(0))
    assert path.head == (0, 0, 1) and path.body == []
    assert generalize(path) == []


def test_chain_reaches_both_lengths():
    store = store_from([[0, 0, 1], [1, 0, 2]], 3, 1)
    lengths = {len(sample_ground_path(store, 2, np.random.default_rng(i))) for i in range(50)}
    assert lengths == {0, 1}  # walking from an end of the chain finds nothing
    store = store_from([[0, 0, 1], [1, 0, 2], [2, 0, 3]], 4, 1)
    lengths = {len(sample_ground_path(store, 2, np.random.default_rng(i))) for i in range(100)}
    assert {1, 2} <= lengths


def test_path_adjacency():
    store = random_store(np.random.default_rng(0), 30, 3, 120)
    rng = np.random.default_rng(1)
    for _ in range(10000):
        path = sample_ground_path(store, 3, rng)
        node = path.head[path.start]
        for tr in path.body:
            assert node in (tr[0], tr[2])
            assert tuple(tr) in store
            node = tr[2] if tr[0] == node else tr[0]


def test_generalize_paper_style_pair():
    # drug d, relation 0, two disease constants 5 and 6
    path = GroundPath(head=(1, 0, 6), body=[(1, 0, 5)], start=0)
    rules = generalize(path)
    assert Rule((0, "X", 6), ((0, "X", 5),)) in rules
    assert Rule((0, "X", 6), ((0, "X", "A"),)) in rules
    assert len(rules) == len(set(rules)) >= 2


def test_generalize_cyclic_and_start_object():
    path = GroundPath(head=(1, 0, 2), body=[(1, 1, 3), (2, 2, 3)], start=0)
    assert generalize(path) == [Rule((0, "X", "Y"), ((1, "X", "A"), (2, "Y", "A")))]
    path = GroundPath(head=(1, 0, 2), body=[(4, 1, 2)], start=2)
    rules = generalize(path)
    assert Rule((0, 1, "Y"), ((1, 4, "Y"),)) in rules
    assert Rule((0, 1, "Y"), ((1, "A", "Y"),)) in rules


def test_generalize_rejects_revisits():
    path = GroundPath(head=(1, 0, 2), body=[(1, 1, 3), (3, 1, 1)], start=0)
    assert generalize(path) == []


def test_paper_fixture_150_of_238():
    triples = [[i, 0, 1000] for i in range(238)] + [[i, 0, 1001] for i in range(150)]
    store = store_from(triples, 1002, 1)
    rule = Rule((0, "X", 1001), ((0, "X", 1000),))
    support, n, conf = score_rule(rule, store)
    assert (support, n) == (150, 238)
    assert round(conf, 3) == 0.630


def test_body_subset_of_head_confidence_one():
    store = store_from([[0, 0, 1], [2, 0, 3], [0, 1, 1], [2, 1, 3]], 4, 2)
    assert score_rule(Rule((1, "X", "Y"), ((0, "X", "Y"),)), store) == (2, 2, 1.0)


def test_empty_body_count():
    store = store_from([[0, 0, 1]], 3, 2)
    assert score_rule(Rule((0, "X", "Y"), ((1, "X", "Y"),)), store) == (0, 0, None)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_score_rule_matches_brute_force(seed, max_len):
    rng = np.random.default_rng(seed)
    store = random_store(rng, 8, 2, 30)
    for _ in range(6):
        for rule in generalize(sample_ground_path(store, max_len, rng)):
            support, n, _ = score_rule(rule, store)
            assert (support, n) == brute_force_score(rule, store.triples.tolist(), 8)


def test_predict_single_rule_and_empty():
    store = store_from([[0, 1, 2]], 4, 2)
    base = RuleBase()
    base.add(Rule((0, "X", "Y"), ((1, "X", "Y"),), 3, 5))
    assert predict(base, (0, 0, None), store) == [(2, (0.6,))]
    assert predict(base, (3, 0, None), store) == []
    assert predict(RuleBase(), (0, 0, None), store) == []


def test_predict_tie_break():
    store = store_from([[0, 1, 2], [0, 2, 2], [0, 1, 3]], 4, 3)
    base = RuleBase()
    base.add(Rule((0, "X", "Y"), ((1, "X", "Y"),), 6, 10))
    base.add(Rule((0, "X", "Y"), ((2, "X", "Y"),), 4, 10))
    out = predict(base, (0, 0, None), store)
    assert [e for e, _ in out] == [2, 3]
    assert out[0][1] == (0.6, 0.4) and out[1][1] == (0.6,)
    noisy = predict(base, (0, 0, None), store, aggregation="noisy_or")
    assert noisy[0][1][0] == pytest.approx(1 - 0.4 * 0.6)


def test_predict_head_queries_and_constants():
    store = store_from([[0, 1, 5], [2, 1, 5]], 6, 2)
    base = RuleBase()
    base.add(Rule((0, "X", 4), ((1, "X", 5),), 1, 2))
    assert predict(base, (0, 0, None), store) == [(4, (0.5,))]
    assert sorted(e for e, _ in predict(base, (None, 0, 4), store)) == [0, 2]
    assert predict(base, (None, 0, 3), store) == []


def test_predict_deterministic():
    store = random_store(np.random.default_rng(2), 20, 2, 80)
    base = learn(store, 0.3, max_len=2, seed=1)
    q = tuple(int(x) for x in store.triples[0])
    assert predict(base, (q[0], q[1], None), store) == predict(base, (q[0], q[1], None), store)


def test_learn_budget_and_threshold():
    store = random_store(np.random.default_rng(4), 30, 3, 150)
    t0 = time.monotonic()
    base = learn(store, 1.0, max_len=2, threshold=1)
    assert time.monotonic() - t0 < 2.0
    assert len(base) > 0
    for rule in base:
        assert rule.support >= 1 and 0 < rule.confidence <= 1
        assert score_rule(rule, store)[:2] == (rule.support, rule.body_count)
    assert len(learn(store, 0.3, threshold=10 ** 6)) == 0
    assert base.metadata["threshold_semantics"] == "min support"


def test_longer_max_len_keeps_shapes():
    store = random_store(np.random.default_rng(5), 15, 2, 60)

    def shapes(max_len):
        rng = np.random.default_rng(0)
        out = set()
        for _ in range(3000):
            for r in generalize(sample_ground_path(store, max_len, rng)):
                out.add((r.kind, len(r.body)))
        return out

    s1, s2 = shapes(1), shapes(2)
    assert s1 <= s2 and any(n == 2 for _, n in s2)


def test_evaluate_rules_fixture():
    # r1 mirrors r0 exactly, so the cyclic rule r1(X,Y) <= r0(X,Y) explains every test triple
    rng = np.random.default_rng(0)
    pairs = set()
    while len(pairs) < 40:
        a, b = rng.integers(0, 60, 2)
        if a != b:
            pairs.add((int(a), int(b)))
    pairs = sorted(pairs)
    base_t = [[a, 0, b] for a, b in pairs]
    test_pairs = pairs[:10]
    train_t = base_t + [[a, 1, b] for a, b in pairs[10:]]
    ent = Vocabulary(f"e{i}" for i in range(60))
    rel = Vocabulary(["r0", "r1"])
    mk = lambda t: TripleStore(np.array(t, dtype=np.int64).reshape(-1, 3), ent, rel)
    test = mk([[a, 1, b] for a, b in test_pairs])
    splits = splits_from_stores(mk(train_t), mk(np.empty((0, 3))), test)
    rb = RuleBase()
    rb.add(Rule((1, "X", "Y"), ((0, "X", "Y"),), 30, 40))
    rep = evaluate_rules(rb, test, splits)
    assert rep.mrr == 1.0 and rep.coverage == 1.0
    empty = evaluate_rules(RuleBase(), test, splits)
    assert empty.mrr == 0.0 and empty.hits["10"] == 0.0 and empty.coverage == 0.0


def test_uncovered_queries_scale_metrics_by_coverage():
    from kglink.evaluation import report_from_ranks
    t = np.array([[0, 0, 1]] * 4)
    covered_head, covered_tail = np.array([1.0, 2.0, 1.0]), np.array([1.0, 3.0, 1.0])
    full = report_from_ranks(t[:3], covered_head, covered_tail, Vocabulary(["r"]))
    rep = report_from_ranks(t, np.r_[covered_head, np.inf], np.r_[covered_tail, np.inf],
                            Vocabulary(["r"]))
    assert rep.mrr == pytest.approx(full.mrr * 6 / 8, abs=1e-15)
    assert rep.hits["10"] == pytest.approx(full.hits["10"] * 6 / 8, abs=1e-15)
    assert rep.mrr < rep.hits["10"]


def test_rules_file_round_trip(tmp_path):
    store = random_store(np.random.default_rng(6), 20, 3, 80)
    base = learn(store, 0.3, max_len=3, seed=2)
    path = tmp_path / "rules.tsv"
    write_rules(base, path, store.entities, store.relations)
    back = read_rules(path, store.entities, store.relations)
    assert [r.shape for r in back] == [r.shape for r in base]
    assert [(r.support, r.body_count) for r in back] == [(r.support, r.body_count) for r in base]
    line = path.read_text().splitlines()[0]
    assert line.count("\t") == 3 and " <= " in line


def test_rules_file_errors():
    ent, rel = Vocabulary(["a", "b"]), Vocabulary(["r"])
    with pytest.raises(FormatError):
        parse_rule("1\t2\tr(X,Y) <= r(Y,X)", ent, rel)
    with pytest.raises(FormatError):
        parse_rule("1\t2\t0.5\tr(X,c) <= r(X,Y)", ent, rel)
    r = parse_rule("1\t2\t0.5\tr(X,a) <= r(X,A), r(A,b)", ent, rel)
    assert r.head == (0, "X", 0) and r.body == ((0, "X", "A"), (0, "A", 1))
    assert format_rule(r, ent, rel) == "1\t2\t0.500000\tr(X,a) <= r(X,A), r(A,b)"
    bad = Vocabulary(["X", "b"])
    with pytest.raises(FormatError):
        format_rule(r, bad, rel)
