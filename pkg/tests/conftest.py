import numpy as np
import pytest

from kglink.kg import TripleStore, Vocabulary, make_splits
from kglink.models import MODEL_NAMES, InitSpec, ModelKind, init_params

ALL_KINDS = [ModelKind(n) for n in MODEL_NAMES] + [ModelKind("TransE", norm=1),
                                                   ModelKind("TransH", norm=1),
                                                   ModelKind("RotatE", norm=1)]


def random_store(rng, n_entities=20, n_relations=3, n_triples=60):
    ent = Vocabulary(f"e{i}" for i in range(n_entities))
    rel = Vocabulary(f"r{i}" for i in range(n_relations))
    t = np.stack([rng.integers(0, n_entities, n_triples),
                  rng.integers(0, n_relations, n_triples),
                  rng.integers(0, n_entities, n_triples)], axis=1)
    return TripleStore(t, ent, rel)


def random_params(kind, n_entities=7, n_relations=3, d=4, seed=0, reciprocal=False):
    return init_params(kind, n_entities, n_relations, d, InitSpec("Normal", std=0.5),
                       seed=seed, reciprocal=reciprocal)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_splits():
    rng = np.random.default_rng(3)
    store = random_store(rng, 20, 3, 80)
    return make_splits(store, seed=1)


def memorization_splits(seed=0):
    """Ten distinct triples over 5 entities and 2 relations, all in train."""
    from kglink.kg import splits_from_stores

    rng = np.random.default_rng(seed)
    grid = np.array([(s, p, o) for s in range(5) for p in range(2) for o in range(5)])
    ent = Vocabulary(f"e{i}" for i in range(5))
    rel = Vocabulary(["r0", "r1"])
    train = TripleStore(grid[rng.choice(len(grid), 10, replace=False)], ent, rel)
    empty = TripleStore(np.empty((0, 3)), ent, rel)
    return splits_from_stores(train, empty, empty)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
