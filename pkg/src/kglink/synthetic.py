"""Synthetic knowledge graphs with known structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .kg import TripleStore, Vocabulary


def clustered_kg(n_clusters: int = 8, cluster_size: int = 25, n_relations: int = 6,
                 out_degree: int = 3, seed: int = 0) -> TripleStore:
    """Entities fall into clusters; relation ``r`` links each entity to
    ``out_degree`` random members of cluster ``perm_r(c)`` where ``perm_r``
    is a fixed random permutation. Entity ``i`` is named ``e{i}`` and sits in
    cluster ``i // cluster_size``."""
    rng = np.random.default_rng(seed)
    n = n_clusters * cluster_size
    rows = []
    for r in range(n_relations):
        perm = rng.permutation(n_clusters)
        for s in range(n):
            target = perm[s // cluster_size]
            objs = rng.choice(cluster_size, size=min(out_degree, cluster_size), replace=False)
            rows.extend((s, r, int(target * cluster_size + o)) for o in objs)
    ent = Vocabulary(f"e{i}" for i in range(n))
    rel = Vocabulary(f"r{i}" for i in range(n_relations))
    return TripleStore(np.array(rows, dtype=np.int64), ent, rel)


def hold_out_relation(store: TripleStore, relation: str) -> tuple[TripleStore, TripleStore]:
    """``(pretraining store without relation, task store with only it)``.

    The task store has its own vocabularies restricted to what it uses.
    """
    p = store.relations.id(relation)
    t = store.triples
    keep = t[:, 1] != p
    rel = Vocabulary(n for n in store.relations.names if n != relation)
    remap = np.array([rel.get(n, -1) for n in store.relations.names])
    pre = TripleStore(np.stack([t[keep, 0], remap[t[keep, 1]], t[keep, 2]], 1),
                      store.entities, rel)
    task_t = t[~keep]
    used = np.unique(np.concatenate([task_t[:, 0], task_t[:, 2]]))
    ent = Vocabulary(store.entities.name(int(i)) for i in used)
    lookup = {int(old): new for new, old in enumerate(used)}
    rows = [(lookup[s], 0, lookup[o]) for s, _, o in task_t.tolist()]
    task = TripleStore(np.array(rows, dtype=np.int64), ent, Vocabulary([relation]))
    return pre, task


def planted_rule_kg(confidence: float, n_groundings: int = 12000, n_entities: int = 4000,
                    seed: int = 0) -> TripleStore:
    """``body(x, y)`` for ``n_groundings`` distinct pairs, each also carrying
    ``head(x, y)`` with probability ``confidence``, so the rule
    ``head(X,Y) <= body(X,Y)`` holds with that rate."""
    rng = np.random.default_rng(seed)
    if n_groundings > n_entities * (n_entities - 1):
        raise ValueError("too many groundings for the entity count")
    pairs: set = set()
    while len(pairs) < n_groundings:
        a, b = rng.integers(0, n_entities, size=(2, n_groundings))
        for x, y in zip(a.tolist(), b.tolist()):
            if x != y:
                pairs.add((x, y))
                if len(pairs) == n_groundings:
                    break
    pairs_a = np.array(sorted(pairs), dtype=np.int64)
    keep = rng.random(len(pairs_a)) < confidence
    body = np.column_stack([pairs_a[:, 0], np.zeros(len(pairs_a), dtype=np.int64), pairs_a[:, 1]])
    head = body[keep].copy()
    head[:, 1] = 1
    ent = Vocabulary(f"e{i}" for i in range(n_entities))
    return TripleStore(np.concatenate([body, head]), ent, Vocabulary(["body", "head"]))
