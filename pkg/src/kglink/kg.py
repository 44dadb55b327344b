"""Triple stores: ingestion, symmetric augmentation, splitting, reciprocal
relations and node-degree statistics."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError

RECIPROCAL_SUFFIX = "_reciprocal"


class Vocabulary:
    """Bidirectional mapping between string identifiers and dense ids,
    assigned in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: object) -> bool:
        return name in self._ids

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._names == other._names

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} names)"

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown identifier {name!r}") from None

    def get(self, name: str, default=None):
        return self._ids.get(name, default)

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)


class TripleStore:
    """Immutable, deduplicated set of ``(s, p, o)`` id triples.

    Parameters
    ----------
    triples : array-like of shape (n, 3)
        Integer ids. Duplicates are dropped, keeping first occurrences.
    entities, relations : Vocabulary
        Shared vocabularies. Several stores (e.g. the three splits) may
        reference the same vocabulary objects.
    n_base_relations : int, optional
        Set on stores produced by :func:`add_reciprocals`; the number of
        relations before the inverse relations were appended.
    """

    def __init__(self, triples, entities: Vocabulary, relations: Vocabulary,
                 n_base_relations: int | None = None):
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(arr):
            _, first = np.unique(arr, axis=0, return_index=True)
            arr = arr[np.sort(first)]
            if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= len(entities):
                raise IndexError("entity id out of vocabulary bounds")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= len(relations):
                raise IndexError("relation id out of vocabulary bounds")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.triples = arr
        self.entities = entities
        self.relations = relations
        self.n_base_relations = n_base_relations
        self._sp: dict | None = None
        self._po: dict | None = None
        self._p: dict | None = None

    @property
    def is_reciprocal(self) -> bool:
        return self.n_base_relations is not None

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return (tuple(int(x) for x in t) for t in self.triples)

    def __contains__(self, triple) -> bool:
        s, p, o = triple
        return o in self.objects(s, p)

    def __repr__(self) -> str:
        return (f"TripleStore({len(self)} triples, {self.n_entities} entities, "
                f"{self.n_relations} relations)")

    def _build(self):
        sp: dict[tuple[int, int], set[int]] = {}
        po: dict[tuple[int, int], set[int]] = {}
        by_p: dict[int, list[int]] = {}
        for i, (s, p, o) in enumerate(self.triples.tolist()):
            sp.setdefault((s, p), set()).add(o)
            po.setdefault((p, o), set()).add(s)
            by_p.setdefault(p, []).append(i)
        self._sp, self._po = sp, po
        self._p = {p: np.asarray(v, dtype=np.int64) for p, v in by_p.items()}

    def objects(self, s: int, p: int) -> set[int]:
        """Objects ``o`` with ``(s, p, o)`` in the store."""
        if self._sp is None:
            self._build()
        return self._sp.get((s, p), set())

    def subjects(self, p: int, o: int) -> set[int]:
        if self._po is None:
            self._build()
        return self._po.get((p, o), set())

    def with_relation(self, p: int) -> np.ndarray:
        """Rows of ``triples`` having relation ``p``."""
        if self._p is None:
            self._build()
        idx = self._p.get(p)
        if idx is None:
            return np.empty((0, 3), dtype=np.int64)
        return self.triples[idx]

    def names(self) -> list[tuple[str, str, str]]:
        e, r = self.entities.name, self.relations.name
        return [(e(s), r(p), e(o)) for s, p, o in self.triples.tolist()]

    def subset(self, rows: np.ndarray) -> "TripleStore":
        return TripleStore(self.triples[rows], self.entities, self.relations,
                           self.n_base_relations)

    def with_triples(self, triples) -> "TripleStore":
        return TripleStore(triples, self.entities, self.relations,
                           self.n_base_relations)


@dataclass(frozen=True)
class SplitSet:
    """Disjoint train/valid/test views over one vocabulary."""

    train: TripleStore
    valid: TripleStore
    test: TripleStore
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    indices: dict = field(default_factory=dict, compare=False)
    seed: int | None = None

    @property
    def entities(self) -> Vocabulary:
        return self.train.entities

    @property
    def relations(self) -> Vocabulary:
        return self.train.relations

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train.triples, self.valid.triples,
                               self.test.triples])

    def known(self) -> TripleStore:
        """All triples of all three splits, for filtered evaluation."""
        return TripleStore(self.all_triples(), self.entities, self.relations)


def _parse_lines(lines: Iterable[str], entities: Vocabulary,
                 relations: Vocabulary, source: str = "<input>") -> list[tuple[int, int, int]]:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"{source}:{lineno}: expected 3 tab-separated fields, "
                             f"got {len(fields)}", line=lineno)
        s, p, o = fields
        rows.append((entities.add(s), relations.add(p), entities.add(o)))
    return rows


def ingest_triples(source, entities: Vocabulary | None = None,
                   relations: Vocabulary | None = None) -> TripleStore:
    """Parse tab-separated ``s<TAB>p<TAB>o`` lines into a store.

    ``source`` may be a string of text, an iterable of lines or an open
    file. Passing existing vocabularies extends them in place, which is how
    the three split files end up sharing ids.
    """
    entities = Vocabulary() if entities is None else entities
    relations = Vocabulary() if relations is None else relations
    if isinstance(source, str):
        source = io.StringIO(source)
    name = getattr(source, "name", "<input>")
    rows = _parse_lines(source, entities, relations, str(name))
    return TripleStore(rows, entities, relations)


def read_triples(path, entities: Vocabulary | None = None,
                 relations: Vocabulary | None = None) -> TripleStore:
    """Read a TSV file, or every ``*.tsv``/``*.txt`` file of a directory in
    sorted order, into one store."""
    path = Path(path)
    entities = Vocabulary() if entities is None else entities
    relations = Vocabulary() if relations is None else relations
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix in (".tsv", ".txt") and p.is_file())
    else:
        files = [path]
    rows: list[tuple[int, int, int]] = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            rows.extend(_parse_lines(fh, entities, relations, str(f)))
    return TripleStore(rows, entities, relations)


def write_triples(store: TripleStore, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, p, o in store.names():
            fh.write(f"{s}\t{p}\t{o}\n")


def serialize_triples(store: TripleStore) -> str:
    return "".join(f"{s}\t{p}\t{o}\n" for s, p, o in store.names())


def augment_symmetric(store: TripleStore, symmetric_relations: Sequence[str]) -> TripleStore:
    """Add ``(o, p, s)`` for every ``(s, p, o)`` whose relation is listed."""
    ids = []
    for name in symmetric_relations:
        if name not in store.relations:
            raise ConfigError([f"symmetric relation {name!r} not in vocabulary"])
        ids.append(store.relations.id(name))
    t = store.triples
    mask = np.isin(t[:, 1], ids)
    rev = t[mask][:, [2, 1, 0]]
    return store.with_triples(np.concatenate([t, rev]))


def _split_units(store: TripleStore, symmetric_ids: Sequence[int]) -> list[np.ndarray]:
    # A unit is one triple, or a triple plus its reverse for symmetric relations.
    units = []
    seen = set()
    sym = set(symmetric_ids)
    index = {t: i for i, t in enumerate(map(tuple, store.triples.tolist()))}
    for i, (s, p, o) in enumerate(store.triples.tolist()):
        if i in seen:
            continue
        seen.add(i)
        j = index.get((o, p, s)) if p in sym else None
        if j is not None and j not in seen:
            seen.add(j)
            units.append(np.array([i, j]))
        else:
            units.append(np.array([i]))
    return units


def make_splits(store: TripleStore, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                symmetric_relations: Sequence[str] = ()) -> SplitSet:
    """Shuffle and partition a store into train/valid/test.

    Valid and test sizes are ``floor(ratio * n)``; the remainder goes to
    train. Triples of a listed symmetric relation are kept in the same split
    as their reverse, so sizes may undershoot by one when a pair does not
    fit.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError([f"split ratios must be three positive numbers summing "
                           f"to 1, got {ratios}"])
    n = len(store)
    if n == 0:
        raise ConfigError(["cannot split an empty store"])
    n_valid = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    rng = np.random.default_rng(seed)
    sym_ids = [store.relations.id(r) for r in symmetric_relations if r in store.relations]
    if sym_ids:
        units = _split_units(store, sym_ids)
        order = rng.permutation(len(units))
        test_idx, valid_idx, train_idx = [], [], []
        n_t = n_v = 0
        for u in order:
            unit = units[u]
            if n_t + len(unit) <= n_test:
                test_idx.extend(unit)
                n_t += len(unit)
            elif n_v + len(unit) <= n_valid:
                valid_idx.extend(unit)
                n_v += len(unit)
            else:
                train_idx.extend(unit)
        test_idx, valid_idx, train_idx = (np.sort(np.asarray(x, dtype=np.int64))
                                          for x in (test_idx, valid_idx, train_idx))
    else:
        perm = rng.permutation(n)
        test_idx = np.sort(perm[:n_test])
        valid_idx = np.sort(perm[n_test:n_test + n_valid])
        train_idx = np.sort(perm[n_test + n_valid:])
    return SplitSet(store.subset(train_idx), store.subset(valid_idx),
                    store.subset(test_idx), ratios,
                    {"train": train_idx, "valid": valid_idx, "test": test_idx}, seed)


def splits_from_stores(train: TripleStore, valid: TripleStore, test: TripleStore) -> SplitSet:
    if not (train.entities is valid.entities is test.entities):
        raise ValueError("splits must share one entity vocabulary")
    n = len(train) + len(valid) + len(test)
    ratios = tuple(len(x) / n for x in (train, valid, test)) if n else (0.8, 0.1, 0.1)
    return SplitSet(train, valid, test, ratios)


def read_splits(directory) -> SplitSet:
    """Read ``train.tsv``, ``valid.tsv`` and ``test.tsv`` with shared ids."""
    directory = Path(directory)
    ent, rel = Vocabulary(), Vocabulary()
    stores = [read_triples(directory / f"{name}.tsv", ent, rel)
              for name in ("train", "valid", "test")]
    # re-wrap so every store sees the final vocabulary sizes
    stores = [TripleStore(s.triples, ent, rel) for s in stores]
    return splits_from_stores(*stores)


def write_splits(splits: SplitSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_triples(getattr(splits, name), directory / f"{name}.tsv")
    if splits.indices:
        write_split_manifest(splits, directory / "split_manifest.json")


def write_split_manifest(splits: SplitSet, path) -> None:
    manifest = {"ratios": list(splits.ratios), "seed": splits.seed}
    for name in ("train", "valid", "test"):
        manifest[name] = [int(i) for i in splits.indices[name]]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)


def add_reciprocals(train: TripleStore) -> TripleStore:
    """Append an inverse relation ``p + |R|`` and the triple ``(o, p_inv, s)``
    for every ``(s, p, o)``."""
    if train.is_reciprocal:
        raise ValueError("store already contains reciprocal relations")
    n_rel = train.n_relations
    rel = Vocabulary(train.relations.names
                     + [name + RECIPROCAL_SUFFIX for name in train.relations.names])
    t = train.triples
    inv = np.stack([t[:, 2], t[:, 1] + n_rel, t[:, 0]], axis=1)
    return TripleStore(np.concatenate([t, inv]), train.entities, rel,
                       n_base_relations=n_rel)


@dataclass
class DegreeRow:
    relation: str
    mean: float
    median: float
    std: float
    max: int
    min: int


def _degree_row(name: str, triples: np.ndarray) -> DegreeRow:
    ends = np.concatenate([triples[:, 0], triples[:, 2]])
    _, counts = np.unique(ends, return_counts=True)
    return DegreeRow(name, float(counts.mean()), float(np.median(counts)),
                     float(counts.std()), int(counts.max()), int(counts.min()))


def degree_stats(store: TripleStore) -> list[DegreeRow]:
    """Undirected node-degree summary: a ``Total`` row followed by one row
    per relation in vocabulary order. The std is the population std."""
    if len(store) == 0:
        return []
    rows = [_degree_row("Total", store.triples)]
    for p in range(store.n_relations):
        t = store.with_relation(p)
        if len(t):
            rows.append(_degree_row(store.relations.name(p), t))
    return rows


def degree_stats_csv(rows: Sequence[DegreeRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["relation", "mean", "median", "std", "max", "min"])
    for r in rows:
        writer.writerow([r.relation, f"{r.mean:.2f}", f"{r.median:g}", f"{r.std:.2f}",
                         r.max, r.min])
    return buf.getvalue()


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    path = Path(path)
    files = sorted(path.rglob("*")) if path.is_dir() else [path]
    for f in files:
        if f.is_file():
            h.update(os.fsencode(f.relative_to(path) if path.is_dir() else f.name))
            h.update(f.read_bytes())
    return h.hexdigest()
