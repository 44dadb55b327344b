"""Checkpoints, warm-started downstream link prediction and relation
classification over entity pairs."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, FormatError, SamplingExhausted, UndefinedMetricError
from .evaluation import ClassificationReport, EvalReport, classification_metrics, evaluate_lp
from .kg import SplitSet, TripleStore, Vocabulary
from .models import InitSpec, ModelKind, ModelParams, conve_shape, init_params
from .training import TrainReport, fit

log = logging.getLogger(__name__)

MAGIC = b"KGLCKPT\x00"
FORMAT_VERSION = 1
_TABLES = ("entity", "relation", "normals", "conv_filter", "conv_projection")


@dataclass
class Checkpoint:
    params: ModelParams
    entities: Vocabulary
    relations: Vocabulary
    config: TrainConfig
    version: int = FORMAT_VERSION

    @property
    def kind(self) -> ModelKind:
        return self.params.kind

    @property
    def d(self) -> int:
        return self.params.d


# -- binary layout --------------------------------------------------------------

def _pack_str(buf, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("checkpoint string is not UTF-8") from None


def checkpoint_bytes(params: ModelParams, entities: Vocabulary, relations: Vocabulary,
                     config: TrainConfig, float32: bool = False) -> bytes:
    if params.n_entities != len(entities):
        raise ValueError("entity table does not match the vocabulary")
    if params.n_relations != len(relations):
        raise ValueError("relation table does not match the vocabulary")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _pack_str(buf, params.kind.name)
    buf.write(struct.pack("<BIIBB", params.kind.norm, params.kind.conv_filters, params.d,
                          int(params.reciprocal), 4 if float32 else 8))
    for vocab in (entities, relations):
        buf.write(struct.pack("<I", len(vocab)))
        for name in vocab.names:
            _pack_str(buf, name)
    tables = params.tables()
    buf.write(struct.pack("<I", len(tables)))
    dtype = "<f4" if float32 else "<f8"
    for name, table in tables.items():
        _pack_str(buf, name)
        buf.write(struct.pack("<I", table.ndim))
        buf.write(struct.pack(f"<{table.ndim}Q", *table.shape))
        buf.write(np.ascontiguousarray(table, dtype=dtype).tobytes())
    _pack_str(buf, config.dumps())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    name = r.string()
    norm, filters, d, reciprocal, width = r.unpack("<BIIBB")
    if width not in (4, 8):
        raise FormatError(f"bad float width {width}")
    try:
        kind = ModelKind(name, norm, filters)
    except (ConfigError, ValueError):
        raise FormatError(f"unknown model kind {name!r}") from None
    vocabs = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        vocabs.append(Vocabulary(r.string() for _ in range(n)))
    (n_tables,) = r.unpack("<I")
    tables = {}
    for _ in range(n_tables):
        tname = r.string()
        if tname not in _TABLES:
            raise FormatError(f"unknown table {tname!r}")
        (ndim,) = r.unpack("<I")
        if ndim > 4:
            raise FormatError("bad table rank")
        shape = r.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * width)
        tables[tname] = np.frombuffer(raw, dtype="<f4" if width == 4 else "<f8") \
            .astype(np.float64).reshape(shape)
    try:
        from .config import load_config
        config = load_config(r.string())
    except ConfigError as exc:
        raise FormatError(f"embedded config invalid: {exc}") from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    if "entity" not in tables or "relation" not in tables:
        raise FormatError("checkpoint lacks entity or relation table")
    params = ModelParams(kind, d, tables["entity"], tables["relation"], tables.get("normals"),
                         tables.get("conv_filter"), tables.get("conv_projection"),
                         conve_shape(d) if kind.name == "ConvE" else None, bool(reciprocal))
    if params.n_entities != len(vocabs[0]) or params.n_relations != len(vocabs[1]):
        raise FormatError("table shapes disagree with vocabularies")
    return Checkpoint(params, vocabs[0], vocabs[1], config, version)


def save_checkpoint(params: ModelParams, entities: Vocabulary, relations: Vocabulary,
                    config: TrainConfig, path, float32: bool = False) -> None:
    """Write a checkpoint. ``relations`` must name every relation row,
    including reciprocal ones."""
    Path(path).write_bytes(checkpoint_bytes(params, entities, relations, config, float32))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def relation_vocab(params: ModelParams, relations: Vocabulary) -> Vocabulary:
    """Relation vocabulary covering every row of ``params``."""
    if params.n_relations == len(relations):
        return relations
    if params.reciprocal and params.n_relations == 2 * len(relations):
        from .kg import RECIPROCAL_SUFFIX
        return Vocabulary(relations.names + [n + RECIPROCAL_SUFFIX for n in relations.names])
    raise ValueError("relation vocabulary does not match the relation table")


# -- warm start -------------------------------------------------------------------

def entity_matches(source: Vocabulary, target: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """``(target_ids, source_ids)`` of entities sharing a string identifier."""
    pairs = [(i, source.id(n)) for i, n in enumerate(target.names) if n in source]
    if not pairs:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    t, s = zip(*pairs)
    return np.asarray(t, dtype=np.int64), np.asarray(s, dtype=np.int64)


def warm_start(pretrained: Checkpoint, target_store: TripleStore, kind: ModelKind, d: int,
               init: InitSpec, seed: int = 0, reciprocal: bool = False) -> ModelParams:
    """Fresh parameters for ``target_store`` whose entity rows are copied from
    ``pretrained`` wherever the entity identifier matches. Relations (and any
    non-entity tables) start from ``init``."""
    if pretrained.kind.name != kind.name:
        raise ConfigError([f"warm start: checkpoint holds {pretrained.kind.name}, "
                           f"target model is {kind.name}"])
    if pretrained.d != d:
        raise ConfigError([f"warm start: checkpoint d={pretrained.d}, requested d={d}"])
    n_rel = target_store.n_relations * (2 if reciprocal and not target_store.is_reciprocal else 1)
    params = init_params(kind, target_store.n_entities, n_rel, d, init, seed=seed,
                         reciprocal=reciprocal)
    dst, src = entity_matches(pretrained.entities, target_store.entities)
    params.entity[dst] = pretrained.params.entity[src]
    return params


def epochs_to_reach(report: TrainReport, target: float) -> int | None:
    """First validated epoch whose MRR reaches ``target``."""
    for epoch, mrr in report.valid_trace:
        if mrr >= target:
            return epoch
    return None


def downstream_lp(task_splits: SplitSet, kind: ModelKind | None, config: TrainConfig,
                  warm: Checkpoint | None = None) -> tuple[ModelParams, TrainReport, EvalReport]:
    """Train and test on a task KG, optionally warm-started from ``warm``."""
    kind = kind or config.kind
    initial = None
    copied = 0
    if warm is not None:
        initial = warm_start(warm, task_splits.train, kind, config.embedding_size, config.init,
                             seed=config.seed, reciprocal=config.reciprocal)
        copied = len(entity_matches(warm.entities, task_splits.entities)[0])
    params, report = fit(task_splits, kind, config, initial=initial)
    report.settings.update({"warm_start": warm is not None, "copied_entities": copied,
                            "epochs_to_best": report.best_epoch})
    return params, report, evaluate_lp(params, task_splits.test, task_splits)


# -- relation classification ------------------------------------------------------

NO_INTERACTION = "no_interaction"


@dataclass
class PairDataset:
    pairs: np.ndarray           # (n, 2) entity ids
    labels: np.ndarray          # (n,) class ids
    classes: list
    entities: Vocabulary
    split: dict                 # "train" / "valid" / "test" -> row indices
    negative_class: int = -1

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split[name]
        return self.pairs[idx], self.labels[idx]

    def to_tsv(self) -> str:
        return "".join(f"{self.entities.name(a)}\t{self.entities.name(b)}\t{self.classes[c]}\n"
                       for (a, b), c in zip(self.pairs.tolist(), self.labels.tolist()))


def build_pair_dataset(task_store: TripleStore, negative_ratio: float = 1.0, seed: int = 0,
                       subject_pool=None, object_pool=None, ratios=(0.8, 0.1, 0.1),
                       max_attempts: int | None = None) -> PairDataset:
    """Positives are the task triples as ``(s, o) -> relation``; negatives are
    pairs drawn from ``subject_pool x object_pool`` (by default the entities
    seen as subjects / objects) that are unrelated in both orientations,
    labelled with one extra "no interaction" class."""
    if len(task_store) == 0:
        raise ValueError("task store is empty")
    rng = np.random.default_rng(seed)
    t = task_store.triples
    subj = np.unique(t[:, 0]) if subject_pool is None else np.asarray(subject_pool, dtype=np.int64)
    obj = np.unique(t[:, 2]) if object_pool is None else np.asarray(object_pool, dtype=np.int64)
    linked = {(s, o) for s, _, o in t.tolist()}
    linked |= {(o, s) for s, o in linked}
    n_neg = int(round(negative_ratio * len(t)))
    attempts = max_attempts or 20 * n_neg + 1000
    negatives: list[tuple[int, int]] = []
    chosen: set = set()
    while len(negatives) < n_neg:
        if attempts <= 0:
            raise SamplingExhausted(f"found {len(negatives)} of {n_neg} unrelated pairs")
        batch = max(n_neg - len(negatives), 16)
        attempts -= batch
        ss = subj[rng.integers(len(subj), size=batch)]
        oo = obj[rng.integers(len(obj), size=batch)]
        for s, o in zip(ss.tolist(), oo.tolist()):
            if s == o or (s, o) in linked or (s, o) in chosen:
                continue
            chosen.add((s, o))
            negatives.append((s, o))
            if len(negatives) == n_neg:
                break
    n_rel = task_store.n_relations
    classes = list(task_store.relations.names) + [NO_INTERACTION]
    pairs = np.concatenate([t[:, [0, 2]], np.asarray(negatives, dtype=np.int64).reshape(-1, 2)])
    labels = np.concatenate([t[:, 1], np.full(len(negatives), n_rel, dtype=np.int64)])
    order = rng.permutation(len(pairs))
    n_valid = int(np.floor(ratios[1] * len(pairs)))
    n_test = int(np.floor(ratios[2] * len(pairs)))
    split = {"test": np.sort(order[:n_test]), "valid": np.sort(order[n_test:n_test + n_valid]),
             "train": np.sort(order[n_test + n_valid:])}
    return PairDataset(pairs, labels, classes, task_store.entities, split, n_rel)


MODES = ("scratch", "pretrained-frozen", "pretrained-finetuned")


@dataclass(frozen=True)
class ClassifierConfig:
    dim: int = 512
    batch_size: int = 512
    learning_rate: float = 1e-4
    mode: str = "scratch"
    hidden: tuple = ()          # empty: one hidden layer as wide as the embedding
    epochs: int = 50
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError([f"classifier.mode: {self.mode!r} not in {{{', '.join(MODES)}}}"])
        if self.dim < 1 or self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ConfigError(["classifier: dim, batch_size, learning_rate must be positive"])


class PairClassifier:
    """Concatenated pair embedding -> ReLU hidden layers -> softmax."""

    def __init__(self, embedding: np.ndarray, hidden: tuple, n_classes: int, rng):
        self.embedding = embedding
        sizes = [2 * embedding.shape[1], *hidden, n_classes]
        self.weights = []
        self.biases = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (a + b))
            self.weights.append(rng.uniform(-bound, bound, size=(a, b)))
            self.biases.append(np.zeros(b))

    def _forward(self, pairs):
        x = self.embedding[pairs].reshape(len(pairs), -1)
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if i < len(self.weights) - 1 else z)
        return acts

    def predict_proba(self, pairs) -> np.ndarray:
        logits = self._forward(np.asarray(pairs, dtype=np.int64))[-1]
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(1, keepdims=True)

    def loss_and_grads(self, pairs, labels):
        """Mean CE and gradients ``(dW list, db list, embedding RowGrad)``."""
        from .models import RowGrad
        pairs = np.asarray(pairs, dtype=np.int64)
        acts = self._forward(pairs)
        logits = acts[-1] - acts[-1].max(1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        n = len(pairs)
        loss = -float(logp[np.arange(n), labels].mean())
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        g /= n
        dws, dbs = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            dws.append(acts[i].T @ g)
            dbs.append(g.sum(0))
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        dws.reverse()
        dbs.reverse()
        w = self.embedding.shape[1]
        demb = RowGrad(pairs.reshape(-1), g.reshape(n, 2, w).reshape(-1, w))
        return loss, dws, dbs, demb


class _Adam:
    def __init__(self, arrays, lr):
        self.arrays = arrays
        self.lr = lr
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads, rows=None):
        """``rows[i]`` restricts array ``i``'s update to those rows."""
        self.t += 1
        for i, (a, g) in enumerate(zip(self.arrays, grads)):
            idx = slice(None) if rows is None or rows[i] is None else rows[i]
            self.m[i][idx] = 0.9 * self.m[i][idx] + 0.1 * g
            self.v[i][idx] = 0.999 * self.v[i][idx] + 0.001 * g * g
            mh = self.m[i][idx] / (1 - 0.9 ** self.t)
            vh = self.v[i][idx] / (1 - 0.999 ** self.t)
            a[idx] -= self.lr * mh / (np.sqrt(vh) + 1e-8)


def _classifier_embedding(dataset: PairDataset, source: Checkpoint | None,
                          config: ClassifierConfig, rng):
    n = len(dataset.entities)
    if config.mode == "scratch":
        return rng.normal(0.0, config.init_std, size=(n, config.dim)), 0
    if source is None:
        raise ConfigError([f"classifier mode {config.mode} needs a checkpoint"])
    width = source.params.entity.shape[1]
    emb = rng.normal(0.0, config.init_std, size=(n, width))
    dst, src = entity_matches(source.entities, dataset.entities)
    emb[dst] = source.params.entity[src]
    used = np.unique(dataset.pairs)
    unresolved = int(len(np.setdiff1d(used, dst)))
    if unresolved:
        log.warning("%d dataset entities missing from the checkpoint; fresh rows used", unresolved)
    return emb, unresolved


def train_classifier(dataset: PairDataset, embedding_source: Checkpoint | None,
                     config: ClassifierConfig) -> tuple[PairClassifier, ClassificationReport]:
    """Train on the dataset's train split, report on its test split."""
    if len(np.unique(dataset.labels)) < 2:
        raise UndefinedMetricError("dataset has a single class")
    rng = np.random.default_rng(config.seed)
    emb, unresolved = _classifier_embedding(dataset, embedding_source, config, rng)
    hidden = config.hidden or (emb.shape[1],)
    clf = PairClassifier(emb, tuple(hidden), len(dataset.classes), rng)
    train_emb = config.mode != "pretrained-frozen"
    arrays = clf.weights + clf.biases + ([clf.embedding] if train_emb else [])
    opt = _Adam(arrays, config.learning_rate)
    x, y = dataset.part("train")
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, dws, dbs, demb = clf.loss_and_grads(x[idx], y[idx])
            grads = dws + dbs
            rows = [None] * len(grads)
            if train_emb:
                uniq, inv = np.unique(demb.rows, return_inverse=True)
                acc = np.zeros((len(uniq), emb.shape[1]))
                np.add.at(acc, inv, demb.values)
                grads.append(acc)
                rows.append(uniq)
            opt.step(grads, rows)
            total += loss * len(idx)
        losses.append(total / max(len(x), 1))
    xt, yt = dataset.part("test")
    report = classification_metrics(clf.predict_proba(xt), yt)
    report.metadata.update({"mode": config.mode, "unresolved_entities": unresolved,
                            "hidden": list(hidden), "epochs": config.epochs,
                            "final_train_loss": losses[-1] if losses else None,
                            "classifier": asdict(config)})
    return clf, report
