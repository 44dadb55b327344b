"""Filtered link-prediction metrics and multiclass classification metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericError, UndefinedMetricError
from .kg import SplitSet, TripleStore
from .models import ModelParams, score_all_objects, score_all_subjects

DEFAULT_KS = (1, 3, 10)


@dataclass(frozen=True)
class RankRecord:
    triple: tuple[int, int, int]
    direction: str
    rank: float
    n_candidates: int


def filtered_candidates(query, known: TripleStore, answer: int) -> np.ndarray:
    """Entities allowed as candidates for ``(s, p, None)`` or ``(None, p, o)``.

    Every entity forming a known triple is removed except ``answer``.
    """
    s, p, o = query
    if (s is None) == (o is None):
        raise ValueError("query must leave exactly one of subject/object open")
    others = known.objects(s, p) if o is None else known.subjects(p, o)
    mask = np.ones(known.n_entities, dtype=bool)
    if others:
        mask[list(others)] = False
    mask[answer] = True
    return np.flatnonzero(mask)


def filtered_rank(scores, true_index: int) -> float:
    """Rank of ``scores[true_index]`` among ``scores`` (already filtered).

    Ties take the mean position: ``1 + #greater + #tied_others / 2``.
    """
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite score in ranking")
    t = scores[true_index]
    greater = int((scores > t).sum())
    tied = int((scores == t).sum()) - 1
    return 1.0 + greater + tied / 2.0


def _masked_ranks(scores: np.ndarray, answers: np.ndarray, filters: list) -> np.ndarray:
    """Vectorised filtered_rank over rows; ``filters[i]`` lists the known
    entities to drop from row ``i`` (the answer is retained)."""
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite score in ranking")
    b = scores.shape[0]
    rows = np.arange(b)
    t = scores[rows, answers][:, None]
    keep = np.ones_like(scores, dtype=bool)
    for i, drop in enumerate(filters):
        if drop:
            keep[i, list(drop)] = False
    keep[rows, answers] = True
    greater = ((scores > t) & keep).sum(1)
    tied = ((scores == t) & keep).sum(1) - 1
    return 1.0 + greater + tied / 2.0


def rank_triples(params: ModelParams, triples: np.ndarray, known: TripleStore,
                 batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Filtered head and tail ranks for each row of ``triples``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    head = np.empty(len(triples))
    tail = np.empty(len(triples))
    for start in range(0, len(triples), batch_size):
        b = triples[start:start + batch_size]
        s, p, o = b[:, 0], b[:, 1], b[:, 2]
        sl = slice(start, start + len(b))
        scores = np.atleast_2d(score_all_objects(params, s, p))
        tail[sl] = _masked_ranks(scores, o, [known.objects(int(x), int(y)) for x, y in zip(s, p)])
        scores = np.atleast_2d(score_all_subjects(params, p, o))
        head[sl] = _masked_ranks(scores, s, [known.subjects(int(y), int(z)) for y, z in zip(p, o)])
    return head, tail


def _summary(ranks: np.ndarray, ks) -> dict:
    if len(ranks) == 0:
        return {"mrr": 0.0, "hits": {str(k): 0.0 for k in ks}, "n": 0}
    recip = np.where(np.isfinite(ranks), 1.0 / ranks, 0.0)
    return {"mrr": float(recip.mean()),
            "hits": {str(k): float((ranks <= k).mean()) for k in ks},
            "n": int(len(ranks))}


@dataclass
class EvalReport:
    mrr: float
    hits: dict
    per_relation: dict
    per_direction: dict
    n_test: int
    convention: str = "single run"
    coverage: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.coverage is None:
            out.pop("coverage")
        if not self.extra:
            out.pop("extra")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self, train: TripleStore | None = None) -> str:
        """One row per relation: training frequency against the metrics."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ks = list(self.hits)
        w.writerow(["relation", "train_frequency", "n_queries", "mrr"] + [f"hits@{k}" for k in ks])
        for name, row in self.per_relation.items():
            freq = ""
            if train is not None and name in train.relations:
                freq = len(train.with_relation(train.relations.id(name)))
            w.writerow([name, freq, row["n"], f"{row['mrr']:.6f}"]
                       + [f"{row['hits'][k]:.6f}" for k in ks])
        return buf.getvalue()


def report_from_ranks(triples: np.ndarray, head: np.ndarray, tail: np.ndarray,
                      relations, ks=DEFAULT_KS, n_base_relations: int | None = None,
                      **kwargs) -> EvalReport:
    """Aggregate per-direction ranks; ``inf`` marks a query whose answer was
    never generated and contributes 0 to every metric."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    ks = tuple(sorted(ks))
    both = np.concatenate([head, tail])
    total = _summary(both, ks)
    per_relation = {}
    rel_ids = triples[:, 1]
    for p in sorted(set(rel_ids.tolist())):
        m = rel_ids == p
        per_relation[relations.name(p)] = _summary(np.concatenate([head[m], tail[m]]), ks)
    per_direction = {"head": _summary(head, ks), "tail": _summary(tail, ks)}
    return EvalReport(total["mrr"], total["hits"], per_relation, per_direction,
                      int(len(triples)), **kwargs)


def evaluate_lp(params: ModelParams, test: TripleStore, splits: SplitSet,
                ks=DEFAULT_KS, batch_size: int = 256) -> EvalReport:
    """Filtered MRR and HITS@k over both query directions of ``test``.

    Head queries use the reciprocal relation when the model has one.
    """
    known = splits.known()
    head, tail = rank_triples(params, test.triples, known, batch_size)
    return report_from_ranks(test.triples, head, tail, test.relations, ks)


def rank_records(params: ModelParams, test: TripleStore, splits: SplitSet) -> list[RankRecord]:
    known = splits.known()
    head, tail = rank_triples(params, test.triples, known)
    out = []
    for t, h, tl in zip(test.triples.tolist(), head, tail):
        s, p, o = t
        n_tail = len(filtered_candidates((s, p, None), known, o))
        n_head = len(filtered_candidates((None, p, o), known, s))
        out.append(RankRecord(tuple(t), "head", float(h), n_head))
        out.append(RankRecord(tuple(t), "tail", float(tl), n_tail))
    return out


# -- classification ---------------------------------------------------------

@dataclass
class ClassificationReport:
    auroc: float
    auprc: float
    map: float
    per_class: dict
    metadata: dict = field(default_factory=lambda: {
        "averaging": "macro one-vs-rest",
        "auroc": "trapezoidal",
        "auprc": "step-wise, interpolated precision max_{r' >= r} P(r')",
        "map": "step-wise average precision, raw precision",
    })

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _threshold_counts(scores: np.ndarray, positive: np.ndarray):
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # one point per distinct score: last index of each tie group
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return tp[last].astype(float), fp[last].astype(float)


def roc_auc(scores, positive) -> float:
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative examples")
    tp, fp = _threshold_counts(np.asarray(scores, dtype=float), positive)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def pr_curve(scores, positive):
    """Precision and recall at each distinct score threshold, descending."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall needs a positive example")
    tp, fp = _threshold_counts(np.asarray(scores, dtype=float), positive)
    return tp / (tp + fp), tp / n_pos


def average_precision(scores, positive) -> float:
    precision, recall = pr_curve(scores, positive)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_auc_interpolated(scores, positive) -> float:
    precision, recall = pr_curve(scores, positive)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * envelope))


def classification_metrics(probs, labels) -> ClassificationReport:
    """Macro one-vs-rest AUROC, AUPRC and MAP.

    ``probs`` is ``(n, n_classes)`` with rows summing to one; ``labels`` holds
    class indices. Classes without both positives and negatives in
    ``labels`` are left out of the macro averages.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError("probs must be (n, n_classes) aligned with labels")
    if not np.allclose(probs.sum(1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError("labels contain a single class")
    per_class = {}
    for c in range(probs.shape[1]):
        pos = labels == c
        if not pos.any() or pos.all():
            continue
        precision, recall = pr_curve(probs[:, c], pos)
        per_class[c] = {
            "auroc": roc_auc(probs[:, c], pos),
            "auprc": pr_auc_interpolated(probs[:, c], pos),
            "ap": average_precision(probs[:, c], pos),
            "precision": precision.tolist(),
            "recall": recall.tolist(),
        }
    mean = lambda key: float(np.mean([v[key] for v in per_class.values()]))
    return ClassificationReport(mean("auroc"), mean("auprc"), mean("ap"), per_class)
