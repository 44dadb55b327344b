"""Training loop for embedding models: cross-entropy over 1vsAll or sampled
candidates, L_p regularisation, embedding dropout, sparse-row Adagrad/Adam
and a plateau learning-rate schedule on validation MRR."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .config import TrainConfig
from .errors import ConfigError, NumericError, TrainingDiverged
from .kg import SplitSet, TripleStore, add_reciprocals
from .models import (ModelKind, ModelParams, RowGrad, init_params, kernel, relation_row_grads,
                     renormalize_normals)

log = logging.getLogger(__name__)


def ce_loss(scores, true_index: int) -> float:
    """Negative log-softmax of ``scores`` at ``true_index``."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty score vector")
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores in cross-entropy")
    return float(logsumexp(scores) - scores[true_index])


def ce_rows(scores: np.ndarray, targets: np.ndarray):
    """Row-wise CE losses and d(sum of losses)/d(scores)."""
    rows = np.arange(len(scores))
    losses = logsumexp(scores, axis=1) - scores[rows, targets]
    grad = softmax(scores, axis=1)
    grad[rows, targets] -= 1.0
    return losses, grad


def sample_negatives(triple, k_s: int, k_o: int, n_entities: int, seed=None) -> np.ndarray:
    """``k_s`` subject-corrupted then ``k_o`` object-corrupted copies of
    ``triple``, replacement entities drawn uniformly. Known positives are
    not filtered out."""
    if n_entities < 2:
        raise ValueError("negative sampling needs at least 2 entities")
    if not (1 <= k_s <= 100 and 1 <= k_o <= 100):
        raise ConfigError([f"negative counts must lie in [1, 100], got {k_s}, {k_o}"])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _corrupt(np.asarray(triple, dtype=np.int64).reshape(1, 3), k_s, k_o, n_entities, rng)[0]


def _corrupt(batch: np.ndarray, k_s: int, k_o: int, n_entities: int, rng) -> np.ndarray:
    b = len(batch)
    out = np.repeat(batch[:, None, :], k_s + k_o, axis=1)
    out[:, :k_s, 0] = rng.integers(0, n_entities, size=(b, k_s))
    out[:, k_s:, 2] = rng.integers(0, n_entities, size=(b, k_o))
    return out


def dropout_mask(shape, rate: float, rng) -> np.ndarray | None:
    """Inverted-dropout multiplier, or None when ``rate <= 0`` (negative
    rates from the search space are treated as no dropout)."""
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(vector, rate: float, rng) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    mask = dropout_mask(vector.shape, rate, rng)
    return vector if mask is None else vector * mask


_REG_FUNCS = {
    "L1": (lambda x: np.abs(x), lambda x: np.sign(x)),
    "F2": (lambda x: x * x, lambda x: 2.0 * x),
    "N3": (lambda x: np.abs(x) ** 3, lambda x: 3.0 * x * np.abs(x)),
}


def _reg_rows(rows: np.ndarray, counts: np.ndarray | None):
    uniq, batch_counts = np.unique(rows, return_counts=True)
    if counts is None:
        return uniq, np.ones(len(uniq))
    return uniq, batch_counts / np.maximum(counts[uniq], 1)


def reg_penalty(params: ModelParams, config: TrainConfig, batch: np.ndarray,
                entity_counts: np.ndarray | None = None,
                relation_counts: np.ndarray | None = None, with_grads: bool = False):
    """L1 / F2 / N3 penalty over the embedding rows a batch touches.

    Each distinct row contributes once, scaled by its table weight; with
    frequency weighting a row is further scaled by its count in the batch
    over its count in the training set. Returns the penalty, or
    ``(penalty, grads)`` when ``with_grads``.
    """
    if config.regularizer == "None":
        return (0.0, {}) if with_grads else 0.0
    f, df = _REG_FUNCS[config.regularizer]
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    fw = config.frequency_weighting
    total = 0.0
    grads = {}
    for name, table, rows, weight, counts in (
            ("entity", params.entity, np.concatenate([batch[:, 0], batch[:, 2]]),
             config.entity_weight, entity_counts),
            ("relation", params.relation, batch[:, 1], config.relation_weight, relation_counts)):
        uniq, scale = _reg_rows(rows, counts if fw else None)
        x = table[uniq]
        coef = weight * scale
        total += float((coef * f(x).sum(1)).sum())
        if with_grads:
            grads[name] = RowGrad(uniq, coef[:, None] * df(x))
    return (total, grads) if with_grads else total


# -- optimisers ---------------------------------------------------------------

def merge_row_grads(parts, n_rows: int):
    """Sum gradient parts for one table into ``(rows, values)`` with unique
    rows, or a dense array when a part is already dense."""
    dense = [p for p in parts if isinstance(p, np.ndarray)]
    sparse = [p for p in parts if isinstance(p, RowGrad)]
    if dense:
        out = sum(dense[1:], dense[0].copy())
        for g in sparse:
            np.add.at(out, g.rows, g.values)
        return None, out
    rows = np.concatenate([g.rows for g in sparse])
    values = np.concatenate([g.values for g in sparse])
    uniq, inv = np.unique(rows, return_inverse=True)
    acc = np.zeros((len(uniq), values.shape[1]))
    np.add.at(acc, inv, values)
    return uniq, acc


class SparseOptimizer:
    """Adagrad or Adam that only touches rows with gradients.

    Adam keeps a global step count for bias correction and updates moment
    estimates lazily, per touched row.
    """

    def __init__(self, params: ModelParams, name: str, lr: float,
                 eps: float | None = None, betas=(0.9, 0.999)):
        self.params = params
        self.name = name
        self.lr = lr
        self.eps = eps if eps is not None else (1e-10 if name == "Adagrad" else 1e-8)
        self.betas = betas
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}
        for key, table in params.tables().items():
            if name == "Adagrad":
                self.state[key] = {"sum": np.zeros_like(table)}
            else:
                self.state[key] = {"m": np.zeros_like(table), "v": np.zeros_like(table)}

    def step(self, grads: dict) -> set:
        """Apply merged gradients ``{table: (rows | None, values)}``; returns
        the set of updated table names."""
        self.t += 1
        tables = self.params.tables()
        for key, (rows, g) in grads.items():
            table, st = tables[key], self.state[key]
            idx = slice(None) if rows is None else rows
            if self.name == "Adagrad":
                st["sum"][idx] += g * g
                table[idx] -= self.lr * g / (np.sqrt(st["sum"][idx]) + self.eps)
            else:
                b1, b2 = self.betas
                st["m"][idx] = b1 * st["m"][idx] + (1 - b1) * g
                st["v"][idx] = b2 * st["v"][idx] + (1 - b2) * g * g
                mhat = st["m"][idx] / (1 - b1 ** self.t)
                vhat = st["v"][idx] / (1 - b2 ** self.t)
                table[idx] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return set(grads)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once more than ``patience``
    consecutive validation checks fail to improve the best MRR."""

    def __init__(self, optimizer: SparseOptimizer, patience: int, factor: float = 0.95):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad = 0

    def step(self, metric: float) -> bool:
        if metric > self.best:
            self.best = metric
            self.bad = 0
            return False
        self.bad += 1
        if self.bad > self.patience:
            self.optimizer.lr *= self.factor
            self.bad = 0
            return True
        return False


# -- batch objective ------------------------------------------------------------

@dataclass
class BatchResult:
    loss: float
    grads: dict
    usage: dict


def _gather(params: ModelParams, s, p, config: TrainConfig, rng, train: bool):
    H = params.entity[s]
    R = params.rel_rows(p)
    mh = mr = None
    if train:
        mh = dropout_mask(H.shape, config.dropout_entity, rng)
        mr = dropout_mask((R.shape[0], params.rel_width), config.dropout_relation, rng)
        if mh is not None:
            H = H * mh
        if mr is not None:
            R = R.copy()
            R[:, :params.rel_width] *= mr
    return H, R, mh, mr


def _masked(g, mask):
    return g if mask is None else g * mask


def _rel_masked(params, dR, mr):
    if mr is None:
        return dR
    dR = dR.copy()
    dR[:, :params.rel_width] *= mr
    return dR


def batch_loss_and_grads(params: ModelParams, batch: np.ndarray, config: TrainConfig,
                         rng=None, entity_counts=None, relation_counts=None,
                         train: bool = True) -> BatchResult:
    """Mean cross-entropy over a batch plus the regulariser, with gradients
    for every touched table.

    ``batch`` holds training triples; with reciprocal relations it already
    contains the inverse triples, each answering one head query. Without
    them every triple contributes a tail and a head softmax term.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    k = kernel(params)
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    b = len(batch)
    s, p, o = batch[:, 0], batch[:, 1], batch[:, 2]
    parts: dict[str, list] = {}

    def add(name, g):
        parts.setdefault(name, []).append(g)

    def add_rel(rows, dR):
        for name, g in relation_row_grads(params, rows, dR).items():
            add(name, g)

    def add_dense(dense):
        for name, g in dense.items():
            add(name, g)

    loss = 0.0
    n_base = params.n_base_relations
    is_head = p >= n_base if params.reciprocal else np.zeros(b, dtype=bool)
    usage = {"tail": p[~is_head], "head": p[is_head]}
    if config.training_type == "1vsAll":
        H, R, mh, mr = _gather(params, s, p, config, rng, train)
        scores = k.objects(params, H, R, params.entity)
        losses, up = ce_rows(scores, o)
        loss += losses.sum() / b
        dH, dR, dE, dense = k.objects_grad(params, H, R, params.entity, up / b)
        add("entity", dE)
        add("entity", RowGrad(s, _masked(dH, mh)))
        add_rel(p, _rel_masked(params, dR, mr))
        add_dense(dense)
        if not params.reciprocal:
            T, R2, mt, mr2 = _gather(params, o, p, config, rng, train)
            scores = k.subjects(params, R2, T, params.entity)
            losses, up = ce_rows(scores, s)
            loss += losses.sum() / b
            dR2, dT, dE2, dense = k.subjects_grad(params, R2, T, params.entity, up / b)
            add("entity", dE2)
            add("entity", RowGrad(o, _masked(dT, mt)))
            add_rel(p, _rel_masked(params, dR2, mr2))
            add_dense(dense)
            usage["head"] = np.concatenate([usage["head"], p])
    else:
        ks, ko = config.neg_subjects, config.neg_objects
        cand = np.concatenate([batch[:, None, :],
                               _corrupt(batch, ks, ko, params.n_entities, rng)], axis=1)
        flat = cand.reshape(-1, 3)
        H, R, mh, mr = _gather(params, flat[:, 0], flat[:, 1], config, rng, train)
        T = params.entity[flat[:, 2]]
        scores = k.triple(params, H, R, T).reshape(b, -1)
        losses, up = ce_rows(scores, np.zeros(b, dtype=np.int64))
        loss += losses.sum() / b
        dH, dR, dT, dense = k.triple_grad(params, H, R, T, up.reshape(-1) / b)
        add("entity", RowGrad(flat[:, 0], _masked(dH, mh)))
        add("entity", RowGrad(flat[:, 2], dT))
        add_rel(flat[:, 1], _rel_masked(params, dR, mr))
        add_dense(dense)
    penalty, reg_grads = reg_penalty(params, config, batch, entity_counts, relation_counts,
                                     with_grads=True)
    loss += penalty
    for name, g in reg_grads.items():
        add(name, g)
    tables = params.tables()
    merged = {name: merge_row_grads(gs, tables[name].shape[0]) for name, gs in parts.items()}
    return BatchResult(float(loss), merged, usage)


# -- fit --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    valid_mrr: float | None = None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_mrr: float | None = None
    settings: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def valid_trace(self) -> list[tuple[int, float]]:
        return [(e.epoch, e.valid_mrr) for e in self.epochs if e.valid_mrr is not None]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.epochs)

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_valid_mrr": self.best_valid_mrr,
                "epochs_run": len(self.epochs), **self.settings}


def _frequencies(train: TripleStore, n_entities: int, n_relations: int):
    t = train.triples
    ent = np.bincount(np.concatenate([t[:, 0], t[:, 2]]), minlength=n_entities)
    rel = np.bincount(t[:, 1], minlength=n_relations)
    return ent, rel


def fit(splits: SplitSet, kind: ModelKind | None, config: TrainConfig,
        initial: ModelParams | None = None, on_epoch=None) -> tuple[ModelParams, TrainReport]:
    """Train on ``splits.train``, validating on ``splits.valid`` every
    ``config.valid_every`` epochs, and return the best-validation parameters.

    ``initial`` supplies starting parameters (warm start); otherwise they are
    drawn from ``config.init`` with ``config.seed``. ``on_epoch`` is called
    with each :class:`EpochRecord`.
    """
    from .evaluation import evaluate_lp

    kind = kind or config.kind
    if len(splits.train) == 0:
        raise ConfigError(["training split is empty"])
    n_rel = splits.train.n_relations
    n_ent = splits.train.n_entities
    train = add_reciprocals(splits.train) if config.reciprocal else splits.train
    if initial is None:
        params = init_params(kind, n_ent, train.n_relations, config.embedding_size, config.init,
                             seed=config.seed, reciprocal=config.reciprocal)
    else:
        params = initial.copy()
        if params.n_relations != train.n_relations or params.n_entities != n_ent:
            raise ConfigError(["initial parameters do not match the training vocabulary"])
    ent_counts, rel_counts = _frequencies(train, n_ent, train.n_relations)
    rng = np.random.default_rng([config.seed, 1])
    opt = SparseOptimizer(params, config.optimizer, config.learning_rate)
    sched = PlateauScheduler(opt, config.scheduler_patience, config.scheduler_factor)
    validate = len(splits.valid) > 0
    if not validate:
        log.warning("empty validation split: early stopping and LR schedule disabled")
    report = TrainReport(settings={
        "scheduler_factor": config.scheduler_factor, "valid_every": config.valid_every,
        "negsamp_filtered": False, "workers": config.workers, "kind": str(kind),
        "n_relations_base": n_rel})
    best = params.copy()
    best_mrr = -np.inf
    stale_checks = 0
    triples = train.triples
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(triples))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = triples[order[start:start + config.batch_size]]
            res = batch_loss_and_grads(params, batch, config, rng, ent_counts, rel_counts)
            if not np.isfinite(res.loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch "
                                       f"{start // config.batch_size}")
            opt.step(res.grads)
            if params.normals is not None and "normals" in res.grads:
                rows = res.grads["normals"][0]
                renormalize_normals(params, rows)
            total += res.loss * len(batch)
        rec = EpochRecord(epoch, total / len(triples), opt.lr, 0.0)
        if validate and (epoch % config.valid_every == 0 or epoch == config.max_epochs):
            mrr = evaluate_lp(params, splits.valid, splits).mrr
            rec.valid_mrr = mrr
            if mrr > best_mrr:
                best_mrr = mrr
                best = params.copy()
                report.best_epoch = epoch
                stale_checks = 0
            else:
                stale_checks += 1
            sched.step(mrr)
        rec.seconds = time.perf_counter() - t0
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if (validate and config.early_stopping_patience
                and stale_checks >= config.early_stopping_patience):
            break
    if not validate:
        best = params
        report.best_epoch = len(report.epochs)
    report.best_valid_mrr = float(best_mrr) if validate else None
    return best, report
