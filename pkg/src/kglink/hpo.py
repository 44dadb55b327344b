"""Quasi-random hyperparameter search with a scrambled Sobol sequence."""

from __future__ import annotations

import fcntl
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy.stats import qmc

from .config import BATCH_SIZES, OPTIMIZERS, REGULARIZERS, TRAINING_TYPES, TrainConfig
from .errors import ConfigError, NumericError
from .evaluation import evaluate_lp
from .kg import SplitSet
from .models import INIT_FAMILIES, ModelKind
from .training import fit

log = logging.getLogger(__name__)

GENERATOR = f"scipy.stats.qmc.Sobol(scramble=True) scipy=={scipy.__version__}"


@dataclass(frozen=True)
class Dim:
    """One searched hyperparameter. ``scale`` is ``"choice"``, ``"linear"``,
    ``"log"`` or ``"int"``; ``when`` names a ``(key, values)`` condition."""

    key: str
    scale: str
    choices: tuple = ()
    low: float = 0.0
    high: float = 1.0
    when: tuple | None = None

    def map(self, u: float):
        if self.scale == "choice":
            return self.choices[min(int(math.floor(u * len(self.choices))), len(self.choices) - 1)]
        if self.scale == "int":
            span = int(self.high) - int(self.low) + 1
            return int(self.low) + min(int(math.floor(u * span)), span - 1)
        if self.scale == "log":
            lo, hi = math.log(self.low), math.log(self.high)
            return float(min(max(math.exp(lo + u * (hi - lo)), self.low), self.high))
        return float(self.low + u * (self.high - self.low))


def default_dims() -> list[Dim]:
    reg_on = ("regularization.type", ("L1", "F2", "N3"))
    return [
        Dim("embedding_size", "choice", (128, 256, 512, 1024)),
        Dim("training_type", "choice", TRAINING_TYPES),
        Dim("negsamp.neg_subjects", "int", low=1, high=100, when=("training_type", ("NegSamp",))),
        Dim("negsamp.neg_objects", "int", low=1, high=100, when=("training_type", ("NegSamp",))),
        Dim("reciprocal", "choice", (True, False)),
        Dim("optimizer.type", "choice", OPTIMIZERS),
        Dim("optimizer.batch_size", "choice", BATCH_SIZES),
        Dim("optimizer.learning_rate", "log", low=0.0003, high=1.0),
        Dim("optimizer.scheduler_patience", "int", low=0, high=10),
        Dim("regularization.type", "choice", REGULARIZERS),
        Dim("regularization.entity_weight", "log", low=1e-20, high=1e-1, when=reg_on),
        Dim("regularization.relation_weight", "log", low=1e-20, high=1e-1, when=reg_on),
        Dim("regularization.frequency_weighting", "choice", (True, False), when=reg_on),
        Dim("dropout.entity", "linear", low=-0.5, high=0.5),
        Dim("dropout.relation", "linear", low=-0.5, high=0.5),
        Dim("init.type", "choice", INIT_FAMILIES),
        Dim("init.normal_std", "log", low=0.00001, high=1.0, when=("init.type", ("Normal",))),
        Dim("init.uniform_lower_bound", "linear", low=-1.0, high=-0.00001,
            when=("init.type", ("Uniform",))),
    ]


@dataclass
class SearchSpace:
    dims: list = field(default_factory=default_dims)
    base: dict = field(default_factory=dict)  # fixed keys applied to every trial

    @classmethod
    def from_flat(cls, flat: dict) -> "SearchSpace":
        """Space from the config dialect. Plain schema keys are fixed for every
        trial; ``hpo.<key> = [..]`` narrows a searched dimension (choices for
        categoricals, ``[low, high]`` for ranges) and ``hpo.<key> = value``
        pins it. ``hpo.`` keys win over a plain key for the same name."""
        dims = {d.key: d for d in default_dims()}
        base = {}
        searched = {k[4:] for k in flat if k.startswith("hpo.")}
        for key, value in sorted(flat.items(), key=lambda kv: kv[0].startswith("hpo.")):
            if key in searched:
                continue
            if key.startswith("hpo."):
                name = key[4:]
                if name not in dims:
                    raise ConfigError([f"{key}: not a searchable hyperparameter"])
                d = dims[name]
                if not isinstance(value, list):
                    base[name] = value
                    del dims[name]
                elif d.scale == "choice":
                    dims[name] = Dim(d.key, d.scale, tuple(value), when=d.when)
                elif len(value) == 2:
                    dims[name] = Dim(d.key, d.scale, low=value[0], high=value[1], when=d.when)
                else:
                    raise ConfigError([f"{key}: expected [low, high]"])
            elif not key.startswith(("reported.", "rules.", "classifier.")):
                base[key] = value
                dims.pop(key, None)
        space = cls(list(dims.values()), base)
        space.check()
        return space

    def check(self) -> None:
        if not self.dims:
            raise ConfigError(["search space is empty"])
        issues = []
        for d in self.dims:
            if d.scale == "choice" and not d.choices:
                issues.append(f"hpo.{d.key}: no choices")
            if d.scale != "choice" and not d.low <= d.high:
                issues.append(f"hpo.{d.key}: low > high")
            if d.scale == "log" and d.low <= 0:
                issues.append(f"hpo.{d.key}: log scale needs positive bounds")
        if issues:
            raise ConfigError(issues)


def _point_to_config(space: SearchSpace, u: np.ndarray) -> tuple[TrainConfig, dict]:
    flat = dict(space.base)
    values = {d.key: d.map(float(x)) for d, x in zip(space.dims, u)}
    flat.update(values)
    for d in space.dims:
        if d.when is not None:
            key, allowed = d.when
            if flat.get(key) not in allowed:
                flat.pop(d.key, None)
    return TrainConfig.from_flat(flat), flat


def sample_configs(space: SearchSpace, n: int = 30, seed: int = 0) -> list[TrainConfig]:
    """``n`` configurations from a scrambled Sobol sequence; every dimension
    is sampled for every trial and conditional ones are then dropped."""
    return [c for c, _ in _sample(space, n, seed)]


def _sample(space: SearchSpace, n: int, seed: int):
    if n < 1:
        raise ConfigError(["hpo: need at least one trial"])
    space.check()
    sobol = qmc.Sobol(d=len(space.dims), scramble=True, seed=seed)
    points = sobol.random_base2(int(math.ceil(math.log2(n))))[:n]
    return [_point_to_config(space, u) for u in points]


@dataclass
class Trial:
    index: int
    config: dict
    status: str
    valid_mrr: float | None = None
    test_mrr: float | None = None
    epochs: int = 0
    best_epoch: int = 0
    seconds: float = 0.0
    notes: list = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


@dataclass
class HpoReport:
    trials: list
    generator: str = GENERATOR
    seed: int = 0

    @property
    def best_index(self) -> int | None:
        ok = [t for t in self.trials if t.status == "ok" and t.valid_mrr is not None]
        if not ok:
            return None
        return max(ok, key=lambda t: (t.valid_mrr, -t.index)).index

    @property
    def best(self) -> Trial | None:
        i = self.best_index
        return None if i is None else next(t for t in self.trials if t.index == i)

    def summary(self) -> dict:
        return {"generator": self.generator, "seed": self.seed, "n_trials": len(self.trials),
                "failed": sum(t.status != "ok" for t in self.trials), "best_index": self.best_index,
                "best_valid_mrr": self.best.valid_mrr if self.best else None}


def read_trials(path) -> list[Trial]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Trial(**json.loads(line)))
    return out


def _append(path, trial: Trial) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(trial.to_json() + "\n")
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def run_trial(index: int, splits: SplitSet, kind: ModelKind | None, config: TrainConfig,
              flat: dict) -> Trial:
    notes = []
    if flat.get("dropout.entity", 0) < 0 or flat.get("dropout.relation", 0) < 0:
        notes.append("negative dropout rate sampled; treated as 0")
    t0 = time.perf_counter()
    try:
        params, report = fit(splits, kind, config)
        test_mrr = evaluate_lp(params, splits.test, splits).mrr if len(splits.test) else None
        return Trial(index, flat, "ok", report.best_valid_mrr, test_mrr, len(report.epochs),
                     report.best_epoch, time.perf_counter() - t0, notes)
    except (NumericError, FloatingPointError) as exc:
        return Trial(index, flat, "failed", seconds=time.perf_counter() - t0, notes=notes,
                     error=f"{type(exc).__name__}: {exc}")


def run_hpo(splits: SplitSet, kind: ModelKind | None, space: SearchSpace, n: int = 30,
            budget: int | None = None, seed: int = 0, report_path=None) -> HpoReport:
    """Run ``n`` trials, selecting on validation MRR only.

    ``budget`` caps each trial's epochs. With ``report_path`` every finished
    trial is appended as one JSON line, and trials already present in the
    file are skipped, so an interrupted search resumes where it stopped.
    """
    samples = _sample(space, n, seed)
    done = {t.index: t for t in read_trials(report_path)} if report_path else {}
    trials = []
    for i, (config, flat) in enumerate(samples):
        if i in done:
            trials.append(done[i])
            continue
        if kind is not None:
            config = config.replace(model=kind.name, norm=kind.norm)
            flat = {**flat, "model.type": kind.name, "model.norm": kind.norm}
        if budget is not None:
            config = config.replace(max_epochs=min(config.max_epochs, budget))
            flat = {**flat, "max_epochs": config.max_epochs}
        log.info("hpo trial %d/%d", i + 1, n)
        trial = run_trial(i, splits, kind, config, flat)
        trials.append(trial)
        if report_path:
            _append(report_path, trial)
    return HpoReport(trials, seed=seed)
