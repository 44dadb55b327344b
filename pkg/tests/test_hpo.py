import json
from collections import Counter

import numpy as np
import pytest

from kglink.config import TrainConfig, parse_flat
from kglink.errors import ConfigError
from kglink.hpo import (GENERATOR, Dim, HpoReport, SearchSpace, Trial, read_trials, run_hpo,
                        sample_configs)
from kglink.models import ModelKind

SMALL = """
model.type = "DistMult"
max_epochs = 4
valid.every = 2
hpo.embedding_size = [4, 8]
hpo.optimizer.batch_size = [128]
"""


def test_learning_rate_range_and_determinism():
    space = SearchSpace()
    a = sample_configs(space, 30, seed=4)
    b = sample_configs(space, 30, seed=4)
    assert a == b
    assert all(0.0003 <= c.learning_rate <= 1.0 for c in a)
    assert sample_configs(space, 30, seed=5) != a


def test_fuzz_configs_validate():
    configs = sample_configs(SearchSpace(), 10000, seed=0)
    assert len(configs) == 10000
    assert all(isinstance(c, TrainConfig) for c in configs)
    lrs = np.log([c.learning_rate for c in configs])
    # log-uniform: the median sits at the geometric midpoint of the range
    assert abs(np.median(lrs) - 0.5 * (np.log(0.0003) + np.log(1.0))) < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_categorical_projection_uniform(seed):
    configs = sample_configs(SearchSpace(), 30, seed=seed)
    for attr in ("batch_size", "embedding_size", "regularizer", "init_type"):
        counts = Counter(getattr(c, attr) for c in configs)
        assert len(counts) == 4
        assert all(abs(v - 30 / 4) <= 2 for v in counts.values()), (attr, counts)


def test_conditionals_masked():
    configs = sample_configs(SearchSpace(), 64, seed=1)
    for c in configs:
        if c.training_type == "1vsAll":
            assert (c.neg_subjects, c.neg_objects) == (1, 1)
        if c.regularizer == "None":
            assert c.entity_weight == TrainConfig().entity_weight


def test_dim_mapping():
    assert Dim("k", "choice", ("a", "b", "c", "d")).map(0.999999) == "d"
    assert Dim("k", "int", low=0, high=10).map(1.0) == 10
    assert Dim("k", "log", low=1e-4, high=1.0).map(0.5) == pytest.approx(1e-2)


def test_space_from_flat_and_errors():
    space = SearchSpace.from_flat(parse_flat(SMALL))
    keys = [d.key for d in space.dims]
    assert "optimizer.batch_size" in keys and space.base["max_epochs"] == 4
    for c in sample_configs(space, 8):
        assert c.embedding_size in (4, 8) and c.model == "DistMult"
    with pytest.raises(ConfigError):
        SearchSpace.from_flat({"hpo.nonsense": [1, 2]})
    with pytest.raises(ConfigError):
        sample_configs(SearchSpace(dims=[]), 3)
    with pytest.raises(ConfigError):
        sample_configs(SearchSpace(), 0)


def _space():
    return SearchSpace.from_flat(parse_flat(SMALL + 'hpo.training_type = "1vsAll"\n'))


def test_run_hpo_selects_on_valid(tiny_splits, tmp_path):
    path = tmp_path / "trials.jsonl"
    report = run_hpo(tiny_splits, None, _space(), n=3, seed=0, report_path=path)
    assert len(report.trials) == 3
    ok = [t for t in report.trials if t.status == "ok"]
    assert report.best.valid_mrr == max(t.valid_mrr for t in ok)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["index"] == 0
    assert report.summary()["generator"] == GENERATOR


def test_resume_runs_only_missing(tiny_splits, tmp_path, monkeypatch):
    path = tmp_path / "trials.jsonl"
    full = run_hpo(tiny_splits, None, _space(), n=3, seed=0)
    for t in full.trials[:2]:
        path.write_text(path.read_text() + t.to_json() + "\n" if path.exists() else t.to_json() + "\n")
    import kglink.hpo as hpo
    calls = []
    real = hpo.run_trial
    monkeypatch.setattr(hpo, "run_trial", lambda i, *a: calls.append(i) or real(i, *a))
    resumed = run_hpo(tiny_splits, None, _space(), n=3, seed=0, report_path=path)
    assert calls == [2]
    assert len(read_trials(path)) == 3
    assert [t.valid_mrr for t in resumed.trials] == [t.valid_mrr for t in full.trials]


def test_failed_trial_excluded(tiny_splits, monkeypatch):
    import kglink.hpo as hpo
    from kglink.errors import TrainingDiverged
    real = hpo.fit

    def fake_fit(splits, kind, config, **kw):
        if config.embedding_size == 8:
            raise TrainingDiverged("forced non-finite loss")
        return real(splits, kind, config, **kw)

    monkeypatch.setattr(hpo, "fit", fake_fit)
    report = run_hpo(tiny_splits, None, _space(), n=4, seed=0)
    failed = [t for t in report.trials if t.status == "failed"]
    assert failed and all("forced" in t.error for t in failed)
    assert report.best_index not in {t.index for t in failed}


def test_selection_ignores_test_split(tiny_splits):
    from kglink.kg import SplitSet
    shuffled = SplitSet(tiny_splits.train, tiny_splits.valid,
                        tiny_splits.test.subset(np.arange(len(tiny_splits.test))[::-1][:3]))
    a = run_hpo(tiny_splits, ModelKind("DistMult"), _space(), n=3)
    b = run_hpo(shuffled, ModelKind("DistMult"), _space(), n=3)
    assert a.best_index == b.best_index


def test_best_none_when_all_failed():
    assert HpoReport([Trial(0, {}, "failed")]).best is None
