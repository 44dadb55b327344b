"""Quasi-random search and the command-line tool.

A handful of Sobol-sampled configurations is trained on a small graph and
the best one is picked on validation MRR. The same search is then run via
the ``kglink`` command, which writes a manifest next to its outputs.
"""

import json
import tempfile
from pathlib import Path

from kglink.cli import dispatch
from kglink.hpo import SearchSpace, run_hpo, sample_configs
from kglink.kg import make_splits, write_triples
from kglink.synthetic import clustered_kg

kg = clustered_kg(n_clusters=4, cluster_size=10, n_relations=3, out_degree=2, seed=0)
splits = make_splits(kg, seed=0)

# narrow the default space so each trial is quick
space = SearchSpace.from_flat({
    "hpo.embedding_size": [8, 16],
    "hpo.training_type": "1vsAll",
    "hpo.optimizer.batch_size": 128,
    "max_epochs": 10,
    "valid.every": 5,
})
for cfg in sample_configs(space, n=4, seed=0):
    print(cfg.model, cfg.embedding_size, cfg.optimizer, f"lr={cfg.learning_rate:.4f}",
          cfg.regularizer)

result = run_hpo(splits, None, space, n=4, seed=0)
print(json.dumps(result.summary(), indent=2))

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    write_triples(kg, tmp / "kg.tsv")
    dispatch(["split", "--input", str(tmp / "kg.tsv"), "--output", str(tmp / "splits"),
              "--seed", "0"])
    (tmp / "small.toml").write_text('embedding_size = 8\nmax_epochs = 6\nvalid.every = 2\n')
    dispatch(["train", "--splits", str(tmp / "splits"), "--config", str(tmp / "small.toml"),
              "--set", "optimizer.learning_rate=0.3", "--output", str(tmp / "run")])
    dispatch(["eval", "--splits", str(tmp / "splits"), "--checkpoint",
              str(tmp / "run" / "model.ckpt"), "--output", str(tmp / "eval")])
    print(sorted(p.name for p in (tmp / "run").iterdir()))
    manifest = json.loads((tmp / "run" / "run_manifest.json").read_text())
    print("manifest learning rate:", manifest["config"]["optimizer.learning_rate"])
    print((tmp / "eval" / "eval_report.json").read_text()[:200])
