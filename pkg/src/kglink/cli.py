"""Command-line entry point: ``kglink <subcommand> [flags]``.

Configuration precedence, lowest to highest: ``--preset``, ``--config``,
``--set key=value`` (repeatable), then the dedicated ``--seed`` and
``--workers`` flags. Every command that writes files into ``--output`` also
writes ``run_manifest.json`` there.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import (TrainConfig, dumps_flat, parse_flat, parse_override, preset_text,
                     validate_flat)
from .errors import ConfigError, FormatError, KGLinkError
from .evaluation import evaluate_lp
from .kg import (SplitSet, Vocabulary, augment_symmetric, degree_stats,
                 degree_stats_csv, file_digest, make_splits, read_splits, read_triples,
                 write_splits, write_triples)

log = logging.getLogger("kglink")

MANIFEST = "run_manifest.json"
CACHE_ENV = "KGLINK_CACHE_DIR"


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    seeds: dict
    inputs: dict
    outputs: list = field(default_factory=list)
    version: str = __version__
    wall_clock_s: float = 0.0
    environment: dict = field(default_factory=lambda: {
        "python": platform.python_version(), "numpy": np.__version__,
        CACHE_ENV: os.environ.get(CACHE_ENV)})

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n",
                        encoding="utf-8")
        return path


class _Run:
    """Per-invocation bookkeeping for the manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.t0 = time.perf_counter()
        self.inputs: dict = {}
        self.outputs: list = []
        self.flat: dict = {}

    def digest(self, path) -> None:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            self.inputs[str(f)] = file_digest(f)

    def out_dir(self) -> Path:
        if not self.args.output:
            raise ConfigError([f"{self.args.command}: --output is required"])
        d = Path(self.args.output)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def wrote(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)

    def finish(self) -> None:
        if not self.outputs:
            return
        seeds = {"root": self.flat.get("seed", getattr(self.args, "seed", None))}
        RunManifest(self.args.command, self.argv, self.flat, seeds, self.inputs, self.outputs,
                    wall_clock_s=round(time.perf_counter() - self.t0, 3)).write(self.out_dir())


def locate(path: str) -> str:
    """``path`` itself if it exists, else the same relative path under
    ``$KGLINK_CACHE_DIR`` when that variable is set and the file is there."""
    cache = os.environ.get(CACHE_ENV)
    if Path(path).exists() or not cache or Path(path).is_absolute():
        return path
    cached = Path(cache) / path
    return str(cached) if cached.exists() else path


# -- config resolution ------------------------------------------------------------

def resolve_flat(args) -> dict:
    flat: dict = {}
    if getattr(args, "preset", None):
        flat.update(parse_flat(preset_text(args.preset)))
    if getattr(args, "config", None):
        flat.update(parse_flat(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        key, value = parse_override(item)
        flat[key] = value
    if getattr(args, "seed", None) is not None:
        flat["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        flat["workers"] = args.workers
    return flat


def resolve_config(args) -> tuple[TrainConfig, dict]:
    flat = resolve_flat(args)
    issues = validate_flat(flat)
    if issues:
        raise ConfigError(issues)
    return TrainConfig.from_flat(flat), flat


def _emit(text: str, args, run: _Run, name: str) -> None:
    if args.output:
        run.wrote(run.out_dir() / name).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _splits(run: _Run, path) -> SplitSet:
    run.digest(path)
    return read_splits(path)


def align_checkpoint(ck, entities: Vocabulary, relations: Vocabulary):
    """Checkpoint parameters re-indexed to the given vocabularies."""
    missing = [n for n in entities.names if n not in ck.entities]
    if missing:
        raise FormatError(f"{len(missing)} entities missing from the checkpoint, "
                          f"e.g. {missing[0]!r}")
    params = ck.params.copy()
    params.entity = ck.params.entity[[ck.entities.id(n) for n in entities.names]]
    names = list(relations.names)
    if params.reciprocal:
        from .kg import RECIPROCAL_SUFFIX
        names += [n + RECIPROCAL_SUFFIX for n in relations.names]
    lost = [n for n in names if n not in ck.relations]
    if lost:
        raise FormatError(f"relation {lost[0]!r} missing from the checkpoint")
    rows = [ck.relations.id(n) for n in names]
    params.relation = ck.params.relation[rows]
    if params.normals is not None:
        params.normals = ck.params.normals[rows]
    return params


# -- subcommands -----------------------------------------------------------------

def cmd_ingest(args, run):
    run.digest(args.input)
    store = read_triples(args.input)
    if args.symmetric:
        store = augment_symmetric(store, args.symmetric)
    out = run.out_dir()
    write_triples(store, run.wrote(out / "triples.tsv"))
    run.wrote(out / "entities.txt").write_text("\n".join(store.entities.names) + "\n")
    run.wrote(out / "relations.txt").write_text("\n".join(store.relations.names) + "\n")
    print(json.dumps({"triples": len(store), "entities": store.n_entities,
                      "relations": store.n_relations}))


def cmd_stats(args, run):
    run.digest(args.input)
    rows = degree_stats(read_triples(args.input))
    if args.format == "json":
        text = json.dumps([asdict(r) for r in rows], indent=2) + "\n"
    else:
        text = degree_stats_csv(rows)
    _emit(text, args, run, "degree_stats." + args.format)


def cmd_split(args, run):
    run.digest(args.input)
    flat = resolve_flat(args)
    run.flat = flat
    store = read_triples(args.input)
    seed = int(flat.get("seed", 0))
    splits = make_splits(store, tuple(args.ratios), seed=seed,
                         symmetric_relations=args.symmetric or ())
    out = run.out_dir()
    write_splits(splits, out)
    for name in ("train.tsv", "valid.tsv", "test.tsv", "split_manifest.json"):
        run.wrote(out / name)
    print(json.dumps({k: len(getattr(splits, k)) for k in ("train", "valid", "test")}))


def _save_params(params, splits, config, out, run, name="model.ckpt"):
    from .transfer import relation_vocab, save_checkpoint
    path = run.wrote(out / name)
    save_checkpoint(params, splits.entities, relation_vocab(params, splits.relations), config, path)
    return path


def cmd_train(args, run):
    from .training import fit
    config, flat = resolve_config(args)
    run.flat = config.to_flat()
    splits = _splits(run, args.splits)
    out = run.out_dir()
    log_path = run.wrote(out / "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        params, report = fit(splits, None, config,
                             on_epoch=lambda rec: (fh.write(json.dumps(asdict(rec)) + "\n"), fh.flush()))
    _save_params(params, splits, config, out, run)
    run.wrote(out / "config.toml").write_text(dumps_flat(flat), encoding="utf-8")
    summary = json.dumps(report.summary(), indent=2, sort_keys=True) + "\n"
    run.wrote(out / "train_summary.json").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)


def cmd_eval(args, run):
    from .transfer import load_checkpoint
    if not args.checkpoint:
        raise ConfigError(["eval: --checkpoint is required"])
    run.digest(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    run.flat = ck.config.to_flat()
    splits = _splits(run, args.splits)
    params = align_checkpoint(ck, splits.entities, splits.relations)
    test = splits.valid if args.part == "valid" else splits.test
    report = evaluate_lp(params, test, splits)
    if args.format == "csv":
        _emit(report.to_csv(splits.train), args, run, "eval_report.csv")
    else:
        _emit(report.to_json(), args, run, "eval_report.json")


def cmd_hpo(args, run):
    from .hpo import SearchSpace, run_hpo
    flat = resolve_flat(args)
    run.flat = flat
    space = SearchSpace.from_flat(flat)
    splits = _splits(run, args.splits)
    out = run.out_dir()
    report = run_hpo(splits, None, space, n=args.trials, budget=args.budget,
                     seed=int(flat.get("seed", 0)), report_path=run.wrote(out / "trials.jsonl"))
    summary = report.summary()
    if report.best is not None:
        best = {k: v for k, v in report.best.config.items()}
        run.wrote(out / "best_config.toml").write_text(dumps_flat(best), encoding="utf-8")
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    run.wrote(out / "hpo_summary.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _rules_settings(flat: dict, args) -> dict:
    s = {"time_budget": 10.0, "max_length": 2, "threshold": 1.0, "min_confidence": 0.0,
         "aggregation": "max"}
    for key in s:
        if f"rules.{key}" in flat:
            s[key] = flat[f"rules.{key}"]
        value = getattr(args, key, None)
        if value is not None:
            s[key] = value
    return s


def cmd_rules_learn(args, run):
    from .rules import learn, write_rules
    flat = resolve_flat(args)
    settings = _rules_settings(flat, args)
    run.flat = {**flat, **{f"rules.{k}": v for k, v in settings.items()}}
    splits = _splits(run, args.splits)
    base = learn(splits.train, float(settings["time_budget"]), int(settings["max_length"]),
                 float(settings["threshold"]), workers=int(flat.get("workers", 1)),
                 min_confidence=float(settings["min_confidence"]), seed=int(flat.get("seed", 0)))
    out = run.out_dir()
    write_rules(base, run.wrote(out / "rules.tsv"), splits.entities, splits.relations)
    meta = json.dumps({**base.metadata, "n_rules": len(base)}, indent=2, sort_keys=True) + "\n"
    run.wrote(out / "rules_meta.json").write_text(meta, encoding="utf-8")
    sys.stdout.write(meta)


def cmd_rules_eval(args, run):
    from .rules import evaluate_rules, read_rules
    flat = resolve_flat(args)
    settings = _rules_settings(flat, args)
    splits = _splits(run, args.splits)
    run.digest(args.rules)
    base = read_rules(args.rules, splits.entities, splits.relations)
    report = evaluate_rules(base, splits.test, splits, aggregation=settings["aggregation"])
    if args.format == "csv":
        _emit(report.to_csv(splits.train), args, run, "rules_eval.csv")
    else:
        _emit(report.to_json(), args, run, "rules_eval.json")


def cmd_export(args, run):
    from .transfer import checkpoint_bytes, load_checkpoint
    if not args.checkpoint:
        raise ConfigError(["export: --checkpoint is required"])
    run.digest(args.checkpoint)
    ck = load_checkpoint(args.checkpoint)
    run.flat = ck.config.to_flat()
    out = run.out_dir()
    for name, vocab, table in (("entity", ck.entities, ck.params.entity),
                               ("relation", ck.relations, ck.params.relation)):
        path = run.wrote(out / f"{name}_embeddings.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            for label, row in zip(vocab.names, table):
                fh.write(label + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    if args.float32:
        data = checkpoint_bytes(ck.params, ck.entities, ck.relations, ck.config, float32=True)
        run.wrote(out / "model.f32.ckpt").write_bytes(data)


def cmd_transfer_lp(args, run):
    from .transfer import downstream_lp, load_checkpoint
    config, flat = resolve_config(args)
    splits = _splits(run, args.splits)
    warm = None
    if args.checkpoint:
        run.digest(args.checkpoint)
        warm = load_checkpoint(args.checkpoint)
        if config.embedding_size != warm.d:
            log.warning("embedding size set to the checkpoint's d=%d", warm.d)
            config = config.replace(embedding_size=warm.d)
    run.flat = config.to_flat()
    params, report, evaluation = downstream_lp(splits, None, config, warm)
    out = run.out_dir()
    _save_params(params, splits, config, out, run)
    run.wrote(out / "train_log.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    result = {"train": report.summary(), "test": evaluation.to_dict()}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    run.wrote(out / "transfer_report.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_classify(args, run):
    from .transfer import ClassifierConfig, build_pair_dataset, load_checkpoint, train_classifier
    flat = resolve_flat(args)
    run.flat = flat
    run.digest(args.input)
    store = read_triples(args.input)
    keys = {"dim": int, "batch_size": int, "learning_rate": float, "mode": str, "epochs": int,
            "init_std": float}
    kwargs = {k: t(flat[f"classifier.{k}"]) for k, t in keys.items() if f"classifier.{k}" in flat}
    if "classifier.hidden" in flat:
        kwargs["hidden"] = tuple(int(x) for x in flat["classifier.hidden"])
    if args.mode:
        kwargs["mode"] = args.mode
    kwargs["seed"] = int(flat.get("seed", 0))
    config = ClassifierConfig(**kwargs)
    ratio = float(flat.get("classifier.negative_ratio", 1.0))
    dataset = build_pair_dataset(store, ratio, seed=config.seed)
    source = None
    if args.checkpoint:
        run.digest(args.checkpoint)
        source = load_checkpoint(args.checkpoint)
    _, report = train_classifier(dataset, source, config)
    text = json.dumps({"auroc": report.auroc, "auprc": report.auprc, "map": report.map,
                       "metadata": report.metadata}, indent=2, sort_keys=True, default=str) + "\n"
    if args.output:
        out = run.out_dir()
        run.wrote(out / "classification_report.json").write_text(text, encoding="utf-8")
        run.wrote(out / "pairs.tsv").write_text(dataset.to_tsv(), encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {
    "ingest": cmd_ingest, "stats": cmd_stats, "split": cmd_split, "train": cmd_train,
    "eval": cmd_eval, "hpo": cmd_hpo, "rules-learn": cmd_rules_learn,
    "rules-eval": cmd_rules_eval, "export": cmd_export, "transfer-lp": cmd_transfer_lp,
    "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kglink", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, *flags):
        p = sub.add_parser(name)
        common = {
            "input": lambda: p.add_argument("--input", required=True,
                                            help="triples file or directory of .tsv/.txt files"),
            "splits": lambda: p.add_argument("--splits", required=True,
                                             help="directory with train/valid/test.tsv"),
            "config": lambda: (p.add_argument("--config"), p.add_argument("--preset"),
                               p.add_argument("--set", action="append", metavar="KEY=VALUE")),
            "checkpoint": lambda: p.add_argument("--checkpoint"),
            "output": lambda: p.add_argument("--output"),
            "seed": lambda: p.add_argument("--seed", type=int),
            "workers": lambda: p.add_argument("--workers", type=int),
            "format": lambda: p.add_argument("--format", choices=("json", "csv"), default="json"),
        }
        for f in flags:
            common[f]()
        return p

    p = add("ingest", "input", "output")
    p.add_argument("--symmetric", nargs="+", metavar="RELATION")
    p = add("stats", "input", "output")
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p = add("split", "input", "output", "seed", "config")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--symmetric", nargs="+", metavar="RELATION")
    add("train", "splits", "config", "output", "seed", "workers")
    p = add("eval", "splits", "checkpoint", "output", "format")
    p.add_argument("--part", choices=("test", "valid"), default="test")
    p = add("hpo", "splits", "config", "output", "seed", "workers")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--budget", type=int, help="maximum epochs per trial")
    p = add("rules-learn", "splits", "config", "output", "seed", "workers")
    p.add_argument("--time-budget", dest="time_budget", type=float)
    p.add_argument("--max-length", dest="max_length", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--threshold", type=float, help="minimum support count")
    p.add_argument("--min-confidence", dest="min_confidence", type=float)
    p = add("rules-eval", "splits", "config", "output", "format")
    p.add_argument("--rules", required=True)
    p.add_argument("--aggregation", choices=("max", "noisy_or"))
    p = add("export", "checkpoint", "output")
    p.add_argument("--float32", action="store_true")
    add("transfer-lp", "splits", "checkpoint", "config", "output", "seed", "workers")
    p = add("classify", "input", "checkpoint", "config", "output", "seed")
    p.add_argument("--mode", choices=("scratch", "pretrained-frozen", "pretrained-finetuned"))
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for attr in ("input", "splits"):
        if getattr(args, attr, None):
            setattr(args, attr, locate(getattr(args, attr)))
    run = _Run(args, argv)
    try:
        COMMANDS[args.command](args, run)
        run.finish()
    except (KGLinkError, OSError, ValueError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, ConfigError):
            record["issues"] = exc.issues
        sys.stderr.write(json.dumps(record) + "\n")
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
