"""Knowledge graph embedding, rule learning and transfer toolkit."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config, load_preset, preset_names, validate_config
from .errors import (ConfigError, FormatError, KGLinkError, NumericError, ParseError,
                     SamplingExhausted, TrainingDiverged, UndefinedMetricError)
from .evaluation import (ClassificationReport, EvalReport, classification_metrics, evaluate_lp,
                         filtered_candidates, filtered_rank)
from .kg import (SplitSet, TripleStore, Vocabulary, add_reciprocals, augment_symmetric,
                 degree_stats, ingest_triples, make_splits, read_splits, read_triples)
from .models import (InitSpec, ModelKind, ModelParams, init_params, score, score_all_objects,
                     score_all_subjects, score_gradients)
from .training import TrainReport, ce_loss, fit

__all__ = [
    "ClassificationReport", "ConfigError", "EvalReport", "FormatError", "InitSpec", "KGLinkError",
    "ModelKind", "ModelParams", "NumericError", "ParseError", "SamplingExhausted", "SplitSet",
    "TrainConfig", "TrainReport", "TrainingDiverged", "TripleStore", "UndefinedMetricError",
    "Vocabulary", "add_reciprocals", "augment_symmetric", "ce_loss", "classification_metrics",
    "degree_stats", "evaluate_lp", "filtered_candidates", "filtered_rank", "fit",
    "ingest_triples", "init_params", "load_config", "load_preset", "make_splits",
    "preset_names", "read_splits", "read_triples", "score", "score_all_objects",
    "score_all_subjects", "score_gradients", "validate_config",
]
