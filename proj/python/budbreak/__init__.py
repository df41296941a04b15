"""Budbreak prediction: synthetic data, recurrent multi-task models, evaluation."""

from ._core import (
    VARIANTS,
    BudbreakError,
    Checkpoint,
    Corpus,
    DataError,
    Season,
    build_labels,
    cli,
    day_error_summary,
    gradcheck,
    load_checkpoint,
    load_corpus,
    oracle_budbreak,
    predict_budbreak_day,
    write_synthetic,
)

__all__ = [
    "VARIANTS",
    "BudbreakError",
    "Checkpoint",
    "Corpus",
    "DataError",
    "Season",
    "build_labels",
    "cli",
    "day_error_summary",
    "gradcheck",
    "load_checkpoint",
    "load_corpus",
    "oracle_budbreak",
    "predict_budbreak_day",
    "write_synthetic",
]
