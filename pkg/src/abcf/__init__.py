"""Aggregate Bayesian causal forests for hierarchically aggregated data."""

from .data import (
    AggregateDataset,
    AggregateUnit,
    DatasetError,
    FitConfig,
    ModelKind,
    PosteriorDraws,
    load_dataset,
    summarize_dataset,
    write_dataset,
)

__version__ = "0.1.0"
