"""Divide-and-conquer embedding-based retrieval."""

from ._core import (
    ConfigError,
    DivergedError,
    EmptyDatasetError,
    Dataset,
    Error,
    InputError,
    IntentHead,
    ParseError,
    PartitionedIndex,
    PipelineError,
    SchemaError,
    StaleArtifactError,
    QuotaPlan,
    SeqRecModel,
    Split,
    bce_loss,
    compute_quotas,
    filter_by_frequency,
    kmeans,
    leave_last_out_split,
    load_clusters,
    load_dataset,
    load_embeddings,
    load_intent,
    load_model,
    parse_movielens,
    run_pipeline,
    save_dataset,
    save_embeddings,
    score,
    skipgram_pairs,
)

__all__ = [name for name in dir() if not name.startswith("_")]
