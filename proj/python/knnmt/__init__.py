"""Nearest-neighbour augmented seq2seq toolkit."""

from ._knnmt import (
    BaseModel,
    Corpus,
    Datastore,
    Error,
    FormatError,
    InvalidArgument,
    Pipeline,
    StaleArtifact,
    TraceService,
    Vocab,
    corpus_bleu,
    corrupt_values,
    interpolate,
    knn_distribution,
    prune_margin,
    prune_redundant,
    toy_corpus,
)

__all__ = [
    "BaseModel",
    "Corpus",
    "Datastore",
    "Error",
    "FormatError",
    "InvalidArgument",
    "Pipeline",
    "StaleArtifact",
    "TraceService",
    "Vocab",
    "corpus_bleu",
    "corrupt_values",
    "interpolate",
    "knn_distribution",
    "prune_margin",
    "prune_redundant",
    "toy_corpus",
]
