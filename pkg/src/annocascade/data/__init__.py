"""Corpus handling: ingestion, statistics, label mining, splits, synthesis,
and balanced batch sampling."""

from .corpus import (
    AnnotatedImage,
    apply_splits,
    bilinear_resize,
    disease_key,
    ingest,
    read_pgm,
    save_corpus,
    save_splits,
    split_terms,
    split_words,
    write_pgm,
)
from .mining import LabelSpace, label_seed_token, mine_labels, pattern_key
from .sampler import BalancedSampler, Batch, BatchSpec, UniformSampler, batches
from .splits import by_split, split
from .stats import TermStats, format_stats_tsv, term_stats, write_stats_tsv
from .synth import (
    QUADRANTS,
    SEVERITIES,
    ArchetypeSpec,
    ContextMode,
    SynthSpec,
    make_archetypes,
    make_default_spec,
    synthesize,
)

__all__ = [
    "AnnotatedImage", "ArchetypeSpec", "BalancedSampler", "Batch", "BatchSpec",
    "ContextMode", "LabelSpace", "QUADRANTS", "SEVERITIES", "SynthSpec",
    "TermStats", "UniformSampler", "apply_splits", "batches", "bilinear_resize",
    "by_split", "disease_key", "format_stats_tsv", "ingest", "label_seed_token",
    "make_archetypes", "make_default_spec", "mine_labels", "pattern_key",
    "read_pgm", "save_corpus", "save_splits", "split", "split_terms",
    "split_words", "synthesize", "term_stats", "write_pgm", "write_stats_tsv",
]
