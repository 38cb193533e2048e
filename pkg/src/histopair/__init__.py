"""Pipeline engine and evaluation harness for slide-to-caption pair generation."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    DatasetManifest,
    PairRecord,
    PatchRef,
    Route,
    SlideRecord,
    count_tokens,
    load_manifest,
    load_pairs,
    write_pairs,
)
from .extraction import CandidateSet, PipelineConfig  # noqa: F401
from .vectors import EmbeddingMatrix  # noqa: F401
