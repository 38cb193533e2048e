"""Shared fixtures: the canonical synthetic manifest used across suites."""

import numpy as np
import pytest

from histopair.backends import MockBackend
from histopair.corpus import DatasetManifest, SlideRecord
from histopair.vectors import EmbeddingMatrix, l2_normalize

SYNTH_FINDINGS = (
    "Moderately differentiated adenocarcinoma infiltrating the submucosa.",
    "Marked lymphocytic infiltrate at the tumor margin.",
    "No lymphovascular invasion identified.",
    "Adjacent mucosa shows low-grade dysplasia.",
)

SYNTH_ORGANS = (("slide-a", "lung"), ("slide-b", "colon"), ("slide-c", "kidney"))


def synthetic_slide(slide_id="slide-a", organ="lung", grid=10, findings=SYNTH_FINDINGS):
    return SlideRecord(slide_id, organ, grid, grid, 256, findings=tuple(findings))


def synthetic_manifest(grid=100):
    """Three 10k-patch slides with non-empty findings (grid=100)."""
    slides = [synthetic_slide(sid, organ, grid) for sid, organ in SYNTH_ORGANS]
    return DatasetManifest(schema_version="1", slides=slides)


def mock_patch_embeddings(slide, backend: MockBackend) -> EmbeddingMatrix:
    refs = list(slide.iter_patches())
    vecs = backend.embed_image([p.patch_id for p in refs], [p.uri for p in refs])
    m = EmbeddingMatrix(data=vecs, ids=[p.patch_id for p in refs], normalized=False)
    return l2_normalize(m)


@pytest.fixture
def mock_backend():
    return MockBackend(seed=0, d=64)
