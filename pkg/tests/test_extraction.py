import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histopair.agents import AgentClient
from histopair.backends import MockBackend
from histopair.corpus import Route, SlideRecord
from histopair.errors import AlreadyDeduped, EmptyPrompts, InputError
from histopair.extraction import (
    CandidateEntry,
    CandidateSet,
    PipelineConfig,
    build_candidate_set,
    drop_probability,
    probabilistic_dedup,
    retrieve_by_prompts,
)
from histopair.vectors import EmbeddingMatrix, l2_normalize

from conftest import mock_patch_embeddings, synthetic_slide


class FixedEmbedder:
    """Test double returning preassigned vectors per prompt string."""

    name = "fixed"

    def __init__(self, mapping, attrs=None):
        self.mapping = {k: np.asarray(v, dtype=np.float32) for k, v in mapping.items()}
        self.attrs = attrs or []

    def embed_text(self, texts):
        return np.stack([self.mapping[t] for t in texts])

    def attribute_prompts(self, organ, n):
        return self.attrs[:n]


def unit_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x.astype(np.float32)


class TestConfig:
    def test_defaults_arithmetic(self):
        cfg = PipelineConfig()
        assert cfg.target_total == cfg.cluster_sample_total + 2 * cfg.top_k_per_category
        assert cfg.dedup_threshold == 0.88
        assert cfg.token_budget == 77
        assert cfg.n_attributes == 20

    def test_threshold_bounds(self):
        with pytest.raises(InputError):
            PipelineConfig(dedup_threshold=1.0)
        with pytest.raises(InputError):
            PipelineConfig(dedup_threshold=0.0)

    def test_digest_stable_and_sensitive(self):
        assert PipelineConfig().digest() == PipelineConfig().digest()
        assert PipelineConfig().digest() != PipelineConfig(seed=1).digest()


class TestRetrieveByPrompts:
    def test_exactly_64_under_defaults(self, mock_backend):
        slide = synthetic_slide(grid=10)  # 100 patches
        m = mock_patch_embeddings(slide, mock_backend)
        refs = list(slide.iter_patches())
        out = retrieve_by_prompts(["one prompt"], Route.REPORT_PROMPT, m,
                                  mock_backend, PipelineConfig(), refs)
        assert len(out) == 64

    def test_self_match_ranks_first(self):
        slide = synthetic_slide(grid=10)
        refs = list(slide.iter_patches())
        x = unit_rows(100, 16, 3)
        m = EmbeddingMatrix(data=x, ids=[p.patch_id for p in refs], normalized=True)
        embedder = FixedEmbedder({"the prompt": x[7]})
        out = retrieve_by_prompts(["the prompt"], Route.REPORT_PROMPT, m,
                                  embedder, PipelineConfig(), refs)
        assert out[0][0] == refs[7]
        assert out[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_matches_max_aggregate_sort_oracle(self, mock_backend):
        slide = synthetic_slide(grid=12)  # 144 patches
        m = mock_patch_embeddings(slide, mock_backend)
        refs = list(slide.iter_patches())
        prompts = ["alpha", "beta", "gamma"]
        cfg = PipelineConfig(top_k_per_category=20)
        got = retrieve_by_prompts(prompts, Route.REPORT_PROMPT, m,
                                  mock_backend, cfg, refs)
        vecs = mock_backend.embed_text(prompts).astype(np.float64)
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs.astype(np.float32)
        agg = []
        for i in range(m.n):
            best = max(float(np.clip(m.data[i] @ v, -1, 1)) for v in vecs)
            agg.append(best)
        oracle = sorted(range(m.n), key=lambda i: (-agg[i], i))[:20]
        assert [r.patch_id for r, _ in got] == [refs[i].patch_id for i in oracle]

    def test_empty_prompts(self, mock_backend):
        slide = synthetic_slide(grid=4)
        m = mock_patch_embeddings(slide, mock_backend)
        with pytest.raises(EmptyPrompts):
            retrieve_by_prompts([], Route.REPORT_PROMPT, m, mock_backend,
                                PipelineConfig(), list(slide.iter_patches()))


class TestBuildCandidateSet:
    def test_census_384_on_10k_patch_slide(self, mock_backend):
        slide = synthetic_slide(grid=100)
        m = mock_patch_embeddings(slide, mock_backend)
        client = AgentClient(mock_backend)
        cand = build_candidate_set(slide, m, client, PipelineConfig(seed=0))
        census = cand.route_census()
        assert len(cand.entries) == 384
        assert census[Route.REPORT_PROMPT] == 64
        assert census[Route.ATTRIBUTE_PROMPT] == 64
        assert census[Route.CLUSTER] == 256

    def test_small_slide_selects_everything(self, mock_backend):
        slide = synthetic_slide(slide_id="small", grid=17)  # 289 patches < 384
        m = mock_patch_embeddings(slide, mock_backend)
        client = AgentClient(mock_backend)
        cand = build_candidate_set(slide, m, client, PipelineConfig(seed=0))
        ids = [e.patch.patch_id for e in cand.entries]
        assert len(ids) == 289
        assert len(set(ids)) == 289

    def test_empty_findings_drops_report_route(self, mock_backend):
        slide = synthetic_slide(slide_id="nofind", grid=30, findings=())
        m = mock_patch_embeddings(slide, mock_backend)
        client = AgentClient(mock_backend)
        cand = build_candidate_set(slide, m, client, PipelineConfig(seed=0))
        census = cand.route_census()
        assert census[Route.REPORT_PROMPT] == 0
        assert len(cand.entries) <= 64 + 256

    def test_route_priority_merge(self):
        slide = synthetic_slide(slide_id="tiny", grid=3, findings=("f0",))  # 9 patches
        refs = list(slide.iter_patches())
        x = np.eye(9, dtype=np.float32)
        m = EmbeddingMatrix(data=x, ids=[p.patch_id for p in refs], normalized=True)
        # both routes aim at patch 0
        embedder = FixedEmbedder({"f0": x[0], "a0": x[0], "a1": x[1]},
                                 attrs=["a0", "a1"])
        cfg = PipelineConfig(top_k_per_category=2, cluster_sample_total=2,
                             target_total=6, n_attributes=2, seed=0)
        cand = build_candidate_set(slide, m, embedder, cfg)
        by_id = {e.patch.patch_id: e for e in cand.entries}
        assert by_id[refs[0].patch_id].route is Route.REPORT_PROMPT
        ids = [e.patch.patch_id for e in cand.entries]
        assert len(ids) == len(set(ids))


def two_vector_matrix(similarity: float):
    a = np.array([1.0, 0.0], dtype=np.float32)
    b = np.array([similarity, np.sqrt(1.0 - similarity**2)], dtype=np.float32)
    return EmbeddingMatrix(data=np.stack([a, b]), ids=["p0", "p1"], normalized=True)


def cand_from_matrix(m, slide_id="s", scores=None):
    refs = [SlideRecord(slide_id, "lung", m.n, 1, 64).patch(c, 0) for c in range(m.n)]
    scores = scores or [1.0 - 0.001 * i for i in range(m.n)]
    entries = [CandidateEntry(r, Route.CLUSTER, s) for r, s in zip(refs, scores)]
    m2 = EmbeddingMatrix(data=m.data, ids=[r.patch_id for r in refs], normalized=True)
    return CandidateSet(slide_id=slide_id, entries=entries), m2


class TestProbabilisticDedup:
    def test_orthogonal_nothing_dropped(self):
        m = EmbeddingMatrix(data=np.eye(6, dtype=np.float32),
                            ids=[f"p{i}" for i in range(6)], normalized=True)
        cand, m = cand_from_matrix(m)
        out = probabilistic_dedup(cand, m, PipelineConfig(seed=0))
        assert len(out.entries) == 6
        assert out.deduped

    def test_identical_always_dropped(self):
        for seed in range(50):
            cand, m = cand_from_matrix(two_vector_matrix(1.0))
            out = probabilistic_dedup(cand, m, PipelineConfig(seed=seed))
            assert len(out.entries) == 1
            # higher best_score entry survives
            assert out.entries[0].patch.patch_id == cand.entries[0].patch.patch_id

    def test_drop_rate_at_094_is_half(self):
        drops = 0
        trials = 10_000
        cand, m = cand_from_matrix(two_vector_matrix(0.94))
        for seed in range(trials):
            out = probabilistic_dedup(cand, m, PipelineConfig(seed=seed))
            drops += 2 - len(out.entries)
        assert abs(drops / trials - 0.5) <= 0.02

    def test_drop_probability_mapping(self):
        assert drop_probability(0.88, 0.88) == 0.0
        assert drop_probability(1.0, 0.88) == 1.0
        assert drop_probability(0.94, 0.88) == pytest.approx(0.5, abs=1e-12)
        assert drop_probability(0.5, 0.88) == 0.0  # clamped

    def test_threshold_monotonicity_in_expectation(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal(8)
        rows = [base + rng.standard_normal(8) * 0.35 for _ in range(14)]
        x = np.stack(rows)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        m = EmbeddingMatrix(data=x.astype(np.float32),
                            ids=[f"p{i}" for i in range(14)], normalized=True)
        cand, m = cand_from_matrix(m)
        means = []
        for theta in (0.70, 0.82, 0.94):
            kept = 0
            for seed in range(400):
                cfg = PipelineConfig(seed=seed, dedup_threshold=theta)
                kept += len(probabilistic_dedup(cand, m, cfg).entries)
            means.append(kept / 400)
        assert means[0] <= means[1] + 0.05
        assert means[1] <= means[2] + 0.05

    def test_already_deduped_rejected(self):
        cand, m = cand_from_matrix(two_vector_matrix(0.5))
        out = probabilistic_dedup(cand, m, PipelineConfig(seed=0))
        with pytest.raises(AlreadyDeduped):
            probabilistic_dedup(out, m, PipelineConfig(seed=0))

    def test_audit_trail_covers_all_entries(self):
        cand, m = cand_from_matrix(two_vector_matrix(0.95))
        audit = []
        out = probabilistic_dedup(cand, m, PipelineConfig(seed=3), audit=audit)
        assert len(audit) == 2
        assert audit[0].kept  # scanned first, nothing kept yet
        assert audit[0].max_similarity is None
        assert audit[1].max_similarity == pytest.approx(0.95, abs=1e-6)
        assert sum(1 for d in audit if d.kept) == len(out.entries)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(0, 10_000), st.integers(3, 16))
    def test_filter_preserves_relative_order(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        m = EmbeddingMatrix(data=x.astype(np.float32),
                            ids=[f"p{i}" for i in range(n)], normalized=True)
        scores = [float(s) for s in rng.random(n)]
        cand, m = cand_from_matrix(m, scores=scores)
        out = probabilistic_dedup(cand, m, PipelineConfig(seed=seed, dedup_threshold=0.5))
        input_ids = [e.patch.patch_id for e in cand.entries]
        output_ids = [e.patch.patch_id for e in out.entries]
        assert set(output_ids) <= set(input_ids)
        positions = [input_ids.index(i) for i in output_ids]
        assert positions == sorted(positions)

    def test_determinism(self, mock_backend):
        slide = synthetic_slide(grid=15)
        m = mock_patch_embeddings(slide, mock_backend)
        client = AgentClient(mock_backend)
        cfg = PipelineConfig(seed=11)
        a = probabilistic_dedup(build_candidate_set(slide, m, client, cfg), m, cfg)
        b = probabilistic_dedup(build_candidate_set(slide, m, client, cfg), m, cfg)
        assert [e.patch.patch_id for e in a.entries] == [e.patch.patch_id for e in b.entries]
