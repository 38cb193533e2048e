import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from histopair.errors import (
    KTooLarge,
    NotNormalized,
    TooFewRows,
    TotalTooLarge,
    ZeroRow,
)
from histopair.vectors import (
    ClusterModel,
    EmbeddingMatrix,
    cluster_count_rule,
    cosine_topk,
    kmeans_fit,
    l2_normalize,
    load_embeddings,
    pairwise_max_similarity,
    save_embeddings,
    uniform_cluster_sample,
)


def matrix(data, normalized=False, ids=None):
    data = np.asarray(data, dtype=np.float32)
    ids = ids or [f"r{i}" for i in range(data.shape[0])]
    return EmbeddingMatrix(data=data, ids=ids, normalized=normalized)


def random_unit_matrix(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return matrix(x, normalized=True)


class TestNormalize:
    def test_three_four_five(self):
        m = l2_normalize(matrix([[3.0, 4.0]]))
        assert np.allclose(m.data[0], [0.6, 0.8], atol=1e-6)
        assert m.normalized

    def test_idempotent(self):
        m = random_unit_matrix(20, 8, 0)
        again = l2_normalize(m)
        assert np.abs(again.data - m.data).max() < 1e-6

    def test_zero_row(self):
        with pytest.raises(ZeroRow) as exc:
            l2_normalize(matrix([[1.0, 0.0], [0.0, 0.0]]))
        assert exc.value.index == 1

    def test_nan_rejected(self):
        with pytest.raises(Exception):
            matrix([[np.nan, 1.0]])


class TestCosineTopk:
    def test_self_match(self):
        m = random_unit_matrix(10, 16, 1)
        out = cosine_topk(m.data[5], m, 1)
        assert out.entries[0][0] == 5
        assert out.entries[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_orthonormal_tie_breaking(self):
        m = matrix(np.eye(4, dtype=np.float32), normalized=True)
        out = cosine_topk(np.eye(4, dtype=np.float32)[2], m, 2)
        assert out.entries[0] == (2, pytest.approx(1.0))
        assert out.entries[1][0] == 0  # tie among 0,1,3 -> lowest index
        assert out.entries[1][1] == pytest.approx(0.0, abs=1e-7)

    def test_matches_full_sort_oracle(self):
        m = random_unit_matrix(200, 32, 2)
        q = random_unit_matrix(1, 32, 3).data[0]
        got = cosine_topk(q, m, 64)
        scores = m.data @ q
        oracle = sorted(range(200), key=lambda i: (-scores[i], i))[:64]
        assert got.indices == oracle

    def test_requires_normalized(self):
        m = matrix(np.ones((3, 4)))
        with pytest.raises(NotNormalized):
            cosine_topk(np.ones(4) / 2.0, m, 1)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 40))
    def test_k_equals_n_is_total_order(self, seed, n):
        m = random_unit_matrix(n, 8, seed)
        q = random_unit_matrix(1, 8, seed + 1).data[0]
        got = cosine_topk(q, m, n)
        scores = np.clip(m.data @ q, -1, 1)
        oracle = sorted(range(n), key=lambda i: (-scores[i], i))
        assert got.indices == oracle


class TestClusterCountRule:
    def test_paper_value(self):
        assert cluster_count_rule(10_000) == 100

    def test_one(self):
        assert cluster_count_rule(1) == 1

    def test_exact_square(self):
        assert cluster_count_rule(2500) == 50

    def test_exactness_sampled_to_1e6(self):
        def floor_sqrt_oracle(n):  # binary search, independent of math.isqrt
            lo, hi = 0, n + 1
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if mid * mid <= n:
                    lo = mid
                else:
                    hi = mid
            return lo

        rng = np.random.default_rng(0)
        samples = set(int(x) for x in rng.integers(1, 1_000_001, size=2000))
        samples.update([1, 2, 3, 4, 999_999, 1_000_000])
        samples.update(k * k for k in range(1, 1001, 37))
        samples.update(k * k - 1 for k in range(2, 1001, 37))
        for n in samples:
            assert cluster_count_rule(n) == max(1, floor_sqrt_oracle(n))


class TestKmeans:
    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(5)
        a = rng.normal(0.0, 0.05, size=(50, 4)) + np.array([1, 0, 0, 0])
        b = rng.normal(0.0, 0.05, size=(50, 4)) + np.array([-1, 0, 0, 0])
        m = matrix(np.vstack([a, b]))
        model = kmeans_fit(m, 2, seed=0)
        # oracle: nearest true blob center
        truth = np.array([0] * 50 + [1] * 50)
        centers = np.array([[1, 0, 0, 0], [-1, 0, 0, 0]], dtype=float)
        d = ((m.data[:, None, :] - centers[None]) ** 2).sum(-1)
        oracle = d.argmin(1)
        # cluster labels are arbitrary up to permutation
        same = (model.assignments == oracle).all()
        flipped = (model.assignments == 1 - oracle).all()
        assert same or flipped
        assert (truth == oracle).all()

    def test_k_equals_n_zero_inertia(self):
        m = random_unit_matrix(12, 6, 9)
        model = kmeans_fit(m, 12, seed=1)
        assert model.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(model.assignments.tolist()) == sorted(range(12))

    def test_k1_mean(self):
        m = matrix(np.arange(12, dtype=np.float32).reshape(4, 3))
        model = kmeans_fit(m, 1, seed=0)
        assert np.allclose(model.centroids[0], m.data.mean(axis=0), atol=1e-6)

    def test_inertia_monotone_and_fixpoint(self):
        m = random_unit_matrix(300, 8, 11)
        model = kmeans_fit(m, 9, seed=3)
        trace = model.inertia_trace
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
        # re-assigning changes nothing at the fixpoint
        d = ((m.data.astype(np.float64)[:, None, :] - model.centroids[None]) ** 2).sum(-1)
        assert (d.argmin(1) == model.assignments).all()

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            kmeans_fit(random_unit_matrix(5, 4, 0), 6, seed=0)

    def test_seed_determinism(self):
        m = random_unit_matrix(80, 8, 13)
        a = kmeans_fit(m, 7, seed=42)
        b = kmeans_fit(m, 7, seed=42)
        assert (a.assignments == b.assignments).all()
        assert np.array_equal(a.centroids, b.centroids)


def cluster_model_from_sizes(sizes):
    assignments = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])
    k = len(sizes)
    d = 3
    return ClusterModel(k=k, centroids=np.zeros((k, d)),
                        assignments=assignments, inertia=0.0)


class TestUniformClusterSample:
    def test_equal_quotas(self):
        model = cluster_model_from_sizes([100, 100, 100, 100])
        rows = uniform_cluster_sample(model, 256, seed=0)
        assert len(rows) == len(set(rows)) == 256
        per = [sum(1 for r in rows if model.assignments[r] == c) for c in range(4)]
        assert per == [64, 64, 64, 64]

    def test_single_cluster_all(self):
        model = cluster_model_from_sizes([10])
        assert sorted(uniform_cluster_sample(model, 10, seed=0)) == list(range(10))

    def test_shortfall_redistribution(self):
        model = cluster_model_from_sizes([2, 500, 500])
        rows = uniform_cluster_sample(model, 256, seed=1)
        per = [sum(1 for r in rows if model.assignments[r] == c) for c in range(3)]
        assert per == [2, 127, 127]

    def test_total_too_large(self):
        model = cluster_model_from_sizes([3, 3])
        with pytest.raises(TotalTooLarge):
            uniform_cluster_sample(model, 7, seed=0)

    def test_exclusion_shrinks_availability(self):
        model = cluster_model_from_sizes([4, 4])
        rows = uniform_cluster_sample(model, 6, seed=0, exclude={0, 1})
        assert len(rows) == 6
        assert not ({0, 1} & set(rows))

    @settings(deadline=None, max_examples=40)
    @given(st.lists(st.integers(0, 30), min_size=1, max_size=8),
           st.integers(0, 2**31 - 1))
    def test_size_and_distinct_property(self, sizes, seed):
        if sum(sizes) == 0:
            return
        model = cluster_model_from_sizes(sizes)
        total = max(1, sum(sizes) // 2)
        rows = uniform_cluster_sample(model, total, seed=seed)
        assert len(rows) == total
        assert len(set(rows)) == total

    def test_seed_determinism(self):
        model = cluster_model_from_sizes([50, 50, 7])
        a = uniform_cluster_sample(model, 40, seed=9)
        b = uniform_cluster_sample(model, 40, seed=9)
        assert a == b


class TestPairwiseMax:
    def test_duplicates(self):
        row = random_unit_matrix(1, 8, 0).data[0]
        m = matrix(np.vstack([row, row]), normalized=True)
        assert pairwise_max_similarity([0, 1], m) == pytest.approx(1.0, abs=1e-6)

    def test_orthonormal(self):
        m = matrix(np.eye(4, dtype=np.float32), normalized=True)
        assert pairwise_max_similarity([0, 1, 2, 3], m) == pytest.approx(0.0, abs=1e-6)

    def test_matches_nested_loop_oracle(self):
        m = random_unit_matrix(60, 16, 21)
        rows = list(range(5, 55))
        got = pairwise_max_similarity(rows, m)
        best = -2.0
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                best = max(best, float(m.data[rows[i]] @ m.data[rows[j]]))
        assert got == pytest.approx(best, abs=1e-7)

    def test_too_few(self):
        m = random_unit_matrix(3, 4, 0)
        with pytest.raises(TooFewRows):
            pairwise_max_similarity([1], m)


class TestEmbeddingFiles:
    def test_bit_exact_roundtrip(self, tmp_path):
        m = random_unit_matrix(37, 12, 33)
        desc = save_embeddings(m, tmp_path / "emb")
        again = load_embeddings(desc)
        assert again.ids == m.ids
        assert again.normalized == m.normalized
        assert np.array_equal(
            again.data.view(np.uint32), m.data.view(np.uint32))
