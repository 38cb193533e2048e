"""Representative patch selection and probabilistic near-duplicate filtering.

Per slide: the top 64 patches against report-derived prompts, the top 64
against organ attribute prompts, and 256 drawn uniformly from k-means
clusters (k = floor(sqrt(n_patches))), for 384 candidates total under the
default configuration. Candidates closer than a similarity threshold to an
already-kept candidate are then dropped stochastically, with drop
probability rising linearly from 0 at the threshold to 1 at similarity 1.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .backends import hash_seed
from .corpus import PatchRef, Route, SlideRecord, DEFAULT_TOKEN_BUDGET
from .errors import AlreadyDeduped, EmptyPrompts, InputError
from .vectors import (
    EmbeddingMatrix,
    ClusterModel,
    cluster_count_rule,
    cosine_topk,
    kmeans_fit,
    l2_normalize,
    uniform_cluster_sample,
)


@dataclass(frozen=True)
class PipelineConfig:
    top_k_per_category: int = 64
    cluster_sample_total: int = 256
    target_total: int = 384
    dedup_threshold: float = 0.88
    token_budget: int = DEFAULT_TOKEN_BUDGET
    n_attributes: int = 20
    seed: int = 0
    kmeans_max_iter: int = 50

    def __post_init__(self):
        if not (0.0 < self.dedup_threshold < 1.0):
            raise InputError("dedup_threshold must be in (0, 1)")
        for name in ("top_k_per_category", "cluster_sample_total", "target_total",
                     "token_budget", "n_attributes", "kmeans_max_iter"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")

    def digest(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class CandidateEntry:
    patch: PatchRef
    route: Route
    best_score: float


@dataclass
class CandidateSet:
    slide_id: str
    entries: list[CandidateEntry]
    deduped: bool = False

    def __post_init__(self):
        ids = [e.patch.patch_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InputError(f"slide {self.slide_id!r}: duplicate patches in candidate set")

    def route_census(self) -> dict[Route, int]:
        census = {r: 0 for r in Route}
        for e in self.entries:
            census[e.route] += 1
        return census


@dataclass(frozen=True)
class DedupDecision:
    """Audit record for one scanned candidate."""

    patch_id: str
    route: Route
    best_score: float
    kept: bool
    max_similarity: float | None  # vs already-kept entries at decision time


def retrieve_by_prompts(prompts: list[str], category: Route,
                        patch_embeds: EmbeddingMatrix, text_embedder,
                        cfg: PipelineConfig,
                        patch_refs: list[PatchRef]) -> list[tuple[PatchRef, float]]:
    """Top ``cfg.top_k_per_category`` patches by max similarity over prompts.

    Each prompt is embedded and scored against every patch separately; a
    patch's aggregate is its best score across the category's prompts. Ties
    break by ascending patch index.
    """
    if not prompts:
        raise EmptyPrompts(f"no prompts for category {category.value}")
    if len(patch_refs) != patch_embeds.n:
        raise InputError("patch_refs length must match embedding rows")
    if not patch_embeds.normalized:
        patch_embeds = l2_normalize(patch_embeds)
    vecs = np.asarray(text_embedder.embed_text(list(prompts)), dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if (norms == 0).any():
        raise InputError("text embedder returned a zero vector")
    vecs = (vecs / norms).astype(np.float32)
    scores = patch_embeds.data @ vecs.T            # n_patches x n_prompts
    agg = np.clip(scores.max(axis=1), -1.0, 1.0)   # max over the category's prompts
    order = np.lexsort((np.arange(patch_embeds.n), -agg))
    top = order[: min(cfg.top_k_per_category, patch_embeds.n)]
    return [(patch_refs[int(i)], float(agg[int(i)])) for i in top]


def _centroid_similarity(model: ClusterModel, patch_embeds: EmbeddingMatrix,
                         rows: list[int]) -> list[float]:
    cents = model.centroids
    norms = np.linalg.norm(cents, axis=1)
    norms[norms == 0] = 1.0
    unit = cents / norms[:, None]
    out = []
    for r in rows:
        c = int(model.assignments[r])
        out.append(float(np.clip(patch_embeds.data[r] @ unit[c], -1.0, 1.0)))
    return out


def build_candidate_set(slide: SlideRecord, patch_embeds: EmbeddingMatrix,
                        backends, cfg: PipelineConfig) -> CandidateSet:
    """Union of report-prompt, attribute-prompt, and cluster-sampled patches.

    ``backends`` must expose ``embed_text(texts)`` and
    ``attribute_prompts(organ_source, n)``. Patches reachable by several
    routes keep the highest-priority route; cluster sampling runs over the
    rows not already selected by retrieval.
    """
    if patch_embeds.n < 1:
        raise InputError(f"slide {slide.slide_id!r}: no patch embeddings")
    if not patch_embeds.normalized:
        patch_embeds = l2_normalize(patch_embeds)
    patch_refs = list(slide.iter_patches())
    if len(patch_refs) != patch_embeds.n:
        raise InputError(
            f"slide {slide.slide_id!r}: manifest grid has {len(patch_refs)} patches "
            f"but embeddings have {patch_embeds.n} rows")

    row_of = {p.patch_id: i for i, p in enumerate(patch_refs)}
    chosen: dict[str, CandidateEntry] = {}

    def _admit(patch: PatchRef, route: Route, score: float):
        prev = chosen.get(patch.patch_id)
        if prev is None:
            chosen[patch.patch_id] = CandidateEntry(patch, route, score)
        else:
            best_route = route if route.priority < prev.route.priority else prev.route
            chosen[patch.patch_id] = CandidateEntry(
                patch, best_route, max(score, prev.best_score))

    if slide.findings:
        for patch, score in retrieve_by_prompts(
                list(slide.findings), Route.REPORT_PROMPT, patch_embeds,
                backends, cfg, patch_refs):
            _admit(patch, Route.REPORT_PROMPT, score)

    attr_prompts = backends.attribute_prompts(slide.organ_source, cfg.n_attributes)
    for patch, score in retrieve_by_prompts(
            attr_prompts, Route.ATTRIBUTE_PROMPT, patch_embeds,
            backends, cfg, patch_refs):
        _admit(patch, Route.ATTRIBUTE_PROMPT, score)

    already = {row_of[pid] for pid in chosen}
    n_remaining = patch_embeds.n - len(already)
    want = min(cfg.cluster_sample_total, n_remaining,
               max(0, cfg.target_total - len(chosen)))
    cluster_rows: list[int] = []
    model: ClusterModel | None = None
    if want > 0:
        k = cluster_count_rule(patch_embeds.n)
        model = kmeans_fit(patch_embeds, k,
                           seed=hash_seed(cfg.seed, "kmeans", slide.slide_id),
                           max_iter=cfg.kmeans_max_iter)
        cluster_rows = uniform_cluster_sample(
            model, want, seed=hash_seed(cfg.seed, "sample", slide.slide_id),
            exclude=already)
        for r, score in zip(cluster_rows,
                            _centroid_similarity(model, patch_embeds, cluster_rows)):
            _admit(patch_refs[r], Route.CLUSTER, score)

    # emit route-priority blocks: report hits, then attribute hits, then cluster
    entries = sorted(chosen.values(),
                     key=lambda e: (e.route.priority, row_of[e.patch.patch_id]))
    return CandidateSet(slide_id=slide.slide_id, entries=entries, deduped=False)


def drop_probability(similarity: float, threshold: float) -> float:
    """Linear map: 0 at the threshold, 1 at similarity 1, clamped to [0,1]."""
    p = (similarity - threshold) / (1.0 - threshold)
    return min(1.0, max(0.0, p))


def probabilistic_dedup(cand: CandidateSet, patch_embeds: EmbeddingMatrix,
                        cfg: PipelineConfig,
                        audit: list[DedupDecision] | None = None) -> CandidateSet:
    """Stochastically drop near-duplicates of already-kept candidates.

    Entries are scanned in descending best_score order (ties by ascending
    patch row index). For each entry, s* is its max cosine similarity to the
    kept set; entries with s* >= threshold are dropped with probability
    (s* - threshold)/(1 - threshold), seeded per slide. The surviving
    entries keep their original relative order.
    """
    if cand.deduped:
        raise AlreadyDeduped(f"slide {cand.slide_id!r} already deduped")
    if not patch_embeds.normalized:
        patch_embeds = l2_normalize(patch_embeds)
    row_of = patch_embeds.row_index()
    theta = cfg.dedup_threshold
    rng = np.random.default_rng(hash_seed(cfg.seed, "dedup", cand.slide_id))

    scan = sorted(range(len(cand.entries)),
                  key=lambda i: (-cand.entries[i].best_score,
                                 row_of[cand.entries[i].patch.patch_id]))
    kept_rows: list[int] = []
    kept_flags = [False] * len(cand.entries)
    decisions: dict[int, DedupDecision] = {}
    for i in scan:
        entry = cand.entries[i]
        row = row_of[entry.patch.patch_id]
        if kept_rows:
            sims = patch_embeds.data[kept_rows] @ patch_embeds.data[row]
            s_star = float(np.clip(sims.max(), -1.0, 1.0))
        else:
            s_star = None
        if s_star is None or s_star < theta:
            keep = True
        else:
            keep = not (rng.random() < drop_probability(s_star, theta))
        kept_flags[i] = keep
        if keep:
            kept_rows.append(row)
        decisions[i] = DedupDecision(
            patch_id=entry.patch.patch_id, route=entry.route,
            best_score=entry.best_score, kept=keep, max_similarity=s_star)
    if audit is not None:
        audit.extend(decisions[i] for i in range(len(cand.entries)))
    survivors = [e for e, keep in zip(cand.entries, kept_flags) if keep]
    return CandidateSet(slide_id=cand.slide_id, entries=survivors, deduped=True)
