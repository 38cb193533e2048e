"""Embedding storage, exact cosine top-k search, and seeded k-means.

All similarity throughout the pipeline is cosine, computed as a dot product
of L2-normalized rows. Every randomized routine takes an explicit seed and
is deterministic for a fixed seed; ties are always broken by ascending row
index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyMatrix,
    InputError,
    KTooLarge,
    NotNormalized,
    TooFewRows,
    TotalTooLarge,
    ZeroRow,
)

NORM_TOL = 1e-4


@dataclass
class EmbeddingMatrix:
    """n x d row-major float32 vectors plus the ids of their rows."""

    data: np.ndarray
    ids: list[str]
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise InputError(f"expected 2-d data, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InputError("embedding matrix contains NaN/Inf")
        if self.data.shape[0] != len(self.ids):
            raise InputError(
                f"{self.data.shape[0]} rows but {len(self.ids)} ids"
            )
        if self.normalized:
            norms = np.linalg.norm(self.data, axis=1)
            if norms.size and np.abs(norms - 1.0).max() > NORM_TOL:
                raise NotNormalized(
                    f"normalized=True but max |norm-1| = {np.abs(norms - 1.0).max():.2e}"
                )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def row_index(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.ids)}


@dataclass
class NeighborList:
    query_id: str
    entries: list[tuple[int, float]]

    def __post_init__(self):
        scores = [s for _, s in self.entries]
        if any(b > a + 1e-9 for a, b in zip(scores, scores[1:])):
            raise InputError("neighbor scores must be non-increasing")
        idxs = [i for i, _ in self.entries]
        if len(set(idxs)) != len(idxs):
            raise InputError("neighbor indices must be distinct")

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Unit-length rows; direction preserved. Raises ZeroRow on a zero row."""
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroRow(int(zero[0]))
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(data=data, ids=list(m.ids), normalized=True)


def _require_normalized(m: EmbeddingMatrix, what: str = "matrix"):
    if not m.normalized:
        raise NotNormalized(f"{what} must be L2-normalized")


def cosine_topk(query: np.ndarray, m: EmbeddingMatrix, k: int,
                query_id: str = "") -> NeighborList:
    """Exact top-k rows of ``m`` by dot product with a normalized query.

    Returns min(k, n) entries sorted by descending score, ties broken by
    ascending row index.
    """
    if m.n == 0:
        raise EmptyMatrix("cannot search an empty matrix")
    _require_normalized(m)
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    qn = float(np.linalg.norm(query))
    if abs(qn - 1.0) > NORM_TOL:
        raise NotNormalized(f"query norm {qn:.6f} is not 1")
    if k < 1:
        raise InputError("k must be >= 1")
    scores = np.clip(m.data @ query, -1.0, 1.0)
    order = np.lexsort((np.arange(m.n), -scores))
    top = order[: min(k, m.n)]
    return NeighborList(query_id=query_id,
                        entries=[(int(i), float(scores[i])) for i in top])


def cluster_count_rule(n_patches: int) -> int:
    """Cluster count for a slide: floor(sqrt(n)), at least 1."""
    if n_patches < 1:
        raise InputError("n_patches must be >= 1")
    return max(1, math.isqrt(n_patches))


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy probabilistic seeding proportional to squared distance."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid; pick any unseen row
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans_fit(m: EmbeddingMatrix, k: int, seed: int, max_iter: int = 50) -> ClusterModel:
    """Lloyd iterations until assignment fixpoint or ``max_iter``.

    Seed-deterministic: k-means++ style init, empty clusters re-seeded at the
    point farthest from its assigned centroid, centroid sums accumulated in
    row order.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    if max_iter < 1:
        raise InputError("max_iter must be >= 1")
    if k > m.n:
        raise KTooLarge(f"k={k} > n={m.n}")
    x = m.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x, k, rng)
    assignments = np.full(m.n, -1, dtype=np.int64)
    trace: list[float] = []
    x_sq = np.sum(x * x, axis=1)
    for _ in range(max_iter):
        # ||x-c||^2 = ||x||^2 - 2 x.c + ||c||^2 ; argmin over c
        d2 = x_sq[:, None] - 2.0 * (x @ centroids.T) + np.sum(centroids**2, axis=1)[None, :]
        new_assign = np.argmin(d2, axis=1)
        inertia = float(np.maximum(d2[np.arange(m.n), new_assign], 0.0).sum())
        trace.append(inertia)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, x)
        counts = np.bincount(assignments, minlength=k).astype(np.float64)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            dist_own = d2[np.arange(m.n), assignments]
            for c in empty:
                far = int(np.argmax(dist_own))
                centroids[c] = x[far]
                dist_own[far] = 0.0
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        inertia=trace[-1],
        inertia_trace=trace,
    )


def _equal_share_quotas(sizes: list[int], total: int) -> list[int]:
    """Round-robin allocation of ``total`` over clusters, capped by size.

    Equal shares with largest-remainder (ties by ascending cluster index),
    then shortfall from capped clusters is redistributed round-robin over
    clusters with spare capacity.
    """
    n = len(sizes)
    base, rem = divmod(total, n)
    alloc = [base + (1 if i < rem else 0) for i in range(n)]
    quota = [min(a, s) for a, s in zip(alloc, sizes)]
    shortfall = total - sum(quota)
    while shortfall > 0:
        progressed = False
        for i in range(n):
            if shortfall == 0:
                break
            if quota[i] < sizes[i]:
                quota[i] += 1
                shortfall -= 1
                progressed = True
        if not progressed:
            raise TotalTooLarge("total exceeds available members")
    return quota


def uniform_cluster_sample(model: ClusterModel, total: int, seed: int,
                           exclude: set[int] | None = None) -> list[int]:
    """Sample ``total`` distinct row indices, uniformly within each cluster.

    Per-cluster quotas follow the equal-share/round-robin rule over non-empty
    clusters; clusters smaller than their quota contribute all members and
    the shortfall moves on. ``exclude`` removes rows from consideration
    before sizing the clusters.
    """
    if total < 1:
        raise InputError("total must be >= 1")
    excluded = exclude or set()
    members: list[np.ndarray] = []
    for c in range(model.k):
        rows = model.members(c)
        if excluded:
            rows = rows[~np.isin(rows, list(excluded))]
        if rows.size:
            members.append(rows)
    sizes = [int(r.size) for r in members]
    if not members or total > sum(sizes):
        raise TotalTooLarge(f"total={total} > {sum(sizes)} available rows")
    quotas = _equal_share_quotas(sizes, total)
    rng = np.random.default_rng(seed)
    picked: list[int] = []
    for rows, q in zip(members, quotas):
        if q == 0:
            continue
        if q == rows.size:
            picked.extend(int(i) for i in rows)
        else:
            sel = rng.choice(rows, size=q, replace=False)
            picked.extend(int(i) for i in sel)
    picked.sort()
    return picked


def pairwise_max_similarity(rows: list[int], m: EmbeddingMatrix) -> float:
    """Maximum cosine similarity over all unordered pairs of ``rows``."""
    if len(rows) < 2:
        raise TooFewRows("need at least 2 rows")
    _require_normalized(m)
    x = m.data[np.asarray(rows, dtype=np.int64)]
    sims = x @ x.T
    np.fill_diagonal(sims, -np.inf)
    return float(np.clip(sims.max(), -1.0, 1.0))


# --- embedding file format ---------------------------------------------------
#
# <stem>.json   descriptor: n, d, dtype, normalized, data/ids file names
# <stem>.f32    raw little-endian row-major float32 blob
# <stem>.ids    one id per line

def save_embeddings(m: EmbeddingMatrix, stem) -> Path:
    stem = Path(stem)
    blob = stem.with_suffix(".f32")
    ids_file = stem.with_suffix(".ids")
    desc = stem.with_suffix(".json")
    m.data.astype("<f4").tofile(blob)
    ids_file.write_text("".join(f"{i}\n" for i in m.ids), encoding="utf-8")
    desc.write_text(json.dumps({
        "n": m.n,
        "d": m.d,
        "dtype": "float32",
        "normalized": m.normalized,
        "data_file": blob.name,
        "ids_file": ids_file.name,
    }, indent=2) + "\n", encoding="utf-8")
    return desc


def load_embeddings(desc_path) -> EmbeddingMatrix:
    desc_path = Path(desc_path)
    desc = json.loads(desc_path.read_text(encoding="utf-8"))
    if desc.get("dtype") != "float32":
        raise InputError(f"unsupported dtype {desc.get('dtype')!r}")
    blob = desc_path.parent / desc["data_file"]
    ids_file = desc_path.parent / desc["ids_file"]
    data = np.fromfile(blob, dtype="<f4").reshape(int(desc["n"]), int(desc["d"]))
    ids = ids_file.read_text(encoding="utf-8").splitlines()
    return EmbeddingMatrix(data=data, ids=ids, normalized=bool(desc["normalized"]))
