"""Downstream protocols: zero-shot prompts, few-shot linear probing, ABMIL.

Everything here runs on feature matrices; no encoder is trained. The three
protocols mirror common practice: prompt-template zero-shot classification,
per-shot stratified linear probes repeated over seeds, and gated-attention
multiple-instance learning trained per bag. Metrics are rank-based AUC
(Mann-Whitney with tie correction) and macro-F1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InputError,
    NonFiniteGradient,
    ShotTooLarge,
    SingleClass,
    SingleClassSplit,
)

DEFAULT_SHOTS = (8, 16, 32, 64, 128, 256)
DEFAULT_ZERO_SHOT_TEMPLATE = "a H&E image of {class}"


# --- zero-shot -----------------------------------------------------------------

@dataclass
class ZeroShotTask:
    class_names: list[str]
    image_feats: np.ndarray  # n x d, L2-normalized rows
    labels: np.ndarray       # n class indices
    template: str = DEFAULT_ZERO_SHOT_TEMPLATE

    def __post_init__(self):
        self.image_feats = np.asarray(self.image_feats, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.class_names) < 2:
            raise InputError("need at least 2 classes")
        if self.labels.shape[0] != self.image_feats.shape[0]:
            raise InputError("labels/features count mismatch")

    def prompts(self) -> list[str]:
        return [self.template.replace("{class}", c) for c in self.class_names]


def zero_shot_classify(task: ZeroShotTask, text_embedder) -> tuple[np.ndarray, float]:
    """Predict the class whose templated prompt is most similar to the image.

    Ties go to the lowest class index. Returns (predictions, accuracy).
    """
    vecs = np.asarray(text_embedder.embed_text(task.prompts()), dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if (norms == 0).any():
        raise InputError("text embedder returned a zero vector")
    vecs = vecs / norms
    scores = task.image_feats @ vecs.T  # n x C
    preds = scores.argmax(axis=1)       # argmax takes the lowest index on ties
    accuracy = float((preds == task.labels).mean())
    return preds, accuracy


# --- linear probe ---------------------------------------------------------------

@dataclass
class ProbeTask:
    train_feats: np.ndarray
    train_labels: np.ndarray
    test_feats: np.ndarray
    test_labels: np.ndarray
    shots: tuple[int, ...] = DEFAULT_SHOTS
    repeats: int = 10
    l2_reg: float = 1e-3

    def __post_init__(self):
        self.train_feats = np.asarray(self.train_feats, dtype=np.float64)
        self.test_feats = np.asarray(self.test_feats, dtype=np.float64)
        self.train_labels = np.asarray(self.train_labels, dtype=np.int64)
        self.test_labels = np.asarray(self.test_labels, dtype=np.int64)
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")
        counts = np.bincount(self.train_labels)
        if counts.size < 2:
            raise InputError("need >= 2 classes in train split")
        smallest = counts[counts > 0].min()
        if max(self.shots) > smallest:
            raise ShotTooLarge(
                f"shot {max(self.shots)} exceeds per-class availability {smallest}")

    @property
    def n_classes(self) -> int:
        return int(max(self.train_labels.max(), self.test_labels.max())) + 1


@dataclass
class ProbeResult:
    shots: tuple[int, ...]
    grid: np.ndarray  # repeats x shots accuracy
    summary: dict[int, dict[str, float]]  # shot -> box stats


def probe_loss_and_grad(W: np.ndarray, b: np.ndarray, x: np.ndarray,
                        y: np.ndarray, l2_reg: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Softmax cross-entropy + L2 penalty on W; analytic gradients."""
    logits = x @ W + b
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2_reg * float((W * W).sum())
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    g_w = x.T @ p + l2_reg * W
    g_b = p.sum(axis=0)
    if not (np.isfinite(g_w).all() and np.isfinite(g_b).all()):
        raise NonFiniteGradient("probe gradient is not finite")
    return float(loss), g_w, g_b


def fit_logistic(x: np.ndarray, y: np.ndarray, n_classes: int, l2_reg: float,
                 max_iter: int = 5000, tol: float = 1e-6,
                 patience: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent with backtracking until convergence.

    Stops when the loss has not improved by ``tol`` within ``patience``
    iterations, or at ``max_iter``.
    """
    d = x.shape[1]
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    lr = 1.0
    best = math.inf
    stale = 0
    loss, g_w, g_b = probe_loss_and_grad(W, b, x, y, l2_reg)
    for _ in range(max_iter):
        while True:
            w_new, b_new = W - lr * g_w, b - lr * g_b
            new_loss, g_w_new, g_b_new = probe_loss_and_grad(w_new, b_new, x, y, l2_reg)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        W, b, loss, g_w, g_b = w_new, b_new, new_loss, g_w_new, g_b_new
        lr *= 1.1
        if loss < best - tol:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break
    return W, b


def _stratified_sample(labels: np.ndarray, shot: int,
                       rng: np.random.Generator) -> np.ndarray:
    picks = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < shot:
            raise ShotTooLarge(f"class {c} has {members.size} < {shot} examples")
        picks.append(rng.choice(members, size=shot, replace=False))
    return np.concatenate(picks)


def linear_probe(task: ProbeTask, seed: int) -> ProbeResult:
    """Accuracy grid over (repeats x shots) seeded stratified subsamples."""
    grid = np.zeros((task.repeats, len(task.shots)))
    c = task.n_classes
    for si, shot in enumerate(task.shots):
        for r in range(task.repeats):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, shot, r]).generate_state(1)[0])
            idx = _stratified_sample(task.train_labels, shot, rng)
            W, b = fit_logistic(task.train_feats[idx], task.train_labels[idx],
                                c, task.l2_reg)
            preds = (task.test_feats @ W + b).argmax(axis=1)
            grid[r, si] = float((preds == task.test_labels).mean())
    summary = {}
    for si, shot in enumerate(task.shots):
        col = grid[:, si]
        q1, med, q3 = np.percentile(col, [25, 50, 75])
        summary[shot] = {"min": float(col.min()), "q1": float(q1),
                         "median": float(med), "q3": float(q3),
                         "max": float(col.max())}
    return ProbeResult(shots=tuple(task.shots), grid=grid, summary=summary)


# --- ABMIL -----------------------------------------------------------------------

@dataclass
class MilBag:
    slide_id: str
    instances: np.ndarray  # m x d
    label: int

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise InputError("bag needs at least one instance")
        if not np.isfinite(self.instances).all():
            raise InputError("bag instances must be finite")


@dataclass
class AbmilParams:
    V: np.ndarray            # d x h
    w: np.ndarray            # h
    W_c: np.ndarray          # d x C
    b_c: np.ndarray          # C
    U: np.ndarray | None = None  # d x h when gated

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"V": self.V, "w": self.w, "W_c": self.W_c, "b_c": self.b_c}
        if self.U is not None:
            out["U"] = self.U
        return out


@dataclass
class AbmilHyper:
    hidden: int = 128
    gated: bool = True
    lr: float = 0.02
    epochs: int = 20
    weight_decay: float = 0.0


def init_abmil(d: int, n_classes: int, hyper: AbmilHyper, seed: int) -> AbmilParams:
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(d)
    return AbmilParams(
        V=rng.standard_normal((d, hyper.hidden)) * scale,
        w=rng.standard_normal(hyper.hidden) / math.sqrt(hyper.hidden),
        W_c=rng.standard_normal((d, n_classes)) * scale,
        b_c=np.zeros(n_classes),
        U=rng.standard_normal((d, hyper.hidden)) * scale if hyper.gated else None,
    )


def abmil_forward(params: AbmilParams, bag: MilBag) -> tuple[np.ndarray, np.ndarray]:
    """Gated-attention pooling: a_k = softmax(w . tanh(V h_k) [* sigmoid(U h_k)]).

    Returns (class logits, attention weights on the simplex).
    """
    h = bag.instances
    t = np.tanh(h @ params.V)
    if params.U is not None:
        g = 1.0 / (1.0 + np.exp(-(h @ params.U)))
        e = (t * g) @ params.w
    else:
        e = t @ params.w
    e = e - e.max()
    a = np.exp(e)
    a /= a.sum()
    z = a @ h
    logits = z @ params.W_c + params.b_c
    return logits, a


def abmil_loss_and_grad(params: AbmilParams, bag: MilBag,
                        label: int) -> tuple[float, dict[str, np.ndarray]]:
    """Softmax cross-entropy on the bag logits; full analytic backprop."""
    h = bag.instances
    t = np.tanh(h @ params.V)
    gated = params.U is not None
    if gated:
        g = 1.0 / (1.0 + np.exp(-(h @ params.U)))
        act = t * g
    else:
        g = None
        act = t
    e = act @ params.w
    e_shift = e - e.max()
    a = np.exp(e_shift)
    a /= a.sum()
    z = a @ h
    logits = z @ params.W_c + params.b_c
    m = logits.max()
    logp = logits - m - math.log(np.exp(logits - m).sum())
    loss = -float(logp[label])

    p = np.exp(logp)
    d_logits = p.copy()
    d_logits[label] -= 1.0
    g_wc = np.outer(z, d_logits)
    g_bc = d_logits
    d_z = params.W_c @ d_logits
    d_a = h @ d_z
    d_e = a * (d_a - float(a @ d_a))
    g_w = act.T @ d_e
    d_act = np.outer(d_e, params.w)
    if gated:
        d_t = d_act * g
        d_g = d_act * t
        g_u = h.T @ (d_g * g * (1.0 - g))
    else:
        d_t = d_act
        g_u = None
    g_v = h.T @ (d_t * (1.0 - t * t))
    grads = {"V": g_v, "w": g_w, "W_c": g_wc, "b_c": g_bc}
    if gated:
        grads["U"] = g_u
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteGradient(f"ABMIL gradient {name} is not finite")
    return loss, grads


def abmil_train(bags: list[MilBag], split: tuple[list[int], list[int]],
                hyper: AbmilHyper, seed: int) -> tuple[AbmilParams, list[dict]]:
    """Per-bag SGD with seeded shuffling; returns params and a validation trace."""
    train_idx, val_idx = split
    train_labels = {bags[i].label for i in train_idx}
    if len(train_labels) < 2:
        raise SingleClassSplit("train split holds a single class")
    n_classes = max(b.label for b in bags) + 1
    d = bags[0].instances.shape[1]
    params = init_abmil(d, n_classes, hyper, seed)
    rng = np.random.default_rng(seed)
    trace: list[dict] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_idx))
        total = 0.0
        shrink = 1.0 - hyper.lr * hyper.weight_decay
        for j in order:
            bag = bags[train_idx[int(j)]]
            loss, grads = abmil_loss_and_grad(params, bag, bag.label)
            total += loss
            params.V = shrink * params.V - hyper.lr * grads["V"]
            params.w = shrink * params.w - hyper.lr * grads["w"]
            params.W_c = shrink * params.W_c - hyper.lr * grads["W_c"]
            params.b_c = params.b_c - hyper.lr * grads["b_c"]
            if params.U is not None:
                params.U = shrink * params.U - hyper.lr * grads["U"]
        row = {"epoch": epoch, "train_loss": total / max(1, len(train_idx))}
        if val_idx:
            val_loss = 0.0
            preds, labels, scores = [], [], []
            for i in val_idx:
                logits, _ = abmil_forward(params, bags[i])
                l, _g = abmil_loss_and_grad(params, bags[i], bags[i].label)
                val_loss += l
                preds.append(int(logits.argmax()))
                labels.append(bags[i].label)
                scores.append(_softmax(logits))
            row["val_loss"] = val_loss / len(val_idx)
            row["val_macro_f1"] = macro_f1(np.array(preds), np.array(labels), n_classes)
            if len(set(labels)) == 2 and n_classes == 2:
                row["val_auc"] = auc([s[1] for s in scores], labels)
        trace.append(row)
    return params, trace


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def bag_scores(params: AbmilParams, bags: list[MilBag]) -> np.ndarray:
    """Class-probability matrix for a list of bags."""
    return np.stack([_softmax(abmil_forward(params, b)[0]) for b in bags])


# --- metrics ---------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC; ties contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape[0] != labels.shape[0]:
        raise InputError("scores/labels length mismatch")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("need both classes for AUC")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def macro_auc_ovr(score_matrix: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    vals = []
    for c in np.unique(labels):
        binary = (labels == c).astype(np.int64)
        if binary.all() or not binary.any():
            continue
        vals.append(auc(score_matrix[:, c], binary))
    if not vals:
        raise SingleClass("no class has both positives and negatives")
    return float(np.mean(vals))


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with P+R = 0 scores 0."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes < 2:
        raise InputError("n_classes must be >= 2")
    f1s = []
    for c in range(n_classes):
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


@dataclass
class ReplicateStats:
    mean: float
    std: float
    values: list[float]


def seeded_replicates(experiment, n_seeds: int = 5,
                      base_seed: int = 0) -> dict[str, ReplicateStats]:
    """Run ``experiment(seed) -> {metric: value}`` under n seeds; mean +- sample std."""
    if n_seeds < 2:
        raise InputError("n_seeds must be >= 2")
    runs = [experiment(base_seed + s) for s in range(n_seeds)]
    out: dict[str, ReplicateStats] = {}
    for metric in runs[0]:
        vals = [float(r[metric]) for r in runs]
        out[metric] = ReplicateStats(
            mean=float(np.mean(vals)),
            std=float(np.std(vals, ddof=1)),
            values=vals)
    return out


# --- synthetic data ----------------------------------------------------------------

def make_blobs(n_per_class: int, n_classes: int, d: int, sep: float,
               seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-variance Gaussian blobs at mutually distant centers."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= sep
    feats = np.concatenate([
        centers[c] + rng.standard_normal((n_per_class, d))
        for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return feats, labels


def make_signal_bags(n_bags: int, d: int, seed: int, signal_shift: float = 2.0,
                     m_range: tuple[int, int] = (20, 50),
                     n_signal_range: tuple[int, int] = (1, 3),
                     ) -> tuple[list[MilBag], np.ndarray]:
    """Bags are positive iff they contain >= 1 instance from a shifted Gaussian.

    Returns (bags, signal_mask_list) where each mask marks the planted
    signal instances of its bag.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    bags: list[MilBag] = []
    masks = []
    for i in range(n_bags):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        x = rng.standard_normal((m, d))
        positive = i % 2 == 0
        mask = np.zeros(m, dtype=bool)
        if positive:
            k = int(rng.integers(n_signal_range[0], n_signal_range[1] + 1))
            rows = rng.choice(m, size=k, replace=False)
            x[rows] += signal_shift * direction
            mask[rows] = True
        bags.append(MilBag(slide_id=f"bag{i}", instances=x, label=int(positive)))
        masks.append(mask)
    return bags, np.array(masks, dtype=object)
