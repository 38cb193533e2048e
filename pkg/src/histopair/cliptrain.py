"""Desk-scale contrastive training surrogate over precomputed features.

Real encoder fine-tuning is out of scope; learnable projection heads over
fixed feature vectors stand in for it, which is enough to exercise the
symmetric InfoNCE loss, the temperature parameter, and the two-stage data
schedule. All gradients are analytic and finite-difference checked.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBatch, EmptySource, InputError, NonFiniteGradient

TAU_MIN = 0.01
TAU_MAX = 100.0
TAU_INIT = 0.07
LOG_TAU_BOUNDS = (math.log(TAU_MIN), math.log(TAU_MAX))


@dataclass
class ProjectionHead:
    W: np.ndarray  # d_in x d_out
    b: np.ndarray  # d_out

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise InputError("projection head parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]


@dataclass
class TrainState:
    image_head: ProjectionHead
    text_head: ProjectionHead
    log_tau: float
    step: int = 0
    rng_seed: int = 0
    velocity: dict | None = None

    def __post_init__(self):
        if self.image_head.d_out != self.text_head.d_out:
            raise InputError("image and text heads must share d_out")
        self.log_tau = float(np.clip(self.log_tau, *LOG_TAU_BOUNDS))

    @property
    def tau(self) -> float:
        return float(np.exp(np.clip(self.log_tau, *LOG_TAU_BOUNDS)))


@dataclass
class PairSource:
    """Aligned (image feature, text feature) rows."""

    img: np.ndarray
    txt: np.ndarray
    name: str = "pairs"

    def __post_init__(self):
        self.img = np.asarray(self.img, dtype=np.float64)
        self.txt = np.asarray(self.txt, dtype=np.float64)
        if self.img.shape[0] != self.txt.shape[0]:
            raise InputError("image/text pair counts differ")

    @property
    def n(self) -> int:
        return self.img.shape[0]


@dataclass
class StageSchedule:
    stage1: PairSource | None
    stage2: PairSource | None
    epochs1: int
    epochs2: int
    batch_size: int = 32
    lr: float = 0.5
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs1 < 0 or self.epochs2 < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 2:
            raise InputError("batch_size must be >= 2")


def init_state(d_in_img: int, d_in_txt: int, d_out: int, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    return TrainState(
        image_head=ProjectionHead(
            W=rng.standard_normal((d_in_img, d_out)) / math.sqrt(d_in_img),
            b=np.zeros(d_out)),
        text_head=ProjectionHead(
            W=rng.standard_normal((d_in_txt, d_out)) / math.sqrt(d_in_txt),
            b=np.zeros(d_out)),
        log_tau=math.log(TAU_INIT),
        rng_seed=seed,
    )


def infonce_loss(img_feats: np.ndarray, txt_feats: np.ndarray,
                 tau: float) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE: mean of row-wise and column-wise cross-entropy.

    ``logits[i][j] = (img_i . txt_j) / tau`` with matched pairs on the
    diagonal. Inputs must be L2-normalized rows.
    """
    img_feats = np.asarray(img_feats, dtype=np.float64)
    txt_feats = np.asarray(txt_feats, dtype=np.float64)
    b = img_feats.shape[0]
    if b < 2:
        raise DegenerateBatch(f"need a batch of >= 2 pairs, got {b}")
    if txt_feats.shape[0] != b:
        raise InputError("batch sizes differ")
    logits = (img_feats @ txt_feats.T) / tau
    row = _log_softmax(logits, axis=1)
    col = _log_softmax(logits, axis=0)
    diag = np.arange(b)
    loss = -0.5 * (row[diag, diag].mean() + col[diag, diag].mean())
    if not np.isfinite(loss):
        raise InputError("non-finite loss")
    return float(loss), logits


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _project(head: ProjectionHead, x: np.ndarray):
    u = x @ head.W + head.b
    r = np.linalg.norm(u, axis=1, keepdims=True)
    if (r == 0).any():
        raise InputError("projected feature collapsed to zero")
    return u / r, u, r


def _grad_through_norm(g_z: np.ndarray, z: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (g_z - (g_z * z).sum(axis=1, keepdims=True) * z) / r


def contrastive_loss(state: TrainState, img_raw: np.ndarray,
                     txt_raw: np.ndarray) -> float:
    z_i, _, _ = _project(state.image_head, np.asarray(img_raw, dtype=np.float64))
    z_t, _, _ = _project(state.text_head, np.asarray(txt_raw, dtype=np.float64))
    loss, _ = infonce_loss(z_i, z_t, state.tau)
    return loss


def loss_and_grads(state: TrainState, img_raw: np.ndarray,
                   txt_raw: np.ndarray) -> tuple[float, dict]:
    """Analytic gradients of the projected InfoNCE loss.

    Returns grads for W/b of both heads and log_tau, derived through the
    row normalization and the temperature.
    """
    x = np.asarray(img_raw, dtype=np.float64)
    y = np.asarray(txt_raw, dtype=np.float64)
    z_i, _, r_i = _project(state.image_head, x)
    z_t, _, r_t = _project(state.text_head, y)
    tau = state.tau
    loss, logits = infonce_loss(z_i, z_t, tau)
    b = x.shape[0]
    p_row = np.exp(_log_softmax(logits, axis=1))
    p_col = np.exp(_log_softmax(logits, axis=0))
    eye = np.eye(b)
    d_logits = (p_row + p_col - 2.0 * eye) / (2.0 * b)
    g_zi = (d_logits @ z_t) / tau
    g_zt = (d_logits.T @ z_i) / tau
    # d logits / d log_tau = -logits, hence:
    g_log_tau = -float((d_logits * logits).sum())
    lo, hi = LOG_TAU_BOUNDS
    if not (lo < state.log_tau < hi):
        g_log_tau = 0.0
    g_ui = _grad_through_norm(g_zi, z_i, r_i)
    g_ut = _grad_through_norm(g_zt, z_t, r_t)
    grads = {
        "image_W": x.T @ g_ui,
        "image_b": g_ui.sum(axis=0),
        "text_W": y.T @ g_ut,
        "text_b": g_ut.sum(axis=0),
        "log_tau": g_log_tau,
    }
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient {name} is not finite")
    return loss, grads


def grad_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray],
              lr: float, momentum: float = 0.0) -> TrainState:
    """One (optionally momentum-accelerated) gradient-descent update."""
    img_raw, txt_raw = batch
    _, grads = loss_and_grads(state, img_raw, txt_raw)
    vel = state.velocity
    if momentum > 0.0:
        if vel is None:
            vel = {k: np.zeros_like(np.asarray(v, dtype=np.float64))
                   for k, v in grads.items()}
        vel = {k: momentum * vel[k] + grads[k] for k in grads}
        update = vel
    else:
        vel = None
        update = grads
    return TrainState(
        image_head=ProjectionHead(
            W=state.image_head.W - lr * update["image_W"],
            b=state.image_head.b - lr * update["image_b"]),
        text_head=ProjectionHead(
            W=state.text_head.W - lr * update["text_W"],
            b=state.text_head.b - lr * update["text_b"]),
        log_tau=state.log_tau - lr * update["log_tau"],
        step=state.step + 1,
        rng_seed=state.rng_seed,
        velocity=vel,
    )


def train_two_stage(schedule: StageSchedule, seed: int, d_out: int | None = None,
                    telemetry: list | None = None,
                    init: TrainState | None = None) -> TrainState:
    """Stage-1 epochs on the first source, then stage-2 on the second.

    Batches are seeded shuffles; a trailing batch of size 1 is skipped.
    Telemetry rows are (step, stage, loss, tau) dicts, one per epoch.
    """
    stages = [("stage1", schedule.stage1, schedule.epochs1),
              ("stage2", schedule.stage2, schedule.epochs2)]
    for label, source, epochs in stages:
        if epochs > 0 and (source is None or source.n == 0):
            raise EmptySource(f"{label} has no pairs but epochs={epochs}")
    ref = schedule.stage1 if (schedule.stage1 and schedule.stage1.n) else schedule.stage2
    if init is not None:
        state = init
    else:
        if ref is None:
            raise EmptySource("both stage sources are empty")
        state = init_state(ref.img.shape[1], ref.txt.shape[1],
                           d_out or ref.img.shape[1], seed)
    rng = np.random.default_rng(seed)
    for label, source, epochs in stages:
        for _ in range(epochs):
            perm = rng.permutation(source.n)
            for lo in range(0, source.n, schedule.batch_size):
                idx = perm[lo:lo + schedule.batch_size]
                if idx.size < 2:
                    continue
                state = grad_step(state, (source.img[idx], source.txt[idx]),
                                  schedule.lr, schedule.momentum)
            if telemetry is not None:
                loss = contrastive_loss(state, source.img, source.txt)
                telemetry.append({"step": state.step, "stage": label,
                                  "loss": loss, "tau": state.tau})
    return state


def retrieval_eval(state: TrainState, img_raw: np.ndarray, txt_raw: np.ndarray,
                   k: int) -> dict[str, float]:
    """Recall@k of the paired item in both directions."""
    if k < 1:
        raise InputError("k must be >= 1")
    x = np.asarray(img_raw, dtype=np.float64)
    y = np.asarray(txt_raw, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise InputError("pair counts differ")
    z_i, _, _ = _project(state.image_head, x)
    z_t, _, _ = _project(state.text_head, y)
    s = z_i @ z_t.T
    n = s.shape[0]

    def recall(scores: np.ndarray) -> float:
        hits = 0
        for i in range(n):
            row = scores[i]
            rank = int((row > row[i]).sum() + ((row == row[i]) & (np.arange(n) < i)).sum())
            hits += rank < k
        return hits / n

    return {"image_to_text": recall(s), "text_to_image": recall(s.T)}


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, stem) -> Path:
    stem = Path(stem)
    blob = stem.with_suffix(".f32")
    meta = stem.with_suffix(".json")
    parts = [state.image_head.W, state.image_head.b,
             state.text_head.W, state.text_head.b]
    flat = np.concatenate([p.reshape(-1) for p in parts]).astype("<f4")
    flat.tofile(blob)
    meta.write_text(json.dumps({
        "d_in_img": state.image_head.d_in,
        "d_in_txt": state.text_head.d_in,
        "d_out": state.image_head.d_out,
        "log_tau": state.log_tau,
        "step": state.step,
        "rng_seed": state.rng_seed,
        "data_file": blob.name,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def load_checkpoint(meta_path) -> TrainState:
    meta_path = Path(meta_path)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    flat = np.fromfile(meta_path.parent / meta["data_file"], dtype="<f4").astype(np.float64)
    di, dt, do = int(meta["d_in_img"]), int(meta["d_in_txt"]), int(meta["d_out"])
    sizes = [di * do, do, dt * do, do]
    if flat.size != sum(sizes):
        raise InputError("checkpoint blob size mismatch")
    cuts = np.cumsum(sizes)[:-1]
    wi, bi, wt, bt = np.split(flat, cuts)
    return TrainState(
        image_head=ProjectionHead(W=wi.reshape(di, do), b=bi),
        text_head=ProjectionHead(W=wt.reshape(dt, do), b=bt),
        log_tau=float(meta["log_tau"]),
        step=int(meta["step"]),
        rng_seed=int(meta["rng_seed"]),
    )


def make_correlated_pairs(n: int, d: int, noise: float, seed: int,
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic aligned features: text = rotated image + Gaussian noise."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    img = rng.standard_normal((n, d))
    txt = img @ q + noise * rng.standard_normal((n, d))
    return img, txt
