"""Three-phase training: binary classification, triplet learning, few-shot fine-tuning."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .net import (FC_KEYS, ModelParams, attach_head, backward, detach_head,
                  forward_batch, head_backward, sigmoid)
from .optim import OptimState, adam_step, radam_step
from .signal import (DEFAULT_T_MAX, ExerciseMeta, SignalStream, Window, channel_stats, slide,
                     stack_windows, window_params_for)
from .synthgen import derive_seed

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class WindowSet:
    """Stacked, labeled windows ready for batching."""

    x: np.ndarray
    lens: np.ndarray
    labels: np.ndarray
    exercise: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "WindowSet":
        x, lens, labels = stack_windows(windows)
        if labels is None:
            raise ValueError("all windows must be labeled")
        return cls(x, lens, labels, np.array([w.origin[0] for w in windows]))

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.lens[idx], self.labels[idx], self.exercise[idx])

    def subset(self, keep) -> "WindowSet":
        return self.take(np.flatnonzero(keep))

    def as_windows(self) -> list[Window]:
        return [Window(self.x[i], int(self.lens[i]), int(self.labels[i]), (str(self.exercise[i]), "", 0))
                for i in range(len(self))]


def windows_for_streams(streams: Iterable[SignalStream], metas: dict[str, ExerciseMeta],
                        t_max: int = DEFAULT_T_MAX) -> list[Window]:
    """Slide every stream with its exercise's window rule and label the windows."""
    out: list[Window] = []
    for s in streams:
        out.extend(slide(s, window_params_for(metas[s.exercise_id].mean_rep_duration_s), t_max))
    return out


def fit_normalizer(params: ModelParams, windows: Sequence[Window]) -> ModelParams:
    out = params.copy()
    out.norm_mean, out.norm_std = channel_stats(windows)
    return out


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


def write_metrics_log(history: Sequence[EpochMetrics], path: str | Path) -> None:
    lines = ["epoch,loss,accuracy"] + [f"{m.epoch},{m.loss!r},{m.accuracy!r}" for m in history]
    Path(path).write_text("\n".join(lines) + "\n")


# -- losses ------------------------------------------------------------------

def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("probs and labels must be non-empty and equally long")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dLoss/dLogit for ``bce_loss(sigmoid(logits), labels)``, zero where clamped."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dp = -(y / p - (1.0 - y) / (1.0 - p)) / p.size
    return np.where(inside, dp * p * (1.0 - p), 0.0)


def pairwise_sq_dists(embeddings: np.ndarray) -> np.ndarray:
    """Squared distances between unit rows, ``2 - 2 e_i . e_j``; zero diagonal."""
    e = np.asarray(embeddings, dtype=np.float64)
    d = np.maximum(2.0 - 2.0 * (e @ e.T), 0.0)
    np.fill_diagonal(d, 0.0)
    return d


SEMI_HARD, FALLBACK_BEYOND, FALLBACK_EASIEST = 0, 1, 2


@dataclass
class TripletIndexSet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    branch: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def as_tuples(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.anchor.tolist(), self.positive.tolist(),
                        self.negative.tolist(), self.branch.tolist()))

    @classmethod
    def empty(cls) -> "TripletIndexSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())


def mine_semi_hard(dists: np.ndarray, labels, margin: float) -> TripletIndexSet:
    """One negative per ordered (anchor, positive) pair.

    Preference: the closest negative with ``d_ap < d_an < d_ap + margin``;
    otherwise the closest negative beyond ``d_ap``; otherwise the farthest
    negative. Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        warnings.warn("batch holds a single class; no triplets mined", RuntimeWarning, stacklevel=2)
        return TripletIndexSet.empty()
    A, P, N, Br = [], [], [], []
    idx = np.arange(len(labels))
    for a in idx:
        same = labels == labels[a]
        pos = idx[same & (idx != a)]
        neg = idx[~same]
        if len(pos) == 0:
            continue
        dap = dists[a, pos][:, None]
        dan = dists[a, neg][None, :]
        beyond = dan > dap
        semi = beyond & (dan < dap + margin)
        inf = np.inf
        pick_semi = np.where(semi, dan, inf).argmin(axis=1)
        pick_beyond = np.where(beyond, dan, inf).argmin(axis=1)
        pick_far = np.broadcast_to(dan, beyond.shape).argmax(axis=1)
        has_semi = semi.any(axis=1)
        has_beyond = beyond.any(axis=1)
        choice = np.where(has_semi, pick_semi, np.where(has_beyond, pick_beyond, pick_far))
        branch = np.where(has_semi, SEMI_HARD, np.where(has_beyond, FALLBACK_BEYOND, FALLBACK_EASIEST))
        A.append(np.full(len(pos), a))
        P.append(pos)
        N.append(neg[choice])
        Br.append(branch)
    if not A:
        return TripletIndexSet.empty()
    return TripletIndexSet(*(np.concatenate(v).astype(np.int64) for v in (A, P, N, Br)))


def triplet_loss(d_ap_sq: float, d_an_sq: float, margin: float) -> float:
    return max(0.0, d_ap_sq - d_an_sq + margin)


def batch_triplet_loss(triplets: TripletIndexSet, embeddings: np.ndarray,
                       margin: float) -> tuple[float, np.ndarray]:
    """Mean triplet loss and its gradient w.r.t. the embedding rows.

    Distances use the same ``2 - 2 cos`` form as ``pairwise_sq_dists``.
    An empty triplet set gives zero loss and a zero gradient.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(e)
    n = len(triplets)
    if n == 0:
        return 0.0, grad
    a, p, q = triplets.anchor, triplets.positive, triplets.negative
    d_ap = 2.0 - 2.0 * (e[a] * e[p]).sum(axis=1)
    d_an = 2.0 - 2.0 * (e[a] * e[q]).sum(axis=1)
    raw = d_ap - d_an + margin
    losses = np.maximum(raw, 0.0)
    active = (raw > 0).astype(np.float64)[:, None] / n
    np.add.at(grad, a, 2.0 * active * (e[q] - e[p]))
    np.add.at(grad, p, -2.0 * active * e[a])
    np.add.at(grad, q, 2.0 * active * e[a])
    return float(losses.mean()), grad


# -- phases --------------------------------------------------------------------

@dataclass
class Phase1Config:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    batches_per_epoch: int | None = None


@dataclass
class Phase2Config:
    epochs: int = 30
    batch_size: int = 64
    margin: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    batches_per_epoch: int | None = None


@dataclass
class Phase3Config:
    epochs: int = 15
    lr: float = 5e-5
    margin: float = 1.0
    seed: int = 0
    trainable: tuple[str, ...] = field(default=FC_KEYS)


def _batches(rng: np.random.Generator, n: int, batch_size: int, limit: int | None) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return out if limit is None else out[:limit]


def _balanced_batches(rng: np.random.Generator, labels: np.ndarray, batch_size: int,
                      limit: int | None) -> list[np.ndarray]:
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    half = max(batch_size // 2, 2)
    n_batches = -(-len(labels) // batch_size) if limit is None else limit
    out = []
    for b in range(n_batches):
        pi = np.take(pos, np.arange(b * half, (b + 1) * half), mode="wrap")
        ni = np.take(neg, np.arange(b * half, (b + 1) * half), mode="wrap")
        out.append(np.sort(np.concatenate([pi, ni])))
    return out


def _require_two_classes(labels: np.ndarray, what: str) -> None:
    if len(np.unique(labels)) < 2:
        raise ValueError(f"{what} needs both peak and non-peak windows")


def phase1_loss_and_grads(params: ModelParams, x, lens, labels, train: bool = True,
                          rng_seed: int | None = None):
    """BCE loss of the sigmoid head and gradients for every parameter."""
    emb, trace = forward_batch(params, x, lens, train, rng_seed)
    probs = sigmoid(emb @ params.weights["head.w"] + params.weights["head.b"][0])
    loss = bce_loss(probs, labels)
    dlogit = bce_grad_logits(probs, labels)
    head_grads, demb = head_backward(emb, params, dlogit)
    grads = backward(trace, demb)
    grads.update(head_grads)
    return loss, grads, probs


def phase2_loss_and_grads(params: ModelParams, x, lens, labels, margin: float,
                          train: bool = True, rng_seed: int | None = None,
                          trainable: Iterable[str] | None = None, triplets: TripletIndexSet | None = None):
    """Mean semi-hard triplet loss, gradients, and the mined triplets."""
    emb, trace = forward_batch(params, x, lens, train, rng_seed)
    if triplets is None:
        triplets = mine_semi_hard(pairwise_sq_dists(emb), labels, margin)
    loss, demb = batch_triplet_loss(triplets, emb, margin)
    grads = backward(trace, demb, trainable)
    return loss, grads, triplets, emb


def train_phase1(data: WindowSet, config: Phase1Config, model: ModelParams,
                 fit_norm: bool = True) -> tuple[ModelParams, list[EpochMetrics]]:
    """Binary peak/non-peak training with a temporary sigmoid head.

    Returns the model with the head removed and per-epoch metrics.
    """
    _require_two_classes(data.labels, "phase 1")
    params = model.copy() if model.has_head else attach_head(model, derive_seed(config.seed, "head"))
    if fit_norm:
        params = fit_normalizer(params, data.as_windows())
    state = OptimState()
    rng = np.random.default_rng(derive_seed(config.seed, "phase1"))
    history = []
    for epoch in range(1, config.epochs + 1):
        losses, correct, seen = [], 0, 0
        for b, idx in enumerate(_batches(rng, len(data), config.batch_size, config.batches_per_epoch)):
            loss, grads, probs = phase1_loss_and_grads(
                params, data.x[idx], data.lens[idx], data.labels[idx],
                rng_seed=derive_seed(config.seed, "drop1", epoch, b))
            adam_step(params.weights, grads, state, config.lr, config.weight_decay)
            losses.append(loss * len(idx))
            correct += int(((probs >= 0.5) == (data.labels[idx] == 1)).sum())
            seen += len(idx)
        history.append(EpochMetrics(epoch, sum(losses) / seen, correct / seen))
        log.info("phase1 epoch %d loss %.4f acc %.3f", epoch, history[-1].loss, history[-1].accuracy)
    return detach_head(params), history


def train_phase2(data: WindowSet, config: Phase2Config,
                 model: ModelParams) -> tuple[ModelParams, list[EpochMetrics]]:
    """Triplet training with semi-hard mining on class-balanced batches; nothing frozen."""
    _require_two_classes(data.labels, "phase 2")
    params = detach_head(model)
    state = OptimState()
    rng = np.random.default_rng(derive_seed(config.seed, "phase2"))
    history = []
    for epoch in range(1, config.epochs + 1):
        losses, ok = [], []
        for b, idx in enumerate(_balanced_batches(rng, data.labels, config.batch_size,
                                                  config.batches_per_epoch)):
            loss, grads, trip, emb = phase2_loss_and_grads(
                params, data.x[idx], data.lens[idx], data.labels[idx], config.margin,
                rng_seed=derive_seed(config.seed, "drop2", epoch, b))
            adam_step(params.weights, grads, state, config.lr, config.weight_decay)
            losses.append(loss)
            if len(trip):
                d = pairwise_sq_dists(emb)
                ok.append(float(np.mean(d[trip.anchor, trip.negative] > d[trip.anchor, trip.positive])))
        history.append(EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(ok)) if ok else 0.0))
        log.info("phase2 epoch %d loss %.4f", epoch, history[-1].loss)
    return params, history


def fine_tune_phase3(data: WindowSet, config: Phase3Config,
                     model: ModelParams) -> tuple[ModelParams, list[EpochMetrics]]:
    """Triplet fine-tuning on registration windows; only the two FC layers move."""
    _require_two_classes(data.labels, "phase 3 fine-tuning")
    params = detach_head(model)
    trainable = tuple(config.trainable)
    state = OptimState()
    history = []
    for epoch in range(1, config.epochs + 1):
        loss, grads, trip, _ = phase2_loss_and_grads(
            params, data.x, data.lens, data.labels, config.margin,
            rng_seed=derive_seed(config.seed, "drop3", epoch), trainable=trainable)
        radam_step(params.weights, {k: grads[k] for k in trainable}, state, config.lr)
        history.append(EpochMetrics(epoch, loss, 0.0))
    return params, history
