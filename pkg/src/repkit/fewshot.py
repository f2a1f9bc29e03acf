"""Registration, support-set classification and repetition counting."""
from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .net import ModelParams, embed_arrays, forward
from .signal import (PEAK, ExerciseMeta, SignalStream, Window, WindowParams, pad_window, slide,
                     stack_windows, window_params_for)
from .synthgen import derive_seed

N_SHOTS = 5
N_SAMPLED = 5


class RegistrationError(ValueError):
    """Registration input cannot yield a usable support set."""


@dataclass
class SupportSet:
    positives: np.ndarray
    negatives: np.ndarray
    params: WindowParams

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.float64)
        self.negatives = np.asarray(self.negatives, dtype=np.float64)
        for name, arr in (("positives", self.positives), ("negatives", self.negatives)):
            if arr.ndim != 2 or len(arr) < N_SAMPLED:
                raise RegistrationError(f"support set needs >= {N_SAMPLED} {name}, got {len(arr)}")


def save_support(support: SupportSet, path: str | Path) -> None:
    buf = io.BytesIO()
    np.savez(buf, positives=support.positives.astype("<f8"), negatives=support.negatives.astype("<f8"),
             window=np.array([support.params.window_size, support.params.stride], dtype="<i8"))
    Path(path).write_bytes(buf.getvalue())


def load_support(path: str | Path) -> SupportSet:
    with np.load(Path(path), allow_pickle=False) as npz:
        ws, st = (int(v) for v in npz["window"])
        return SupportSet(npz["positives"], npz["negatives"], WindowParams(ws, st))


def registration_windows(stream: SignalStream, meta: ExerciseMeta, t_max: int,
                         n_shots: int = N_SHOTS) -> list[Window]:
    """Labeled sliding windows of a ``n_shots``-repetition registration stream."""
    if stream.n_reps != n_shots:
        raise RegistrationError(f"registration needs exactly {n_shots} annotated repetitions, "
                                f"got {stream.n_reps}")
    windows = slide(stream, window_params_for(meta.mean_rep_duration_s), t_max)
    n_pos = sum(w.label == PEAK for w in windows)
    if n_pos < N_SAMPLED or len(windows) - n_pos < N_SAMPLED:
        raise RegistrationError(
            f"registration yields {n_pos} peak and {len(windows) - n_pos} non-peak windows; "
            f"need {N_SAMPLED} of each")
    return windows


def register(stream: SignalStream, meta: ExerciseMeta, model: ModelParams,
             n_shots: int = N_SHOTS) -> SupportSet:
    """Embed every registration window; peak windows become positives."""
    windows = registration_windows(stream, meta, model.config.t_max, n_shots)
    return support_from_windows(windows, model)


def support_from_windows(windows: Sequence[Window], model: ModelParams) -> SupportSet:
    x, lens, labels = stack_windows(windows)
    emb = embed_arrays(model, x, lens)
    return SupportSet(emb[labels == PEAK], emb[labels != PEAK],
                      WindowParams(int(lens[0]), int(windows[1].start - windows[0].start))
                      if len(windows) > 1 else WindowParams(int(lens[0]), int(lens[0])))


def sample_support(support: SupportSet, rng_seed: int, k: int = N_SAMPLED) -> tuple[np.ndarray, np.ndarray]:
    """Indices of ``k`` positives and ``k`` negatives, drawn without replacement."""
    rng = np.random.default_rng(rng_seed)
    return (rng.choice(len(support.positives), size=k, replace=False),
            rng.choice(len(support.negatives), size=k, replace=False))


def similarity(anchor: np.ndarray, support: SupportSet, rng_seed: int) -> tuple[float, float]:
    """Mean cosine similarity of the anchor to sampled positives (SP) and negatives (SN)."""
    pi, ni = sample_support(support, rng_seed)
    a = anchor / np.linalg.norm(anchor)
    pos = support.positives[pi]
    neg = support.negatives[ni]
    sp = (pos @ a) / np.linalg.norm(pos, axis=1)
    sn = (neg @ a) / np.linalg.norm(neg, axis=1)
    return float(sp.mean()), float(sn.mean())


def classify_embedding(anchor: np.ndarray, support: SupportSet, rng_seed: int) -> int:
    sp, sn = similarity(anchor, support, rng_seed)
    return PEAK if sp >= sn else 1 - PEAK


def classify(anchor: Window, support: SupportSet, model: ModelParams, rng_seed: int) -> int:
    """Peak iff the mean similarity to positives is at least that to negatives."""
    emb, _ = forward(model, anchor)
    return classify_embedding(emb, support, rng_seed)


def window_seed(seed: int, k: int) -> int:
    """Support-sampling seed for the k-th window of a session."""
    return derive_seed(seed, "classify", k)


def transition_count(labels: Sequence[int], min_run: int = 1) -> int:
    """Number of maximal runs of 1s (runs shorter than ``min_run`` are ignored)."""
    count, run = 0, 0
    for v in labels:
        if v:
            run += 1
            if run == min_run:
                count += 1
        else:
            run = 0
    return count


@dataclass
class CountResult:
    predicted_count: int
    true_count: int | None = None
    labels: list[int] = field(default_factory=list, repr=False)

    @property
    def abs_error(self) -> int | None:
        if self.true_count is None:
            return None
        return abs(self.predicted_count - self.true_count)


def classify_stream(stream: SignalStream, support: SupportSet, model: ModelParams,
                    params: WindowParams, seed: int = 0) -> list[int]:
    windows = slide(stream, params, model.config.t_max, overlap_ratio=None)
    x, lens, _ = stack_windows(windows)
    emb = embed_arrays(model, x, lens)
    return [classify_embedding(e, support, window_seed(seed, k)) for k, e in enumerate(emb)]


def count_set(stream: SignalStream, support: SupportSet, model: ModelParams,
              params: WindowParams | None = None, seed: int = 0, min_run: int = 1) -> CountResult:
    """Slide, classify each window and count runs of peak windows."""
    params = params or support.params
    labels = classify_stream(stream, support, model, params, seed)
    true = stream.n_reps if stream.peak_intervals else None
    return CountResult(transition_count(labels, min_run), true, labels)


# -- streaming -----------------------------------------------------------------

@dataclass(frozen=True)
class WindowClassified:
    index: int
    label: int
    at_sample: int


@dataclass(frozen=True)
class CountIncremented:
    count: int
    at_sample: int


@dataclass
class SessionState:
    """Per-user streaming state; ``at_sample`` counts samples consumed so far."""

    params: WindowParams
    t_max: int
    seed: int = 0
    min_run: int = 1
    buffer: deque = field(default=None)
    samples_seen: int = 0
    samples_since_last_window: int = 0
    label_sequence: list[int] = field(default_factory=list)
    current_run: int = 0
    count: int = 0

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = deque(maxlen=self.params.window_size)


def stream_step(session: SessionState, sample, support: SupportSet, model: ModelParams) -> list:
    """Feed one 9-channel sample; returns the events it triggers."""
    session.buffer.append(np.asarray(sample, dtype=np.float64))
    session.samples_seen += 1
    session.samples_since_last_window += 1
    ws, stride = session.params.window_size, session.params.stride
    first = session.samples_seen == ws
    if session.samples_seen < ws or (not first and session.samples_since_last_window < stride):
        return []
    session.samples_since_last_window = 0
    k = len(session.label_sequence)
    window = Window(pad_window(np.array(session.buffer), session.t_max), ws,
                    origin=("stream", "stream", session.samples_seen - ws))
    label = classify(window, support, model, window_seed(session.seed, k))
    session.label_sequence.append(label)
    events: list = [WindowClassified(k, label, session.samples_seen)]
    if label:
        session.current_run += 1
        if session.current_run == session.min_run:
            session.count += 1
            events.append(CountIncremented(session.count, session.samples_seen))
    else:
        session.current_run = 0
    return events
