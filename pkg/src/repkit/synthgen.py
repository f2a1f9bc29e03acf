"""Annotated synthetic exercise streams.

Each archetype is a harmonic-sum motion pattern on the nine IMU channels.
The vertical accelerometer (``az``) carries the dominant fundamental, and a
repetition's peak sits where that channel reaches its cycle maximum, so
"peak" means the same thing across archetypes.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal import (DEFAULT_RATE_HZ, N_CHANNELS, ExerciseMeta, SignalStream, load_stream,
                     save_stream)

DOMINANT_CHANNEL = 2
MANIFEST_NAME = "manifest.csv"

Harmonic = tuple[int, float, float]


@dataclass(frozen=True)
class ExerciseArchetype:
    exercise_id: str
    period_s: float
    harmonics: tuple[tuple[Harmonic, ...], ...]
    peak_phase: float
    peak_width: float

    def __post_init__(self):
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")
        if len(self.harmonics) != N_CHANNELS or any(len(h) == 0 for h in self.harmonics):
            raise ValueError("every channel needs at least one harmonic")
        if not 0 <= self.peak_phase < 1:
            raise ValueError("peak_phase must lie in [0, 1)")
        if not 0 < self.peak_width < 0.5:
            raise ValueError("peak_width must lie in (0, 0.5)")

    def waveform(self, phase: np.ndarray) -> np.ndarray:
        """Noise-free channel values at the given accumulated phases, shape [N, 9]."""
        phase = np.asarray(phase, dtype=np.float64)
        out = np.zeros((phase.size, N_CHANNELS))
        for c, harmonics in enumerate(self.harmonics):
            for k, amp, psi in harmonics:
                out[:, c] += amp * np.sin(2 * np.pi * k * phase + psi)
        return out


@dataclass(frozen=True)
class SubjectProfile:
    tempo_scale: float = 1.0
    amplitude_scale: float = 1.0
    noise_sigma: float = 0.0
    drift_per_s: float = 0.0

    def __post_init__(self):
        if self.tempo_scale <= 0 or self.amplitude_scale <= 0 or self.noise_sigma < 0:
            raise ValueError("invalid subject profile")


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    reps_per_set: int = 15
    sets: int = 4
    rate_hz: float = DEFAULT_RATE_HZ
    tempo_jitter: float = 0.1
    rest_periods: float = 1.0

    def __post_init__(self):
        if self.reps_per_set < 1 or self.sets < 1:
            raise ValueError("reps_per_set and sets must be positive")


@dataclass
class Corpus:
    streams: list[SignalStream]
    archetypes: dict[str, ExerciseArchetype] = field(default_factory=dict)
    metas: dict[str, ExerciseMeta] = field(default_factory=dict)
    set_index: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.streams)

    def __iter__(self):
        return iter(self.streams)

    @property
    def exercise_ids(self) -> list[str]:
        return list(dict.fromkeys(s.exercise_id for s in self.streams))

    def subset(self, keep) -> "Corpus":
        idx = [i for i, s in enumerate(self.streams) if keep(s)]
        ex = {self.streams[i].exercise_id for i in idx}
        return Corpus([self.streams[i] for i in idx],
                      {k: v for k, v in self.archetypes.items() if k in ex},
                      {k: v for k, v in self.metas.items() if k in ex},
                      [self.set_index[i] for i in idx] if self.set_index else [])


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed from a base seed and arbitrary string-able keys."""
    h = hashlib.blake2b(repr((int(seed),) + tuple(str(k) for k in keys)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def _rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def generate_set(arch: ExerciseArchetype, subj: SubjectProfile, cfg: GenConfig,
                 subject_id: str = "unknown") -> SignalStream:
    """One annotated set of ``cfg.reps_per_set`` repetitions with rests at both ends."""
    rng = _rng(cfg.seed, "set")
    rate = cfg.rate_hz
    base = arch.period_s * subj.tempo_scale
    jitter = rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter, cfg.reps_per_set) if cfg.tempo_jitter else np.zeros(cfg.reps_per_set)
    rep_dur = base * (1.0 + jitter) * rate
    rest = int(round(cfg.rest_periods * base * rate))
    edges = rest + np.concatenate([[0.0], np.cumsum(rep_dur)])
    n = int(np.ceil(edges[-1])) + rest
    t = np.arange(n, dtype=np.float64)

    # accumulated phase: 0 during lead-in rest, r + fraction inside rep r, reps during tail
    r = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, cfg.reps_per_set - 1)
    phase = r + (t - edges[r]) / rep_dur[r]
    phase = np.clip(phase, 0.0, float(cfg.reps_per_set))

    x = subj.amplitude_scale * arch.waveform(phase)
    x += subj.drift_per_s * (t / rate)[:, None]
    if subj.noise_sigma > 0:
        x += rng.normal(0.0, subj.noise_sigma, size=x.shape)

    peaks = []
    for k in range(cfg.reps_per_set):
        center = edges[k] + arch.peak_phase * rep_dur[k]
        half = arch.peak_width * rep_dur[k] / 2
        a = max(int(round(center - half)), 0)
        b = min(max(int(round(center + half)), a + 1), n)
        peaks.append((a, b))
    return SignalStream(x, peaks, rate, arch.exercise_id, subject_id)


def sample_archetype(exercise_id: str, period_s: float, rng: np.random.Generator) -> ExerciseArchetype:
    harmonics = []
    for c in range(N_CHANNELS):
        if c == DOMINANT_CHANNEL:
            amp = rng.uniform(1.0, 2.0)
            target = rng.uniform(0.4, 0.6)
            # sin(2*pi*phi + psi) peaks at phi = 1/4 - psi/(2*pi)
            psi = (2 * np.pi * (0.25 - target)) % (2 * np.pi)
            hs = [(1, amp, psi), (2, amp * rng.uniform(0.0, 0.25), rng.uniform(0, 2 * np.pi))]
        else:
            n_h = int(rng.integers(1, 4))
            orders = sorted(rng.choice(np.arange(1, 4), size=n_h, replace=False).tolist())
            hs = [(int(k), rng.uniform(0.05, 0.3), rng.uniform(0, 2 * np.pi)) for k in orders]
        harmonics.append(tuple((int(k), float(a), float(p)) for k, a, p in hs))
    grid = np.linspace(0.0, 1.0, 2000, endpoint=False)
    probe = ExerciseArchetype(exercise_id, period_s, tuple(harmonics), 0.5, 0.2)
    peak_phase = float(grid[np.argmax(probe.waveform(grid)[:, DOMINANT_CHANNEL])])
    return replace(probe, peak_phase=peak_phase, peak_width=float(rng.uniform(0.04, 0.1)))


def sample_subject(rng: np.random.Generator) -> SubjectProfile:
    return SubjectProfile(
        tempo_scale=float(rng.uniform(0.7, 1.3)),
        amplitude_scale=float(rng.uniform(0.6, 1.5)),
        noise_sigma=float(rng.uniform(0.1, 0.2)),
        drift_per_s=float(rng.uniform(-0.005, 0.005)),
    )


def generate_corpus(n_exercises: int, n_subjects: int, cfg: GenConfig,
                    period_range: tuple[float, float] = (1.2, 6.0)) -> Corpus:
    """Streams for every (exercise, subject) pair, ``cfg.sets`` each.

    Archetype periods are evenly spread over ``period_range`` so both branches
    of the window rule are exercised.
    """
    if n_exercises < 2:
        raise ValueError("need at least two exercises for leave-one-out")
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    periods = np.linspace(period_range[0], period_range[1], n_exercises)
    archetypes, metas = {}, {}
    for e, period in enumerate(periods):
        ex_id = f"ex{e:02d}"
        arch = sample_archetype(ex_id, float(period), _rng(cfg.seed, "archetype", e))
        archetypes[ex_id] = arch
        metas[ex_id] = ExerciseMeta(ex_id, f"synthetic-{e:02d}", float(period))
    subjects = {f"s{j:02d}": sample_subject(_rng(cfg.seed, "subject", j)) for j in range(n_subjects)}

    streams, set_index = [], []
    for ex_id, arch in archetypes.items():
        for subj_id, prof in subjects.items():
            for k in range(cfg.sets):
                sub_cfg = replace(cfg, seed=derive_seed(cfg.seed, ex_id, subj_id, k))
                streams.append(generate_set(arch, prof, sub_cfg, subj_id))
                set_index.append(k)
    return Corpus(streams, archetypes, metas, set_index)


# -- corpus files ------------------------------------------------------------

def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write each stream plus a ``manifest.csv`` listing paths and ids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    set_index = corpus.set_index or [0] * len(corpus)
    for s, k in zip(corpus.streams, set_index):
        name = f"{s.exercise_id}_{s.subject_id}_set{k}.csv"
        save_stream(s, directory / name)
        meta = corpus.metas.get(s.exercise_id)
        rows.append({"path": name, "exercise": s.exercise_id, "subject": s.subject_id,
                     "set": k, "mean_rep_duration_s": repr(meta.mean_rep_duration_s) if meta else ""})
    manifest = directory / MANIFEST_NAME
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["path", "exercise", "subject", "set", "mean_rep_duration_s"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    streams, set_index, metas = [], [], {}
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh):
            s = load_stream(directory / row["path"])
            streams.append(s)
            set_index.append(int(row.get("set") or 0))
            dur = row.get("mean_rep_duration_s")
            if dur and s.exercise_id not in metas:
                metas[s.exercise_id] = ExerciseMeta(s.exercise_id, s.exercise_id, float(dur))
    return Corpus(streams, {}, metas, set_index)
