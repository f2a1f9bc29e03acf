"""Sensor streams, sliding windows and window labels.

Channel layout is fixed to ``(ax, ay, az, gx, gy, gz, mx, my, mz)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_CHANNELS = 9
CHANNEL_NAMES = ("ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz")
DEFAULT_RATE_HZ = 92.0
DEFAULT_T_MAX = 150
PEAK, NON_PEAK = 1, 0


class StreamFormatError(ValueError):
    """Raised when a stream file or stream object is malformed."""


class EmptyWindowingError(ValueError):
    """Raised when a stream is too short to yield a single window."""


@dataclass
class SignalStream:
    channels: np.ndarray
    peak_intervals: list[tuple[int, int]] = field(default_factory=list)
    sample_rate_hz: float = DEFAULT_RATE_HZ
    exercise_id: str = "unknown"
    subject_id: str = "unknown"

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.peak_intervals = [(int(a), int(b)) for a, b in self.peak_intervals]
        validate_stream(self)

    def __len__(self) -> int:
        return self.channels.shape[0]

    @property
    def n_reps(self) -> int:
        return len(self.peak_intervals)


def validate_stream(stream: SignalStream) -> None:
    ch = stream.channels
    if ch.ndim != 2 or ch.shape[1] != N_CHANNELS:
        raise StreamFormatError(f"expected [L x {N_CHANNELS}] channels, got shape {ch.shape}")
    if ch.shape[0] < 1:
        raise StreamFormatError("stream must hold at least one sample")
    if not stream.sample_rate_hz > 0:
        raise StreamFormatError(f"sample rate must be positive, got {stream.sample_rate_hz}")
    prev_end = 0
    for start, end in stream.peak_intervals:
        if not (0 <= start < end <= ch.shape[0]):
            raise StreamFormatError(f"peak interval [{start}, {end}) outside [0, {ch.shape[0]})")
        if start < prev_end:
            raise StreamFormatError(f"peak interval [{start}, {end}) overlaps or is out of order")
        prev_end = end


@dataclass(frozen=True)
class WindowParams:
    window_size: int
    stride: int

    def __post_init__(self):
        if self.window_size < 1 or self.stride < 1:
            raise ValueError("window_size and stride must be positive")
        if self.stride > self.window_size:
            raise ValueError(f"stride {self.stride} exceeds window size {self.window_size}")


@dataclass(frozen=True)
class ExerciseMeta:
    exercise_id: str
    name: str
    mean_rep_duration_s: float
    table_params: WindowParams | None = None

    def __post_init__(self):
        if not self.mean_rep_duration_s > 0:
            raise ValueError("mean_rep_duration_s must be positive")


@dataclass
class Window:
    """A stream slice zero-padded to ``t_max`` rows; rows past ``valid_len`` are zero."""

    data: np.ndarray
    valid_len: int
    label: int | None = None
    origin: tuple[str, str, int] = ("unknown", "unknown", 0)

    @property
    def t_max(self) -> int:
        return self.data.shape[0]

    @property
    def start(self) -> int:
        return self.origin[2]


def window_params_for(mean_rep_duration_s: float) -> WindowParams:
    """Window/stride rule for an exercise of the given mean repetition time."""
    if not mean_rep_duration_s > 0:
        raise ValueError(f"duration must be positive, got {mean_rep_duration_s}")
    if mean_rep_duration_s > 1.5:
        return WindowParams(100, 50)
    return WindowParams(50, 25)


def window_starts(length: int, params: WindowParams) -> range:
    if params.window_size > length:
        return range(0)
    return range(0, length - params.window_size + 1, params.stride)


def pad_window(segment: np.ndarray, t_max: int) -> np.ndarray:
    out = np.zeros((t_max, segment.shape[1]), dtype=np.float64)
    out[: segment.shape[0]] = segment
    return out


def slide(stream: SignalStream, params: WindowParams, t_max: int = DEFAULT_T_MAX,
          overlap_ratio: float | None = 0.5) -> list[Window]:
    """Cut ``stream`` into padded windows; a partial tail window is dropped.

    If ``overlap_ratio`` is not None each window is labeled from the stream's
    peak annotations.
    """
    if t_max < params.window_size:
        raise ValueError(f"t_max {t_max} smaller than window size {params.window_size}")
    starts = window_starts(len(stream), params)
    if len(starts) == 0:
        raise EmptyWindowingError(
            f"stream of {len(stream)} samples is shorter than window size {params.window_size}"
        )
    windows = []
    for s in starts:
        seg = stream.channels[s : s + params.window_size]
        w = Window(pad_window(seg, t_max), params.window_size,
                   origin=(stream.exercise_id, stream.subject_id, s))
        if overlap_ratio is not None:
            w.label = label_window(w, stream, overlap_ratio)
        windows.append(w)
    return windows


def interval_overlap(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(0, min(a[1], b[1]) - max(a[0], b[0]))


def label_range(start: int, end: int, intervals: Sequence[tuple[int, int]],
                overlap_ratio: float = 0.5) -> int:
    for iv in intervals:
        if iv[0] >= end:
            break
        if interval_overlap((start, end), iv) >= overlap_ratio * (iv[1] - iv[0]):
            return PEAK
    return NON_PEAK


def label_window(window: Window, stream: SignalStream, overlap_ratio: float = 0.5) -> int:
    """Peak iff the window covers at least ``overlap_ratio`` of some peak interval."""
    if not 0 < overlap_ratio <= 1:
        raise ValueError("overlap_ratio must lie in (0, 1]")
    start = window.start
    end = start + window.valid_len
    if start < 0 or end > len(stream):
        raise ValueError(f"window [{start}, {end}) outside stream of length {len(stream)}")
    return label_range(start, end, stream.peak_intervals, overlap_ratio)


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return ``(data [B,T,9], valid_lens [B], labels [B] or None)``."""
    if not windows:
        raise ValueError("no windows to stack")
    x = np.stack([w.data for w in windows])
    lens = np.array([w.valid_len for w in windows], dtype=np.int64)
    if any(w.label is None for w in windows):
        return x, lens, None
    return x, lens, np.array([w.label for w in windows], dtype=np.int64)


def channel_stats(windows: Iterable[Window]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over valid rows."""
    total = np.zeros(N_CHANNELS)
    total_sq = np.zeros(N_CHANNELS)
    n = 0
    for w in windows:
        v = w.data[: w.valid_len]
        total += v.sum(axis=0)
        total_sq += (v * v).sum(axis=0)
        n += v.shape[0]
    if n == 0:
        raise ValueError("no samples to compute channel statistics")
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    std = np.sqrt(var)
    std[std < 1e-8] = 1.0
    return mean, std


def estimate_rep_duration(stream: SignalStream) -> float:
    """Mean repetition time in seconds from the spacing of annotated peaks."""
    if stream.n_reps < 2:
        raise ValueError("need at least two annotated repetitions")
    centers = np.array([(a + b) / 2 for a, b in stream.peak_intervals])
    return float(np.mean(np.diff(centers)) / stream.sample_rate_hz)


def crop_reps(stream: SignalStream, n_reps: int, lead_cycles: float | None = None) -> SignalStream:
    """Keep the first ``n_reps`` repetitions, cutting midway to the next peak.

    With ``lead_cycles`` the stream also starts that many mean repetition
    periods before the first peak, dropping any longer idle lead-in.
    """
    if stream.n_reps < n_reps:
        raise ValueError(f"stream has {stream.n_reps} repetitions, need {n_reps}")
    if stream.n_reps == n_reps:
        end = len(stream)
    else:
        end = (stream.peak_intervals[n_reps - 1][1] + stream.peak_intervals[n_reps][0]) // 2
    start = 0
    if lead_cycles is not None and stream.n_reps >= 2:
        period = estimate_rep_duration(stream) * stream.sample_rate_hz
        start = max(0, int(stream.peak_intervals[0][0] - lead_cycles * period))
    peaks = [(a - start, b - start) for a, b in stream.peak_intervals[:n_reps]]
    return SignalStream(stream.channels[start:end].copy(), peaks,
                        stream.sample_rate_hz, stream.exercise_id, stream.subject_id)


# -- file format -------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_stream(stream: SignalStream, path: str | Path) -> None:
    lines = [f"#rate={stream.sample_rate_hz:g},channels={N_CHANNELS},"
             f"exercise={stream.exercise_id},subject={stream.subject_id}"]
    lines.extend(",".join(_fmt(v) for v in row) for row in stream.channels.tolist())
    lines.extend(f"#peak={a},{b}" for a, b in stream.peak_intervals)
    Path(path).write_text("\n".join(lines) + "\n")


def parse_header(line: str, lineno: int = 1) -> dict[str, str]:
    if not line.startswith("#"):
        raise StreamFormatError(f"line {lineno}: missing '#rate=...' header")
    fields = {}
    for part in line[1:].strip().split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise StreamFormatError(f"line {lineno}: malformed header field {part!r}")
        fields[key.strip()] = value.strip()
    for key in ("rate", "channels", "exercise", "subject"):
        if key not in fields:
            raise StreamFormatError(f"line {lineno}: header lacks '{key}'")
    if fields["channels"] != str(N_CHANNELS):
        raise StreamFormatError(f"line {lineno}: expected channels={N_CHANNELS}, got {fields['channels']}")
    try:
        if float(fields["rate"]) <= 0:
            raise ValueError
    except ValueError:
        raise StreamFormatError(f"line {lineno}: bad rate {fields['rate']!r}") from None
    return fields


def parse_sample(line: str, lineno: int) -> list[float]:
    parts = line.split(",")
    if len(parts) != N_CHANNELS:
        raise StreamFormatError(f"line {lineno}: expected {N_CHANNELS} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise StreamFormatError(f"line {lineno}: non-numeric sample {line!r}") from None


def load_stream(path: str | Path) -> SignalStream:
    text = Path(path).read_text().splitlines()
    if not text:
        raise StreamFormatError("line 1: empty file")
    header = parse_header(text[0], 1)
    rows: list[list[float]] = []
    peaks: list[tuple[int, int]] = []
    prev_end = 0
    for lineno, raw in enumerate(text[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#peak="):
            try:
                a, b = (int(v) for v in line[len("#peak="):].split(","))
            except ValueError:
                raise StreamFormatError(f"line {lineno}: malformed annotation {line!r}") from None
            if b <= a or a < prev_end:
                raise StreamFormatError(
                    f"line {lineno}: peak interval [{a}, {b}) is empty, unsorted or overlapping")
            peaks.append((a, b))
            prev_end = b
        elif line.startswith("#"):
            continue
        else:
            if peaks:
                raise StreamFormatError(f"line {lineno}: sample after annotation block")
            rows.append(parse_sample(line, lineno))
    if not rows:
        raise StreamFormatError("stream file holds no samples")
    if peaks and peaks[-1][1] > len(rows):
        raise StreamFormatError(f"peak interval {peaks[-1]} exceeds stream length {len(rows)}")
    return SignalStream(np.array(rows), peaks, float(header["rate"]),
                        header["exercise"], header["subject"])
