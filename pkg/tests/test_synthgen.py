import numpy as np
import pytest

from repkit.signal import load_stream
from repkit.synthgen import (DOMINANT_CHANNEL, ExerciseArchetype, GenConfig, SubjectProfile,
                             generate_corpus, generate_set, load_corpus, sample_archetype,
                             save_corpus)


def pure_archetype(period=2.0, amp=1.5, psi=0.3):
    harmonics = tuple(((1, amp if c == 0 else 0.0, psi),) for c in range(9))
    return ExerciseArchetype("pure", period, harmonics, 0.25, 0.2)


def test_fifteen_reps_fifteen_intervals():
    arch = sample_archetype("a", 2.0, np.random.default_rng(0))
    s = generate_set(arch, SubjectProfile(1.0), GenConfig(seed=1, reps_per_set=15))
    assert s.n_reps == 15
    assert all(a < b for a, b in s.peak_intervals)
    assert all(b1 <= a2 for (_, b1), (a2, _) in zip(s.peak_intervals, s.peak_intervals[1:]))


def test_length_tracks_period_and_tempo():
    arch = sample_archetype("a", 2.0, np.random.default_rng(0))
    cfg = GenConfig(seed=1, reps_per_set=15, tempo_jitter=0.0, rest_periods=0.0)
    s = generate_set(arch, SubjectProfile(tempo_scale=1.2), cfg)
    assert abs(len(s) - 15 * 2.0 * 1.2 * 92) <= 1


def test_pure_sinusoid_matches_closed_form():
    arch = pure_archetype()
    cfg = GenConfig(seed=0, reps_per_set=6, tempo_jitter=0.0, rest_periods=0.0)
    s = generate_set(arch, SubjectProfile(), cfg)
    per = 2.0 * 92
    t = np.arange(len(s))
    expected = 1.5 * np.sin(2 * np.pi * t / per + 0.3)
    np.testing.assert_allclose(s.channels[:, 0], expected, atol=1e-12)
    # argmax per cycle equals the analytic maximum at phase (1/4 - psi/2pi)
    analytic = (0.25 - 0.3 / (2 * np.pi)) * per
    for c in range(6):
        lo, hi = int(c * per), int((c + 1) * per)
        idx = lo + int(np.argmax(s.channels[lo:hi, 0]))
        assert abs(idx - (c * per + analytic)) <= 0.5 + 1e-9


def test_same_seed_bit_identical():
    arch = sample_archetype("a", 1.2, np.random.default_rng(4))
    prof = SubjectProfile(1.1, 0.9, 0.05, 0.002)
    a = generate_set(arch, prof, GenConfig(seed=9))
    b = generate_set(arch, prof, GenConfig(seed=9))
    assert a.channels.tobytes() == b.channels.tobytes()
    assert a.peak_intervals == b.peak_intervals
    c = generate_set(arch, prof, GenConfig(seed=10))
    assert c.channels.tobytes() != a.channels.tobytes()


def test_peak_is_dominant_channel_maximum():
    arch = sample_archetype("a", 3.0, np.random.default_rng(2))
    cfg = GenConfig(seed=0, reps_per_set=4, tempo_jitter=0.0)
    s = generate_set(arch, SubjectProfile(), cfg)
    for a, b in s.peak_intervals:
        lo, hi = max(a - 200, 0), min(b + 200, len(s))
        top = lo + int(np.argmax(s.channels[lo:hi, DOMINANT_CHANNEL]))
        assert a - 1 <= top <= b


def test_corpus_counts():
    corpus = generate_corpus(10, 5, GenConfig(seed=1, sets=4, reps_per_set=3))
    assert len(corpus) == 200
    periods = [a.period_s for a in corpus.archetypes.values()]
    assert len(set(periods)) == 10 and min(periods) == 1.2 and max(periods) == 6.0
    assert any(p > 1.5 for p in periods) and any(p <= 1.5 for p in periods)
    assert sum(s.n_reps for s in corpus) == 200 * 3


def test_corpus_needs_two_exercises():
    with pytest.raises(ValueError):
        generate_corpus(1, 2, GenConfig())


def test_corpus_reproducible():
    a = generate_corpus(3, 2, GenConfig(seed=5, sets=2, reps_per_set=4))
    b = generate_corpus(3, 2, GenConfig(seed=5, sets=2, reps_per_set=4))
    assert all(x.channels.tobytes() == y.channels.tobytes() for x, y in zip(a, b))


def test_corpus_files_round_trip(tmp_path):
    corpus = generate_corpus(2, 2, GenConfig(seed=5, sets=2, reps_per_set=3))
    manifest = save_corpus(corpus, tmp_path)
    assert manifest.read_text().splitlines()[0] == "path,exercise,subject,set,mean_rep_duration_s"
    back = load_corpus(tmp_path)
    assert len(back) == len(corpus)
    for x, y in zip(corpus, back):
        np.testing.assert_array_equal(x.channels, y.channels)
        assert x.peak_intervals == y.peak_intervals
    assert back.metas["ex01"].mean_rep_duration_s == corpus.metas["ex01"].mean_rep_duration_s
    assert load_stream(tmp_path / "ex00_s00_set0.csv").subject_id == "s00"
