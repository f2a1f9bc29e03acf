import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repkit.signal import (NON_PEAK, PEAK, EmptyWindowingError, SignalStream, StreamFormatError,
                           Window, WindowParams, crop_reps, interval_overlap, label_window,
                           load_stream, save_stream, slide, window_params_for)

from conftest import random_stream


@pytest.mark.parametrize("duration, expected", [(2.94, (100, 50)), (0.89, (50, 25)), (1.5, (50, 25)),
                                                (1.5000001, (100, 50))])
def test_window_rule(duration, expected):
    p = window_params_for(duration)
    assert (p.window_size, p.stride) == expected


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_window_rule_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        window_params_for(bad)


@given(st.floats(min_value=1e-3, max_value=60))
def test_window_rule_half_stride(d):
    p = window_params_for(d)
    assert p.stride * 2 == p.window_size


def test_window_params_invariant():
    with pytest.raises(ValueError):
        WindowParams(50, 60)


def test_slide_counts(rng):
    s = random_stream(rng, 500)
    w = slide(s, WindowParams(100, 50), 150)
    assert len(w) == 9
    assert [x.start for x in w] == list(range(0, 401, 50))
    one = slide(random_stream(rng, 100, peaks=()), WindowParams(100, 50), 150)
    assert len(one) == 1 and one[0].start == 0


def test_slide_too_short(rng):
    with pytest.raises(EmptyWindowingError, match="shorter than window"):
        slide(random_stream(rng, 80, peaks=()), WindowParams(100, 50), 150)


def test_slide_matches_start_enumerator(rng):
    for _ in range(50):
        length = int(rng.integers(100, 1001))
        size = int(rng.choice([50, 100]))
        stride = int(rng.choice([10, 25, 50]))
        starts = []
        s = 0
        while s + size <= length:
            starts.append(s)
            s += stride
        got = slide(random_stream(rng, length, peaks=()), WindowParams(size, stride), 150)
        assert [w.start for w in got] == starts


def test_windows_are_padded_with_exact_zeros(rng):
    s = random_stream(rng, 300)
    for w in slide(s, WindowParams(50, 25), 150):
        assert w.valid_len == 50
        assert np.all(w.data[50:] == 0.0)
        np.testing.assert_array_equal(w.data[:50], s.channels[w.start:w.start + 50])


def _window(start, size, t_max=150):
    return Window(np.zeros((t_max, 9)), size, origin=("ex", "s", start))


def test_label_examples(rng):
    s = random_stream(rng, 500, peaks=[(40, 60)])
    assert label_window(_window(0, 100), s) == PEAK
    s2 = random_stream(rng, 500, peaks=[(90, 130)])
    assert label_window(_window(0, 100), s2, 0.5) == NON_PEAK
    with pytest.raises(ValueError):
        label_window(_window(450, 100), s)


def test_label_matches_bruteforce(rng):
    for _ in range(200):
        length = 400
        a = int(rng.integers(0, 350))
        b = int(rng.integers(a + 1, min(a + 60, length) + 1))
        s = random_stream(rng, length, peaks=[(a, b)])
        start = int(rng.integers(0, 301))
        size = int(rng.choice([50, 100]))
        ratio = float(rng.uniform(0.05, 1.0))
        covered = sum(1 for i in range(start, start + size) if a <= i < b)
        expected = PEAK if covered >= ratio * (b - a) else NON_PEAK
        assert label_window(_window(start, size), s, ratio) == expected


def test_label_independent_of_padding(rng):
    s = random_stream(rng, 500, peaks=[(70, 95)])
    for t_max in (100, 150, 400):
        assert label_window(_window(50, 100, t_max), s) == PEAK


def test_interval_overlap():
    assert interval_overlap((0, 100), (90, 130)) == 10
    assert interval_overlap((0, 10), (20, 30)) == 0


def test_stream_round_trip(tmp_path, rng):
    s = random_stream(rng, 123, peaks=[(5, 9), (40, 60)])
    s.channels[0, 0] = 1e-300
    s.channels[1, 1] = -123456789.123456789
    path = tmp_path / "s.csv"
    save_stream(s, path)
    back = load_stream(path)
    np.testing.assert_array_equal(back.channels, s.channels)
    assert back.peak_intervals == s.peak_intervals
    assert (back.exercise_id, back.subject_id, back.sample_rate_hz) == ("ex", "s", 92.0)
    assert path.read_text().splitlines()[0] == "#rate=92,channels=9,exercise=ex,subject=s"


def test_load_rejects_eight_channels(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("#rate=92,channels=9,exercise=a,subject=b\n" + ",".join(["1"] * 8) + "\n")
    with pytest.raises(StreamFormatError, match="line 2"):
        load_stream(path)
    path.write_text("#rate=92,channels=8,exercise=a,subject=b\n" + ",".join(["1"] * 8) + "\n")
    with pytest.raises(StreamFormatError, match="line 1"):
        load_stream(path)


def test_load_rejects_overlapping_annotations(tmp_path):
    rows = "\n".join(",".join(["0.5"] * 9) for _ in range(50))
    path = tmp_path / "bad.csv"
    path.write_text("#rate=92,channels=9,exercise=a,subject=b\n" + rows + "\n#peak=5,20\n#peak=15,30\n")
    with pytest.raises(StreamFormatError, match="line 53"):
        load_stream(path)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("#rate=92,channels=9,subject=b\n" + ",".join(["1"] * 9) + "\n")
    with pytest.raises(StreamFormatError, match="exercise"):
        load_stream(path)


def test_stream_invariants():
    with pytest.raises(StreamFormatError):
        SignalStream(np.zeros((10, 9)), [(5, 8), (6, 9)])
    with pytest.raises(StreamFormatError):
        SignalStream(np.zeros((10, 9)), [(5, 12)])
    with pytest.raises(StreamFormatError):
        SignalStream(np.zeros((10, 7)))


def test_crop_reps(rng):
    s = random_stream(rng, 500, peaks=[(10, 20), (100, 120), (300, 320)])
    c = crop_reps(s, 2)
    assert c.peak_intervals == [(10, 20), (100, 120)]
    assert len(c) == (120 + 300) // 2
