import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from repkit.evaluation import (BUCKETS, LooConfig, compute_metrics, error_histogram, export_embeddings,
                               load_embeddings, loo_harness, write_reports)
from repkit.fewshot import CountResult
from repkit.net import ModelConfig, init_params
from repkit.signal import slide, window_params_for
from repkit.synthgen import GenConfig, generate_corpus
from repkit.train import Phase1Config, Phase2Config, Phase3Config


def test_metrics_example():
    m = compute_metrics([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (m.tp, m.fp, m.tn, m.fn) == (2, 1, 1, 1)
    assert m.accuracy == pytest.approx(0.6)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
    assert compute_metrics([0, 0], [0, 0]).f1 == 0.0
    with pytest.raises(ValueError):
        compute_metrics([], [])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=200))
def test_metric_identities(pairs):
    pred, true = zip(*pairs)
    m = compute_metrics(pred, true)
    assert m.accuracy == pytest.approx((m.tp + m.tn) / len(pairs))
    if m.precision + m.recall > 0:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    assert all(0.0 <= v <= 1.0 for v in (m.accuracy, m.recall, m.precision, m.f1))


def test_error_histogram():
    res = [CountResult(15, 15), CountResult(14, 15), CountResult(22, 15), CountResult(10, 15)]
    h = error_histogram(res)
    assert h.total_sets == 4
    assert h.percent["e0"] == 25.0 and h.percent["e1"] == 25.0
    assert h.percent["e5"] == 25.0 and h.percent["e>5"] == 25.0
    assert math.isclose(sum(h.percent.values()), 100.0)
    assert list(h.percent) == list(BUCKETS)
    with pytest.raises(ValueError):
        error_histogram([CountResult(3)])


TINY = LooConfig(ModelConfig(conv_blocks=((8, 5),), gru_hidden=8, fc_dims=(8, 8)),
                 Phase1Config(epochs=1, batches_per_epoch=2, batch_size=16),
                 Phase2Config(epochs=1, batches_per_epoch=2, batch_size=16),
                 Phase3Config(epochs=2))


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(3, 2, GenConfig(seed=4, sets=2, reps_per_set=6), period_range=(2.0, 3.0))


def true_labels(stream, windows):
    return [w.label for w in windows]


def test_loo_with_oracle_labels(corpus, tmp_path):
    report = loo_harness(corpus, TINY, seed=1, cache_dir=tmp_path, label_fn=true_labels)
    assert list(report.entries) == corpus.exercise_ids
    for ex, entry in report.entries.items():
        assert entry.metrics.f1 == 1.0
        assert ex not in entry.train_manifest and len(entry.train_manifest) == 2
        assert len(entry.results) == 2  # one test set per subject
        assert all(r.abs_error == 0 for r in entry.results)
        assert len(entry.phase1_history) == 1
    assert report.fraction_within(0) == 1.0


def test_loo_cache_reuse(corpus, tmp_path):
    a = loo_harness(corpus, TINY, seed=2, exercises=["ex01"], cache_dir=tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert any(f.startswith("base_ex01_") and f.endswith(".npz") for f in files)
    assert json.loads((tmp_path / "base_ex01_manifest.json").read_text()) == ["ex00", "ex02"]
    b = loo_harness(corpus, TINY, seed=2, exercises=["ex01"], cache_dir=tmp_path)
    assert a.entries["ex01"].metrics == b.entries["ex01"].metrics
    assert [h.loss for h in a.entries["ex01"].phase2_history] == \
        [h.loss for h in b.entries["ex01"].phase2_history]


def test_loo_needs_two_exercises(corpus):
    with pytest.raises(ValueError):
        loo_harness(corpus.subset(lambda s: s.exercise_id == "ex00"), TINY)


def test_reports(corpus, tmp_path):
    report = loo_harness(corpus, TINY, seed=1, exercises=["ex00"], label_fn=true_labels)
    paths = write_reports(report, tmp_path)
    assert paths["classification"].read_text().splitlines()[0] == "ID,Exercise,Accuracy,Recall,Precision,F1"
    assert paths["counting"].read_text().splitlines()[0] == \
        "ID,Exercise,Sets,e|0|,e|1|,e|2|,e|3|,e|4|,e|5|,e|>5|"
    summary = json.loads(paths["summary"].read_text())
    assert summary["exercises"] == 1 and summary["macro_f1"] == 1.0


def test_export_embeddings(corpus, tmp_path):
    model = init_params(TINY.model, seed=0, head=False)
    s = corpus.streams[0]
    windows = slide(s, window_params_for(corpus.metas[s.exercise_id].mean_rep_duration_s), 150)
    n = export_embeddings(windows, model, tmp_path / "e.csv")
    ids, labels, emb = load_embeddings(tmp_path / "e.csv")
    assert n == len(windows) == len(ids)
    assert labels == [w.label for w in windows]
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)
