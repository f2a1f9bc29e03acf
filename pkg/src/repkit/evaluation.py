"""Classification metrics, counting-error histograms and the leave-one-exercise-out harness."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fewshot import (N_SHOTS, CountResult, RegistrationError, classify_embedding,
                      registration_windows, support_from_windows, transition_count, window_seed)
from .net import ModelConfig, ModelParams, embed_arrays, init_params, load_params, save_params
from .signal import PEAK, SignalStream, Window, crop_reps, slide, stack_windows, window_params_for
from .synthgen import Corpus, derive_seed
from .train import (EpochMetrics, Phase1Config, Phase2Config, Phase3Config, WindowSet,
                    fine_tune_phase3, train_phase1, train_phase2, windows_for_streams)

log = logging.getLogger(__name__)

BUCKETS = ("e0", "e1", "e2", "e3", "e4", "e5", "e>5")


@dataclass
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


def compute_metrics(predictions, labels, positive_class: int = PEAK) -> MetricsReport:
    """Standard binary metrics; zero denominators give 0."""
    pred = np.asarray(predictions) == positive_class
    true = np.asarray(labels) == positive_class
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("predictions and labels must be non-empty and equally long")
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    tn = int(np.sum(~pred & ~true))
    fn = int(np.sum(~pred & true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport((tp + tn) / pred.size, recall, precision, f1, tp, fp, tn, fn)


@dataclass
class ErrorHistogram:
    percent: dict[str, float]
    total_sets: int


def error_histogram(results: Sequence[CountResult]) -> ErrorHistogram:
    """Percentage of sets per absolute counting error: 0..5 and more than 5."""
    errors = [r.abs_error for r in results]
    if not errors or any(e is None for e in errors):
        raise ValueError("need a non-empty list of results with known true counts")
    tally = dict.fromkeys(BUCKETS, 0)
    for e in errors:
        tally[f"e{e}" if e <= 5 else "e>5"] += 1
    return ErrorHistogram({k: 100.0 * v / len(errors) for k, v in tally.items()}, len(errors))


# -- leave-one-exercise-out --------------------------------------------------------

@dataclass
class LooConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    phase3: Phase3Config = field(default_factory=Phase3Config)
    n_shots: int = N_SHOTS
    registration_lead: float | None = 1.0

    def fingerprint(self, seed: int) -> str:
        blob = json.dumps({"model": self.model.to_dict(), "p1": asdict(self.phase1),
                           "p2": asdict(self.phase2), "seed": seed}, sort_keys=True, default=list)
        return format(derive_seed(0, blob), "x")


@dataclass
class LooEntry:
    exercise_id: str
    metrics: MetricsReport
    metrics_pre: MetricsReport
    histogram: ErrorHistogram
    results: list[CountResult]
    train_manifest: list[str]
    phase1_history: list[EpochMetrics] = field(default_factory=list)
    phase2_history: list[EpochMetrics] = field(default_factory=list)


@dataclass
class LooReport:
    entries: dict[str, LooEntry]

    def all_results(self) -> list[CountResult]:
        return [r for e in self.entries.values() for r in e.results]

    def fraction_within(self, max_error: int) -> float:
        res = self.all_results()
        return sum(r.abs_error <= max_error for r in res) / len(res) if res else 0.0

    @property
    def macro_f1(self) -> float:
        return float(np.mean([e.metrics.f1 for e in self.entries.values()]))

    @property
    def macro_f1_pre(self) -> float:
        return float(np.mean([e.metrics_pre.f1 for e in self.entries.values()]))

    def summary(self) -> dict:
        return {"exercises": len(self.entries), "sets": len(self.all_results()),
                "macro_f1": self.macro_f1, "macro_f1_pre_finetune": self.macro_f1_pre,
                "within_1": self.fraction_within(1), "within_5": self.fraction_within(5),
                "error_free": self.fraction_within(0)}


LabelFn = Callable[[SignalStream, list[Window]], list[int]]


def train_base_model(train_streams: Sequence[SignalStream], corpus: Corpus, cfg: LooConfig,
                     seed: int) -> tuple[ModelParams, list[EpochMetrics], list[EpochMetrics]]:
    """Phase 1 then Phase 2 on the given streams; returns the model and both loss curves."""
    data = WindowSet.from_windows(windows_for_streams(train_streams, corpus.metas, cfg.model.t_max))
    model = init_params(cfg.model, derive_seed(seed, "init"), head=True)
    model, h1 = train_phase1(data, replace(cfg.phase1, seed=derive_seed(seed, "p1")), model)
    model, h2 = train_phase2(data, replace(cfg.phase2, seed=derive_seed(seed, "p2")), model)
    return model, h1, h2


def _history_json(h1: list[EpochMetrics], h2: list[EpochMetrics]) -> str:
    return json.dumps({"phase1": [asdict(m) for m in h1], "phase2": [asdict(m) for m in h2]})


def _history_from_json(text: str) -> tuple[list[EpochMetrics], list[EpochMetrics]]:
    d = json.loads(text)
    return [EpochMetrics(**m) for m in d["phase1"]], [EpochMetrics(**m) for m in d["phase2"]]


def _classify_windows(model: ModelParams, windows: list[Window], support, seed: int) -> list[int]:
    x, lens, _ = stack_windows(windows)
    emb = embed_arrays(model, x, lens)
    return [classify_embedding(e, support, window_seed(seed, k)) for k, e in enumerate(emb)]


def loo_harness(corpus: Corpus, cfg: LooConfig | None = None, seed: int = 0,
                exercises: Sequence[str] | None = None, cache_dir: str | Path | None = None,
                label_fn: LabelFn | None = None) -> LooReport:
    """Hold out each exercise in turn: train on the rest, register, fine-tune, count.

    For every subject the first set of the held-out exercise, cut to
    ``n_shots`` repetitions starting ``registration_lead`` periods before the
    first peak, is the registration stream; its remaining sets are test sets. ``label_fn`` replaces the classifier (e.g. to inject true labels).
    """
    cfg = cfg or LooConfig()
    ids = corpus.exercise_ids
    if len(ids) < 2:
        raise ValueError("leave-one-out needs at least two exercises")
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    entries: dict[str, LooEntry] = {}
    for held in (exercises or ids):
        fold_seed = derive_seed(seed, "fold", held)
        train_streams = [s for s in corpus.streams if s.exercise_id != held]
        manifest = sorted({s.exercise_id for s in train_streams})
        ckpt = cache / f"base_{held}_{cfg.fingerprint(seed)}.npz" if cache else None
        hist_path = ckpt.with_suffix(".history.json") if ckpt else None
        if ckpt and ckpt.exists():
            model = load_params(ckpt, cfg.model)
            h1, h2 = _history_from_json(hist_path.read_text()) if hist_path.exists() else ([], [])
        else:
            model, h1, h2 = train_base_model(train_streams, corpus, cfg, fold_seed)
            if ckpt:
                save_params(model, ckpt)
                hist_path.write_text(_history_json(h1, h2))
                (cache / f"base_{held}_manifest.json").write_text(json.dumps(manifest))
        entry = _evaluate_exercise(corpus, held, model, cfg, fold_seed, label_fn)
        if entry is None:
            continue
        entry.train_manifest = manifest
        entry.phase1_history, entry.phase2_history = h1, h2
        entries[held] = entry
        log.info("held-out %s: F1 %.3f (pre %.3f) e0 %.1f%%", held, entry.metrics.f1,
                 entry.metrics_pre.f1, entry.histogram.percent["e0"])
    return LooReport(entries)


def _evaluate_exercise(corpus: Corpus, held: str, model: ModelParams, cfg: LooConfig,
                       seed: int, label_fn: LabelFn | None) -> LooEntry | None:
    meta = corpus.metas[held]
    params = window_params_for(meta.mean_rep_duration_s)
    by_subject: dict[str, list[SignalStream]] = {}
    for s in corpus.streams:
        if s.exercise_id == held:
            by_subject.setdefault(s.subject_id, []).append(s)
    preds, preds_pre, truth, results = [], [], [], []
    for subj, streams in by_subject.items():
        try:
            reg = crop_reps(streams[0], cfg.n_shots, cfg.registration_lead)
            reg_windows = registration_windows(reg, meta, cfg.model.t_max, cfg.n_shots)
        except (ValueError, RegistrationError) as exc:
            warnings.warn(f"{held}/{subj}: no usable registration stream ({exc}); skipped",
                          RuntimeWarning, stacklevel=2)
            continue
        sub_seed = derive_seed(seed, "subject", subj)
        support_pre = support_from_windows(reg_windows, model)
        tuned, _ = fine_tune_phase3(WindowSet.from_windows(reg_windows),
                                    replace(cfg.phase3, seed=derive_seed(sub_seed, "p3")), model)
        support = support_from_windows(reg_windows, tuned)
        for k, test in enumerate(streams[1:]):
            windows = slide(test, params, cfg.model.t_max)
            set_seed = derive_seed(sub_seed, "set", k)
            if label_fn is not None:
                labels = list(label_fn(test, windows))
                labels_pre = labels
            else:
                labels = _classify_windows(tuned, windows, support, set_seed)
                labels_pre = _classify_windows(model, windows, support_pre, set_seed)
            preds.extend(labels)
            preds_pre.extend(labels_pre)
            truth.extend(w.label for w in windows)
            results.append(CountResult(transition_count(labels), test.n_reps, labels))
    if not results:
        warnings.warn(f"{held}: no registration-eligible stream; exercise skipped",
                      RuntimeWarning, stacklevel=2)
        return None
    return LooEntry(held, compute_metrics(preds, truth), compute_metrics(preds_pre, truth),
                    error_histogram(results), results, [])


# -- reports ------------------------------------------------------------------------

def write_reports(report: LooReport, out_dir: str | Path) -> dict[str, Path]:
    """Per-exercise metric table, error-ratio table and a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, errors_path, summary_path = (out / "classification.csv", out / "counting.csv",
                                               out / "summary.json")
    with metrics_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ID", "Exercise", "Accuracy", "Recall", "Precision", "F1"])
        for i, (ex, e) in enumerate(report.entries.items(), start=1):
            m = e.metrics
            w.writerow([i, ex, f"{m.accuracy:.4f}", f"{m.recall:.4f}", f"{m.precision:.4f}", f"{m.f1:.4f}"])
    with errors_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ID", "Exercise", "Sets", "e|0|", "e|1|", "e|2|", "e|3|", "e|4|", "e|5|", "e|>5|"])
        for i, (ex, e) in enumerate(report.entries.items(), start=1):
            w.writerow([i, ex, e.histogram.total_sets] + [f"{e.histogram.percent[b]:.1f}" for b in BUCKETS])
    summary = report.summary()
    summary["per_exercise"] = {ex: {"metrics": asdict(e.metrics), "metrics_pre_finetune": asdict(e.metrics_pre),
                                    "histogram": e.histogram.percent, "train_manifest": e.train_manifest}
                               for ex, e in report.entries.items()}
    summary_path.write_text(json.dumps(summary, indent=2))
    return {"classification": metrics_path, "counting": errors_path, "summary": summary_path}


def export_embeddings(windows: Sequence[Window], model: ModelParams, path: str | Path) -> int:
    """One CSV line per window: exercise id, label, embedding values."""
    x, lens, _ = stack_windows(windows)
    emb = embed_arrays(model, x, lens)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for win, e in zip(windows, emb):
            label = "" if win.label is None else win.label
            w.writerow([win.origin[0], label] + [repr(float(v)) for v in e])
    return len(windows)


def load_embeddings(path: str | Path) -> tuple[list[str], list[int | None], np.ndarray]:
    ids, labels, rows = [], [], []
    with Path(path).open(newline="") as fh:
        for rec in csv.reader(fh):
            ids.append(rec[0])
            labels.append(int(rec[1]) if rec[1] else None)
            rows.append([float(v) for v in rec[2:]])
    return ids, labels, np.array(rows)
