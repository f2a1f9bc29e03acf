"""Train a small model on synthetic data, register an unseen exercise, count its sets.

Uses the corpus and training budget of the acceptance run, for one held-out exercise.
Run with ``python3 demos/quickstart.py``; takes about a minute on one core.
"""
from dataclasses import replace

from repkit.fewshot import N_SHOTS, SessionState, count_set, registration_windows, stream_step, support_from_windows
from repkit.net import ModelConfig, init_params
from repkit.signal import crop_reps
from repkit.synthgen import GenConfig, generate_corpus
from repkit.train import (Phase1Config, Phase2Config, Phase3Config, WindowSet, fine_tune_phase3,
                          train_phase1, train_phase2, windows_for_streams)

SEED = 7

corpus = generate_corpus(10, 5, GenConfig(seed=SEED))
held_out = "ex03"
print(f"corpus: {len(corpus)} streams over {corpus.exercise_ids}; holding out {held_out}")

# Base training never sees the held-out exercise.
train_streams = [s for s in corpus.streams if s.exercise_id != held_out]
model_cfg = ModelConfig()
data = WindowSet.from_windows(windows_for_streams(train_streams, corpus.metas, model_cfg.t_max))
model = init_params(model_cfg, SEED)
model, h1 = train_phase1(data, Phase1Config(epochs=10, batches_per_epoch=20, seed=SEED), model)
model, h2 = train_phase2(data, Phase2Config(epochs=10, batches_per_epoch=20, seed=SEED), model)
print(f"phase 1 loss {h1[0].loss:.3f} -> {h1[-1].loss:.3f}; phase 2 loss {h2[0].loss:.3f} -> {h2[-1].loss:.3f}")

# A user registers the new exercise with five annotated repetitions of one set.
meta = corpus.metas[held_out]
sets = [s for s in corpus.streams if s.exercise_id == held_out and s.subject_id == "s00"]
registration = crop_reps(sets[0], N_SHOTS, lead_cycles=1.0)
windows = registration_windows(registration, meta, model_cfg.t_max)
tuned, _ = fine_tune_phase3(WindowSet.from_windows(windows), Phase3Config(seed=SEED), model)
support = support_from_windows(windows, tuned)
print(f"support set: {len(support.positives)} peak / {len(support.negatives)} non-peak embeddings")

for stream in sets[1:]:
    result = count_set(stream, support, tuned, seed=SEED)
    print(f"batch count: predicted {result.predicted_count}, true {result.true_count}")

# Streaming gives the same answer, one sample at a time.
session = SessionState(support.params, model_cfg.t_max, seed=SEED)
for row in sets[1].channels:
    stream_step(session, row, support, tuned)
print(f"streaming count for the first test set: {session.count}")
