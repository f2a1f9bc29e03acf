"""``repkit`` command line: synth, train, register, count, eval-loo.

Log verbosity comes from the ``REPKIT_LOG`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .evaluation import LooConfig, loo_harness, write_reports
from .fewshot import (N_SHOTS, SessionState, CountIncremented, count_set, load_support,
                      registration_windows, save_support, stream_step, support_from_windows)
from .net import ModelConfig, init_params, load_params, save_params
from .signal import ExerciseMeta, crop_reps, estimate_rep_duration, load_stream, parse_sample
from .synthgen import GenConfig, derive_seed, generate_corpus, load_corpus, save_corpus
from .train import (Phase1Config, Phase2Config, Phase3Config, WindowSet, fine_tune_phase3,
                    train_phase1, train_phase2, windows_for_streams, write_metrics_log)

log = logging.getLogger("repkit")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    corpus: str | None = None
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    registration_lead: float | None = 1.0
    model: dict = field(default_factory=dict)
    phase1: dict = field(default_factory=dict)
    phase2: dict = field(default_factory=dict)
    phase3: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.loo_config()  # validates the nested sections
        return cfg

    def loo_config(self) -> LooConfig:
        try:
            model = ModelConfig.from_dict({**ModelConfig().to_dict(), **self.model})
            return LooConfig(model, Phase1Config(**self.phase1), Phase2Config(**self.phase2),
                             Phase3Config(**self.phase3), registration_lead=self.registration_lead)
        except TypeError as exc:
            raise UsageError(f"bad config section: {exc}") from None


def load_run_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        return RunConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from None


def _merged(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    if args.exercises < 2 or args.subjects < 1 or args.sets < 1 or args.reps < 1:
        raise UsageError("need --exercises >= 2 and positive --subjects/--sets/--reps")
    cfg = _merged(args)
    corpus = generate_corpus(args.exercises, args.subjects,
                             GenConfig(seed=cfg.seed, reps_per_set=args.reps, sets=args.sets))
    manifest = save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} streams; manifest {manifest}")
    return 0


def _corpus(args, cfg: RunConfig):
    path = args.corpus or cfg.corpus
    if not path:
        raise UsageError("--corpus is required")
    if not Path(path).is_dir():
        raise FileNotFoundError(f"corpus directory {path} not found")
    return load_corpus(path)


def cmd_train(args) -> int:
    cfg = _merged(args)
    loo = cfg.loo_config()
    corpus = _corpus(args, cfg)
    if args.holdout and args.holdout not in corpus.exercise_ids:
        raise UsageError(f"holdout {args.holdout!r} not in corpus")
    streams = [s for s in corpus.streams if s.exercise_id != args.holdout]
    manifest = sorted({s.exercise_id for s in streams})
    data = WindowSet.from_windows(windows_for_streams(streams, corpus.metas, loo.model.t_max))
    model = init_params(loo.model, derive_seed(cfg.seed, "init"))
    model, h1 = train_phase1(data, replace(loo.phase1, seed=derive_seed(cfg.seed, "p1")), model)
    model, h2 = train_phase2(data, replace(loo.phase2, seed=derive_seed(cfg.seed, "p2")), model)
    ckpt = Path(args.checkpoint or Path(cfg.checkpoint_dir) / "base.npz")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_params(model, ckpt)
    write_metrics_log(h1, ckpt.with_suffix(".phase1.log"))
    write_metrics_log(h2, ckpt.with_suffix(".phase2.log"))
    ckpt.with_suffix(".manifest.json").write_text(json.dumps({"holdout": args.holdout, "exercises": manifest}))
    print(f"checkpoint {ckpt}")
    return 0


def cmd_register(args) -> int:
    cfg = _merged(args)
    loo = cfg.loo_config()
    model = load_params(args.checkpoint)
    stream = load_stream(args.stream)
    if stream.n_reps < N_SHOTS:
        raise UsageError(f"registration stream has {stream.n_reps} repetitions, need {N_SHOTS}")
    stream = crop_reps(stream, N_SHOTS, loo.registration_lead)
    duration = args.duration or estimate_rep_duration(stream)
    meta = ExerciseMeta(stream.exercise_id, stream.exercise_id, duration)
    windows = registration_windows(stream, meta, model.config.t_max)
    tuned, _ = fine_tune_phase3(WindowSet.from_windows(windows),
                                replace(loo.phase3, seed=derive_seed(cfg.seed, "p3")), model)
    support = support_from_windows(windows, tuned)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(tuned, out / "adapted.npz")
    save_support(support, out / "support.npz")
    print(f"support positives={len(support.positives)} negatives={len(support.negatives)} "
          f"window={support.params.window_size} stride={support.params.stride}")
    return 0


def cmd_count(args) -> int:
    cfg = _merged(args)
    model = load_params(args.checkpoint)
    support = load_support(args.support)
    if args.stream:
        session = SessionState(support.params, model.config.t_max, seed=cfg.seed)
        for lineno, line in enumerate(sys.stdin, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            for ev in stream_step(session, parse_sample(line, lineno), support, model):
                if isinstance(ev, CountIncremented):
                    print(f"count={ev.count} at_sample={ev.at_sample}", flush=True)
        if session.samples_seen < support.params.window_size:
            raise UsageError(f"stream of {session.samples_seen} samples is shorter than one window")
        print(f"predicted={session.count}")
        return 0
    if not args.file:
        raise UsageError("give a stream file or --stream")
    stream = load_stream(args.file)
    result = count_set(stream, support, model, support.params, seed=cfg.seed)
    true = "" if result.true_count is None else result.true_count
    print(f"predicted={result.predicted_count} true={true}")
    return 0


def cmd_eval_loo(args) -> int:
    cfg = _merged(args)
    corpus = _corpus(args, cfg)
    holdouts = args.holdout.split(",") if args.holdout else None
    report = loo_harness(corpus, cfg.loo_config(), cfg.seed, holdouts,
                         cache_dir=args.cache or Path(cfg.checkpoint_dir) / "loo")
    paths = write_reports(report, args.out or cfg.report_dir)
    s = report.summary()
    print(f"exercises={s['exercises']} macro_f1={s['macro_f1']:.4f} within_1={s['within_1']:.3f} "
          f"summary={paths['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON run config; flags override it")
    p = argparse.ArgumentParser(prog="repkit", description="Few-shot repetition counting")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--exercises", type=int, default=10)
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--sets", type=int, default=4)
    s.add_argument("--reps", type=int, default=15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="phase 1 + phase 2 training")
    t.add_argument("--corpus")
    t.add_argument("--holdout")
    t.add_argument("--checkpoint")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", parents=[common], help="register a new exercise and fine-tune")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--stream", required=True, help="stream file with >= 5 annotated repetitions")
    r.add_argument("--duration", type=float, help="mean repetition time in seconds")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_register)

    c = sub.add_parser("count", parents=[common], help="count repetitions in a set")
    c.add_argument("file", nargs="?")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--support", required=True)
    c.add_argument("--stream", action="store_true", help="read samples from standard input")
    c.set_defaults(func=cmd_count)

    e = sub.add_parser("eval-loo", parents=[common], help="leave-one-exercise-out evaluation")
    e.add_argument("--corpus")
    e.add_argument("--holdout", help="comma-separated subset of exercises")
    e.add_argument("--cache")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_loo)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("REPKIT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"repkit {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line diagnostic for every failure
        print(f"repkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
