"""Command-line entry point: ``amd-motion <command> ...`` or ``python -m amd_motion``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .corpus import CorpusError, all_texts, corpus_fingerprint, generate_corpus, load_corpus, save_corpus, split_corpus
from .io_utils import atomic_write_bytes, atomic_write_text
from .metrics import evaluate_suite
from .motion_repr import DEFAULT_SKELETON, InvalidClipError, concat_clips, world_positions_sequence
from .sampler import (GeneratedSequence, PromptSequence, child_seed, infill_stitch, read_sequence, sample_joint,
                      sample_long, sample_segment, sequence_to_bytes, stitch_interp)
from .conditioning import embed_text, predict_duration
from .trainer import (Checkpoint, CheckpointError, ConfigError, TrainingError, load_checkpoint, load_config,
                      save_checkpoint, train_denoiser, train_duration, train_evaluator)

log = logging.getLogger("amd_motion")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMPONENTS = ("denoiser", "duration", "evaluator")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _configure_logging():
    level = os.environ.get("AMD_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"AMD_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def read_prompts(path) -> PromptSequence:
    """One prompt per line; an optional ``| frames`` suffix overrides the predicted duration."""
    prompts, overrides = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        text, _, frames = line.partition("|")
        prompts.append(text.strip())
        overrides.append(int(frames) if frames.strip() else None)
    if not prompts:
        raise UsageError(f"{path}: no prompts")
    return PromptSequence(prompts, overrides if any(o is not None for o in overrides) else None)


def _train_ids(corpus):
    try:
        return split_corpus(corpus, seed=corpus.seed).train
    except ValueError:
        log.warning("corpus of %d records is too small to split; training on all records", len(corpus))
        return [r.id for r in corpus.records]


def _test_clips(corpus):
    try:
        ids = split_corpus(corpus, seed=corpus.seed).test
    except ValueError:
        ids = [r.id for r in corpus.records]
    return [corpus[i].clip for i in ids]


def cmd_gen_corpus(a):
    corpus = generate_corpus(a.clips, seed=a.seed, fps=a.fps)
    save_corpus(corpus, a.out)
    print(f"wrote {len(corpus)} clips to {a.out} (fingerprint {corpus_fingerprint(corpus)[:12]})")


def cmd_train(a):
    config = load_config(a.config)
    corpus = load_corpus(a.corpus)
    fp = corpus_fingerprint(corpus)
    ids = _train_ids(corpus)
    ckpt = Checkpoint()
    if Path(a.out).exists():
        ckpt = load_checkpoint(a.out, expected_fingerprint=fp)
        log.info("updating existing checkpoint %s", a.out)
    ckpt.corpus_fingerprint = fp
    ckpt.train_config = config.__dict__.copy()
    ckpt.schedule = {"T": config.T, "beta_start": config.beta_start, "beta_end": config.beta_end}
    todo = COMPONENTS if a.component == "all" else (a.component,)
    for comp in todo:
        log.info("training %s on %d records", comp, len(ids))
        if comp == "denoiser":
            res = train_denoiser(corpus, ids, config)
        elif comp == "duration":
            res = train_duration(corpus, ids, config, text_dim=config.model_config.text_dim)
        else:
            res = train_evaluator(corpus, ids, config)
        setattr(ckpt, comp, res.model)
        ckpt.history[comp] = res.history
    save_checkpoint(ckpt, a.out)
    rows = ["component,step,loss"]
    for comp, hist in sorted(ckpt.history.items()):
        rows += [f"{comp},{r['step']},{r.get('total', r.get('loss')):.8g}" for r in hist]
    atomic_write_text(f"{a.out}.losses.csv", "\n".join(rows) + "\n")
    plotting.plot_loss_history(ckpt.history, f"{a.out}.losses.png")
    summary = ", ".join(f"{c} final loss {h[-1].get('total', h[-1].get('loss')):.4g}"
                        for c, h in sorted(ckpt.history.items()) if h)
    print(f"wrote {a.out}: {summary}")


def _need(ckpt, comp):
    model = getattr(ckpt, comp)
    if model is None:
        raise CheckpointError(f"checkpoint has no trained {comp}")
    return model


def cmd_sample(a):
    ckpt = load_checkpoint(a.ckpt)
    prompts = read_prompts(a.prompts)
    seq = sample_long(prompts, _need(ckpt, "denoiser"), ckpt.noise_schedule(), ckpt.duration, a.seed, a.guidance)
    if a.guidance is not None:
        seq.meta["guidance"] = a.guidance
    atomic_write_bytes(a.out, sequence_to_bytes(seq))
    print(f"wrote {a.out}: {len(seq.segments)} segments, frames {seq.frames}")


def _frames_for(text, override, duration_model):
    if override is not None:
        return override
    if duration_model is None:
        raise CheckpointError("checkpoint has no duration model; give frame counts in the prompts file")
    return predict_duration(embed_text(text, duration_model.text_dim), duration_model).frames


def cmd_stitch(a):
    """Each consecutive prompt pair becomes one combined clip, built with the chosen method."""
    ckpt = load_checkpoint(a.ckpt)
    model, sched = _need(ckpt, "denoiser"), ckpt.noise_schedule()
    prompts = read_prompts(a.prompts)
    texts = prompts.prompts
    overrides = prompts.frame_overrides or [None] * len(texts)
    if len(texts) < 2 or len(texts) % 2:
        raise UsageError("stitch needs an even number (>= 2) of prompts; they are taken in pairs")
    segments, labels, seeds = [], [], []
    for k in range(0, len(texts), 2):
        pair, s = texts[k:k + 2], child_seed(a.seed, k // 2)
        fa, fb = (_frames_for(t, o, ckpt.duration) for t, o in zip(pair, overrides[k:k + 2]))
        if a.mode == "auto":
            seq = sample_long(PromptSequence(pair, [fa, fb]), model, sched, None, s)
            clip = concat_clips(seq.segments)
        elif a.mode == "joint":
            clip = sample_joint(pair, model, sched, s, n_frames=fa + fb)
        else:
            ca = sample_segment(model, sched, pair[0], fa, child_seed(s, 0))
            cb = sample_segment(model, sched, pair[1], fb, child_seed(s, 1))
            if a.mode == "interp":
                clip = stitch_interp(ca, cb)
            else:
                # the combined clip starts with the first prompt's motion, so condition on it
                clip = infill_stitch(ca, cb, model, sched, child_seed(s, 2), text=pair[0])
        segments.append(clip)
        labels.append(" ".join(pair))
        seeds.append(s)
    seq = GeneratedSequence(segments, labels, seeds, a.mode, a.seed)
    atomic_write_bytes(a.out, sequence_to_bytes(seq))
    print(f"wrote {a.out}: mode {a.mode}, {len(segments)} clips, frames {seq.frames}")


def cmd_eval(a):
    corpus = load_corpus(a.corpus)
    ckpt = load_checkpoint(a.ckpt, expected_fingerprint=corpus_fingerprint(corpus))
    generated = []
    for path in a.generated:
        seq = read_sequence(path)
        generated += list(zip(seq.prompts, seq.segments))
    universe = sorted({r.text for r in corpus.records} | set(all_texts()))
    report = evaluate_suite(_test_clips(corpus), generated, ckpt.evaluator, seed=a.seed, reps=a.reps,
                            text_universe=universe)
    if report.counts["pool_size"] < 32:
        log.warning("only %d distinct texts; R-Precision pool reduced from 32", report.counts["pool_size"])
    atomic_write_text(a.out, report.to_json())
    atomic_write_text(f"{a.out}.csv", report.to_csv())
    plotting.plot_metrics(report, f"{a.out}.png")
    print("  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in report.metrics().items()))


def cmd_export(a):
    seq = read_sequence(a.inp)
    pos = world_positions_sequence(seq.segments, DEFAULT_SKELETON)
    seg_of = np.repeat(np.arange(len(seq.segments)), seq.frames)
    head = "frame,segment," + ",".join(f"j{j:02d}_{c}" for j in range(pos.shape[1]) for c in "xyz")
    lines = [head]
    for f in range(len(pos)):
        lines.append(f"{f},{seg_of[f]}," + ",".join(f"{v:.6f}" for v in pos[f].ravel()))
    atomic_write_text(a.out, "\n".join(lines) + "\n")
    plotting.plot_trajectory(pos, np.cumsum(seq.frames)[:-1], f"{a.out}.png")
    print(f"wrote {a.out}: {len(pos)} frames x {pos.shape[1]} joints")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amd-motion", description="Autoregressive text-to-motion diffusion toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", help="generate a synthetic motion corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--fps", type=float, default=20.0)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("train", help="train model components into a checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--component", choices=COMPONENTS + ("all",), default="all")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="autoregressive generation from a prompts file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--guidance", type=float, default=None)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("stitch", help="two-prompt composition with AMD or a baseline")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("auto", "joint", "interp", "infill"), required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stitch)

    s = sub.add_parser("eval", help="metric report for generated sequences")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--generated", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="world joint positions of a sequence file")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("positions",), default="positions")
    s.set_defaults(func=cmd_export)
    return p


def run(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (CorpusError, CheckpointError, TrainingError, InvalidClipError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
