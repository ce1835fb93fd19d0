"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 config error, 3 numerical failure,
4 gradient-check failure. Diagnostics go to stderr; stdout carries data.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_run_config
from .corpus import generate_corpus, read_jsonl, write_jsonl
from .errors import CheckpointError, CorpusParseError, NumericalError, SchemaError, ValidationError
from .evaluate import EvalOptions, evaluate
from .model import System
from .train import init_train_state, log_to_csv, resume_training
from .verify import TOLERANCE, run_module

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 1, 2, 3, 4

SPLIT_NAMES = ("train", "dev", "test")


def stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def split_bucket(utterance_id: str) -> str:
    """8/1/1 split on a stable id hash, so splits survive regeneration."""
    b = stable_hash64(utterance_id) % 10
    return "train" if b < 8 else ("dev" if b == 8 else "test")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stutterlab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-corpus", help="generate train/dev/test JSONL splits")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="run both training phases")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True, help="directory holding train.jsonl")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, default=None,
                   help="pause after this step (schedule unchanged); resume later")
    t.add_argument("--log", default=None, help="CSV loss log path (default <out>.log.csv)")
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--mu", type=float, default=None)
    t.add_argument("--delta", type=float, default=None)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("evaluate", help="decode a corpus and emit the report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True, help="JSONL corpus file")
    e.add_argument("--ablate-ctc", action="store_true", help="drop the hypothesis segment")
    e.add_argument("--ablate-sed", action="store_true", help="drop the stutter segment")
    e.add_argument("--report", default=None, help="also write report JSON to this path")
    e.add_argument("--transcripts", default=None,
                   help="write decoded outputs as '<id>\\t<text>' lines")
    e.add_argument("--threshold", type=float, default=None, help="SED sigmoid threshold")

    c = sub.add_parser("gradcheck", help="finite-difference verification suite")
    c.add_argument("--module", choices=("all", "ctc", "sed", "lm"), default="all")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    return p


def cmd_generate_corpus(args) -> int:
    cfg = load_run_config(args.config)
    corpus = generate_corpus(cfg.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = {name: [] for name in SPLIT_NAMES}
    for utt in corpus:
        splits[split_bucket(utt.id)].append(utt)
    for name in SPLIT_NAMES:
        write_jsonl(splits[name], out_dir / f"{name}.jsonl")
    print(json.dumps({name: len(splits[name]) for name in SPLIT_NAMES}))
    return EXIT_OK


def _apply_overrides(cfg, args) -> None:
    for attr in ("beta", "mu", "delta", "seed"):
        value = getattr(args, attr)
        if value is not None:
            setattr(cfg.train, attr, value)
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    cfg.train.validate()


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg, args)
    corpus = read_jsonl(Path(args.corpus) / "train.jsonl")
    if args.resume:
        state = load_checkpoint(args.resume)
        state.cfg.max_steps = cfg.train.max_steps
    else:
        system = System(cfg.model_config(), seed=cfg.train.seed)
        state = init_train_state(system, cfg.train)
    state.system.check_corpus_vocabulary(corpus)
    resume_training(state, corpus, stop_at=args.stop_after)
    save_checkpoint(state, args.out)
    log_path = args.log or f"{args.out}.log.csv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(log_to_csv(state.log))
    print(json.dumps({"steps": state.step, "phase": state.phase,
                      "final": state.log[-1] if state.log else None}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.ckpt)
    corpus = read_jsonl(args.corpus)
    opts = EvalOptions(ablate_ctc=args.ablate_ctc, ablate_sed=args.ablate_sed)
    if args.threshold is not None:
        opts.sed_threshold = args.threshold
    report = evaluate(state, corpus, opts, transcript_path=args.transcripts)
    print(json.dumps(report.to_json_dict(), indent=2))
    print(report.render_text(), file=sys.stderr)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=2)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_module(args.module, n_instances=args.instances, seed=args.seed)
    ok = True
    for name, err in results:
        passed = err < TOLERANCE
        ok = ok and passed
        print(f"{name}: max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "generate-corpus": cmd_generate_corpus,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ValidationError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CorpusParseError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
