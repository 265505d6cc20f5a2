"""``xmodal`` command line: preprocess, train, eval, infer, synth.

Exit codes: 0 success, 1 usage, 2 config or input problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import xtns
from .checkpoint import load_checkpoint
from .config import load_config
from .data import (VisualTokens, Vocabulary, build_vocabulary, load_visual_features, make_synthetic_dataset,
                   read_captions, read_data_dir, split_words, tokenize, write_data_dir)
from .decoding import BeamStrategy
from .errors import FormatError, NumericError, UsageError, XmodalError
from .metrics import corpus_scores
from .pipeline import build_pipeline, load_examples
from .training import train_loop

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _corpus_lines(path) -> list[tuple[str, str]]:
    rows = []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        key, cap = line.split("\t", 1) if "\t" in line else (f"{k:05d}", line)
        rows.append((key, cap))
    return rows


def cmd_preprocess(args) -> int:
    rows = _corpus_lines(args.corpus)
    if not rows:
        raise FormatError(f"{args.corpus}: corpus is empty")
    vocab = build_vocabulary([c for _, c in rows], args.min_freq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    with open(out / "tokens.txt", "w", encoding="utf-8", newline="\n") as fh:
        for key, cap in rows:
            ids = tokenize(cap, vocab, args.max_len).ids
            fh.write(f"{key}\t{' '.join(map(str, ids))}\n")
    print(f"vocab size {len(vocab)}")
    return EXIT_OK


def _pipeline(args, seed=None):
    cfg = load_config(args.config)
    pipe = build_pipeline(cfg, seed=cfg.get("training", "seed", 0) if seed is None else seed)
    return cfg, pipe


def cmd_train(args) -> int:
    cfg, pipe = _pipeline(args, args.seed)
    examples = load_examples(cfg, pipe.vocab, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train_log.tsv"
    if log.exists():
        log.unlink()
    if args.init:
        load_checkpoint(args.init, pipe)
        pipe.step_count = 0
    pipe.vocab.save(out / "vocab.txt")
    result = train_loop(pipe, examples, cfg, args.seed, out)
    last = result.records[-1] if result.records else None
    print(f"steps {len(result.records)} final_loss {last.loss:.6f}" if last else "steps 0")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def _print_scores(scores) -> None:
    for key in ("BLEU4", "ROUGEL", "CIDEr"):
        print(f"{key} {scores[key]:.4f}")


def cmd_eval(args) -> int:
    data = read_data_dir(args.data)
    if not data:
        raise FormatError(f"{args.data}: no evaluation examples")
    refs = [[split_words(r) for r in rs] for _, _, rs in data]
    if args.pred:
        preds = dict(read_captions(args.pred))
        missing = [k for k, _, _ in data if k not in preds]
        if missing:
            raise FormatError(f"{args.pred}: no prediction for id {missing[0]}")
        cands = [split_words(preds[k]) for k, _, _ in data]
    else:
        if not (args.config and args.ckpt):
            raise UsageError("eval needs --config and --ckpt (or --pred)")
        _, pipe = _pipeline(args)
        load_checkpoint(args.ckpt, pipe)
        caps = []
        for start in range(0, len(data), 64):
            caps.extend(pipe.captions([v for _, v, _ in data[start:start + 64]]))
        cands = [split_words(c) for c in caps]
    _print_scores(corpus_scores(cands, refs))
    return EXIT_OK


def _read_inputs(paths) -> list[VisualTokens]:
    visuals = []
    for path in paths:
        entries = xtns.load(path)
        feats = entries.get("features")
        if feats is None:
            raise FormatError(f"{path}: missing 'features' entry")
        if feats.ndim == 3:
            if feats.shape[0] == 0:
                raise FormatError(f"{path}: features tensor holds no inputs")
            visuals.extend(VisualTokens(f.astype(np.float64)) for f in feats)
        else:
            visuals.append(load_visual_features(path))
    return visuals


def cmd_infer(args) -> int:
    cfg, pipe = _pipeline(args)
    load_checkpoint(args.ckpt, pipe)
    visuals = _read_inputs(args.input)
    strategy = None
    if args.beam is not None:
        sec = cfg.section("decode")
        strategy = BeamStrategy(args.beam, sec.get("max_len", 16), float(sec.get("alpha", 0.0)))
    for cap in pipe.captions(visuals, strategy):
        print(cap)
    return EXIT_OK


def cmd_synth(args) -> int:
    pairs = make_synthetic_dataset(args.seed, args.n, noise_dims=args.noise_dims)
    write_data_dir(args.out, pairs)
    print(f"wrote {len(pairs)} examples to {args.out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xmodal", description="Modular cross-modal encoder-decoder toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("preprocess", help="build a vocabulary and tokenize a caption corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-freq", type=int, default=1)
    s.add_argument("--max-len", type=int, default=16)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a configured pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init", help="start from this checkpoint (same model config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score captions with BLEU4, ROUGEL and CIDEr")
    s.add_argument("--config")
    s.add_argument("--ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", help="score these id<TAB>caption lines instead of decoding")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="caption feature files")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True, nargs="+")
    s.add_argument("--beam", type=int)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", help="write a shape-world data directory")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-dims", type=int, default=2)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (XmodalError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
