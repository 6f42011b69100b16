"""Command-line interface.

Subcommands: synth, encode, train, eval, gradcheck, mask-dump. Every
subcommand accepts --config <json> plus repeated --set key=value dotted
overrides. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage -> 1
        raise UsageError(f"{self.prog}: {message}")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file (defaults used when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path config override")


def _load_config(args):
    from .config import Config, apply_overrides
    cfg = Config.load(args.config) if args.config else Config()
    return apply_overrides(cfg, args.overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="evsign",
                     description="Event-stream sign recognition/translation "
                                 "pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p_synth = sub.add_parser("synth", help="generate the synthetic corpus")
    _add_config_args(p_synth)
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override config.seed for generation")

    p_encode = sub.add_parser("encode", help="event file -> voxel container")
    _add_config_args(p_encode)
    p_encode.add_argument("--input", required=True)
    p_encode.add_argument("--output", required=True)

    p_train = sub.add_parser("train", help="train per config.protocol")
    _add_config_args(p_train)
    p_train.add_argument("--resume", type=str, default=None,
                         help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="score a checkpoint on a split")
    _add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="dev")
    p_eval.add_argument("--out", default=None)

    p_grad = sub.add_parser("gradcheck", help="finite-difference suites")
    _add_config_args(p_grad)

    p_mask = sub.add_parser("mask-dump",
                            help="attention-gate dump for one clip")
    _add_config_args(p_mask)
    p_mask.add_argument("--checkpoint", required=True)
    p_mask.add_argument("--clip", required=True, help="event file path")
    p_mask.add_argument("--out", required=True,
                        help="output prefix (.evvg and .png are appended)")
    return parser


def cmd_synth(args) -> int:
    from .synth import generate_corpus
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    corpus = generate_corpus(cfg.synth, seed, cfg.corpus_dir)
    n = {name: len(records) for name, records in corpus.splits.items()}
    print(f"corpus written to {corpus.root} "
          f"(train={n['train']} dev={n['dev']} test={n['test']}, "
          f"glosses={len(corpus.gloss_vocab)}, words={len(corpus.word_vocab)})")
    return 0


def cmd_encode(args) -> int:
    from .events import encode_clip, parse_event_file, write_voxel
    cfg = _load_config(args)
    stream = parse_event_file(Path(args.input).read_bytes())
    grid = encode_clip(stream, cfg.segments, cfg.bins)
    Path(args.output).write_bytes(write_voxel(grid))
    print(f"wrote {args.output}: {grid.segments}x{grid.bins}"
          f"x{grid.height}x{grid.width}, {len(stream)} events")
    return 0


def cmd_train(args) -> int:
    from .train import train
    cfg = _load_config(args)
    result = train(cfg, resume=args.resume, log=print)
    print(f"best dev WER {result.best_dev_wer:.4f}; "
          f"checkpoints in {result.out_dir}")
    if result.infeasible_clips:
        print(f"warning: {result.infeasible_clips} clip losses skipped "
              f"(CTC-infeasible)")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint
    cfg = _load_config(args)
    report, _rows = evaluate_checkpoint(cfg, args.checkpoint, args.split,
                                        out_dir=args.out)
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    _load_config(args)  # validates overrides even though suites are fixed
    results = run_all()
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:28s} max_rel_err={r.max_err:.3e} tol={r.tol:.0e} "
              f"[{status}] ({r.seconds:.1f}s)")
        failed |= not r.ok
    return 2 if failed else 0


def cmd_mask_dump(args) -> int:
    from .events import (VoxelGrid, encode_clip, parse_event_file,
                         write_voxel)
    from .model import ClipBatchItem
    from .sparse import sparsify_clip
    from .synth import load_corpus
    from .train import build_model, load_checkpoint
    from . import figures
    cfg = _load_config(args)
    corpus = load_corpus(cfg.corpus_dir)
    model = build_model(cfg, len(corpus.gloss_vocab), len(corpus.word_vocab))
    load_checkpoint(args.checkpoint, model, cfg)
    stream = parse_event_file(Path(args.clip).read_bytes())
    grid = encode_clip(stream, cfg.segments, cfg.bins)
    sp = sparsify_clip(grid)
    chain = model.backbone.trace(sp.coords, sp.shape) if sp.n_active else None
    item = ClipBatchItem(Path(args.clip).stem, sp.coords, sp.features.data,
                         sp.shape, sp.n_batch, [], [], chain)
    model.set_training(False)
    hyp, mask = model.recognize(item)
    if mask is None:
        raise RuntimeError("no attention mask was produced")
    out_prefix = Path(args.out)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    container = VoxelGrid(mask.astype(np.float32)[None, None, :, :])
    Path(str(out_prefix) + ".evvg").write_bytes(write_voxel(container))
    figures.mask_heatmap(mask, str(out_prefix) + ".png")
    names = [corpus.gloss_vocab[g] for g in hyp if 0 <= g < len(corpus.gloss_vocab)]
    print(f"mask {mask.shape[0]}x{mask.shape[1]} -> {out_prefix}.evvg/.png; "
          f"hypothesis: {' '.join(names) if names else '(empty)'}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "mask-dump": cmd_mask_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    if not args.command:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
