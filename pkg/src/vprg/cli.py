"""Command-line entry point: generate, train, eval, inspect.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ENV_PREFIX, TrainConfig, load_config, save_config
from .data import SyntheticSpec, generate_synthetic_corpus, load_corpus, save_corpus, spec_to_json
from .errors import FormatError, InvalidArgumentError, NonFiniteLossError, ParseError
from .evaluation import emit_report, evaluate, ground, render_table, retrieve
from .trainer import load_checkpoint, restore, train_to_end

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

ENV_HELP = (f"Every training option can also be set through an environment variable named "
            f"{ENV_PREFIX}<OPTION> in upper case, e.g. {ENV_PREFIX}EPOCHS=50 or {ENV_PREFIX}BASE_LR=0.001. "
            f"Precedence: --set > environment > --config file > defaults.")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vprg", description="Paragraph-to-video retrieval with weakly supervised grounding.",
                     epilog=ENV_HELP)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a planted-signal synthetic corpus")
    g.add_argument("--videos", type=int, default=8)
    g.add_argument("--segments", type=int, default=16)
    g.add_argument("--sentences", type=int, default=3)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--snr", type=float, default=SyntheticSpec.snr)
    g.add_argument("--min-words", type=int, default=SyntheticSpec.min_words)
    g.add_argument("--max-words", type=int, default=SyntheticSpec.max_words)
    g.add_argument("--alternatives", type=int, default=SyntheticSpec.alternatives,
                   help="word alternatives per sentence slot (0 draws unrelated sentences)")
    g.add_argument("--distractor", type=float, default=SyntheticSpec.distractor)
    g.add_argument("--frames-per-segment", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="train on a corpus directory", epilog=ENV_HELP)
    t.add_argument("--corpus", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--config", type=Path, help="key = value file mirroring the training options")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one training option (repeatable)")

    e = sub.add_parser("eval", help="retrieve and ground every paragraph of a corpus")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--corpus", required=True, type=Path)
    e.add_argument("--k", type=_int_list, default=(10, 100))
    e.add_argument("--iou", type=_float_list, default=(0.3, 0.5, 0.7))
    e.add_argument("--report", type=Path, help="directory for metrics.json and report.md")

    i = sub.add_parser("inspect", help="dump score-map heatmaps for one paragraph")
    i.add_argument("--checkpoint", required=True, type=Path)
    i.add_argument("--corpus", required=True, type=Path)
    i.add_argument("--paragraph", help="paragraph id (default: first paragraph)")
    i.add_argument("--video", help="video to ground in (default: best retrieved video)")
    i.add_argument("--out", required=True, type=Path)
    return parser


def _overrides(pairs):
    from .config import parse_config_text

    try:
        return parse_config_text("\n".join(pairs))
    except ParseError as exc:
        raise UsageError(f"bad --set value: {exc}") from None


def cmd_generate(args) -> int:
    spec = SyntheticSpec(n_videos=args.videos, n_segments=args.segments, n_sentences=args.sentences,
                         dim=args.dim, snr=args.snr, min_words=args.min_words, max_words=args.max_words,
                         alternatives=args.alternatives, distractor=args.distractor,
                         frames_per_segment=args.frames_per_segment, seed=args.seed)
    syn = generate_synthetic_corpus(spec)
    save_corpus(syn.corpus, args.out)
    (args.out / "synthetic.json").write_text(spec_to_json(spec) + "\n", encoding="utf-8")
    print(f"wrote {len(syn.corpus.videos)} videos to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, **_overrides(args.set))
    corpus = load_corpus(args.corpus, num_segments=cfg.num_segments, redact_intervals=True)
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "config.txt")
    ckpt = train_to_end(corpus, cfg, args.out)
    print(f"epoch {ckpt.epoch} total {ckpt.metrics['total']:.6f} -> {args.out / 'final.ckpt'}")
    return EXIT_OK


def _load(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg: TrainConfig = ckpt.train_config()
    corpus = load_corpus(args.corpus, num_segments=cfg.num_segments)
    return ckpt, restore(ckpt), corpus


def cmd_eval(args) -> int:
    ckpt, model, corpus = _load(args)
    result = evaluate(model, corpus, args.k, args.iou)
    print(render_table(result.values, args.k, args.iou, label=corpus.name), end="")
    print(json.dumps(result.retrieval, sort_keys=True))
    if args.report is not None:
        emit_report(result.values, args.report, dataset=corpus.name, checkpoint=str(args.checkpoint),
                    ks=args.k, ious=args.iou, retrieval=result.retrieval)
    return EXIT_OK


def cmd_inspect(args) -> int:
    _, model, corpus = _load(args)
    paragraphs = {p.paragraph_id: p for p in corpus.paragraphs}
    if args.paragraph is None:
        paragraph = corpus.paragraphs[0]
    elif args.paragraph in paragraphs:
        paragraph = paragraphs[args.paragraph]
    else:
        raise InvalidArgumentError(f"unknown paragraph {args.paragraph!r}")
    video_id = args.video or retrieve(paragraph, corpus, model).video_ids[0]
    video = corpus.video(video_id)
    maps = model.score_maps(paragraph.sentences, video.features).numpy()
    pred = ground(paragraph, video, model)
    stem = f"{paragraph.paragraph_id}_{video_id}"
    from .evaluation import save_heatmaps

    args.out.mkdir(parents=True, exist_ok=True)
    path = save_heatmaps(maps, args.out / f"{stem}.png")
    np.save(args.out / f"{stem}.npy", maps)
    for m, (cell, iv) in enumerate(zip(pred.moments, pred.intervals)):
        print(f"sentence {m + 1}: cell ({cell.start}, {cell.end}) -> [{iv.t_start:.2f}, {iv.t_end:.2f})")
    print(f"heatmaps -> {path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ParseError, InvalidArgumentError, NonFiniteLossError,
            FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
