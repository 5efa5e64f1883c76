"""Command-line entry point: ``icontrast <subcommand> ...``.

Exit codes: 0 success, 1 usage error (help printed to stderr), 2 runtime error.
Logs go to stderr; machine-readable results go to files or stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("icontrast")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").replace(":", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers like 14x14 or 5,25, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def build_parser() -> _Parser:
    p = _Parser(prog="icontrast", description="Agent-centric contrastive ViT training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-data", help="render a synthetic scene dataset (ICDS file)")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0, help="base seed (scene i uses (seed, i))")
    g.add_argument("--out", required=True, help="output .icds path")
    g.add_argument("--hard", action="store_true", help="distractors share the agent's color")

    t = sub.add_parser("train", help="train a ViT with task + lambda * ICon loss")
    t.add_argument("--config", help="JSON config mirroring TrainConfig field names")
    t.add_argument("--out-checkpoint", help="checkpoint path (overrides config)")
    t.add_argument("--out-metrics", help="JSON-lines metric log path (overrides config)")
    t.add_argument("--dataset", help="training dataset (overrides config)")
    t.add_argument("--epochs", type=int, help="overrides config")
    t.add_argument("--seed", type=int, help="overrides config")
    t.add_argument("--lam", type=float, help="contrastive weight lambda (overrides config)")
    t.add_argument("--beta", type=float, help="token-mask threshold (overrides config)")
    t.add_argument("--lr", type=float, help="learning rate (overrides config)")
    t.add_argument("--batch-size", type=int, help="overrides config")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="JSON output path (stdout if omitted)")
    e.add_argument("--n", type=int, help="number of samples (default: all)")

    b = sub.add_parser("bench-fps", help="time FPS against random key sampling")
    b.add_argument("--grid", type=_pair, default=(14, 14), help="token grid, e.g. 14x14")
    b.add_argument("--keys", type=_pair, nargs="+", default=[(5, 25), (10, 50), (20, 100)],
                   help="agent,env key counts, e.g. 5,25 10,50 20,100")
    b.add_argument("--reps", type=int, default=50)
    b.add_argument("--out", help="JSON output path (stdout if omitted)")

    a = sub.add_parser("export-attn", help="write a [CLS] attention heatmap (.f32 + .pgm)")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--image-index", type=int, default=0)
    a.add_argument("--layer", type=int, help="1-based encoder layer (default: final)")
    a.add_argument("--out", required=True, help="output prefix; writes <out>.f32 and <out>.pgm")

    sub.add_parser("selftest", help="run built-in oracle and invariant checks")
    return p


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_gen_data(args) -> int:
    from .synthworld import SceneConfig, make_dataset

    if args.n < 0:
        raise UsageError("--n must be non-negative", args._parser)
    make_dataset(args.n, SceneConfig(hard=args.hard), args.seed, args.out)
    log.info("wrote %d scenes to %s", args.n, args.out)
    return EXIT_OK


def resolve_train_config(args):
    """Flags override config-file values, which override built-in defaults."""
    from .trainrun import TrainConfig, load_config

    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}", args._parser)
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig()
    overrides = {
        "checkpoint": args.out_checkpoint, "metrics": args.out_metrics, "dataset": args.dataset,
        "epochs": args.epochs, "seed": args.seed, "lam": args.lam, "beta": args.beta,
        "lr": args.lr, "batch_size": args.batch_size,
    }
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _cmd_train(args) -> int:
    from .trainrun import train

    cfg = resolve_train_config(args)
    if not cfg.dataset:
        raise UsageError("no dataset: pass --dataset or set it in the config", args._parser)
    train(cfg)
    log.info("training done: checkpoint=%s metrics=%s", cfg.checkpoint or "-", cfg.metrics or "-")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .synthworld import load_dataset
    from .trainrun import evaluate, load_model

    params, cfg = load_model(args.checkpoint)
    data = load_dataset(args.dataset)
    _emit(evaluate(params, cfg, data, args.n), args.out)
    return EXIT_OK


def _cmd_bench(args) -> int:
    from .trainrun import bench_sampling, growth_ratio

    rows = bench_sampling(args.grid, args.keys, args.reps)
    result = {"grid": list(args.grid), "rows": rows}
    if len(args.keys) >= 2:
        small, large = args.keys[0], args.keys[-1]
        result["growth_ratio"] = {s: growth_ratio(rows, s, small, large) for s in ("fps", "random")}
    _emit(result, args.out)
    return EXIT_OK


def _cmd_export(args) -> int:
    from .synthworld import load_dataset
    from .trainrun import export_attention

    data = load_dataset(args.dataset)
    if not 0 <= args.image_index < len(data):
        raise UsageError(f"--image-index {args.image_index} out of range for {len(data)} scenes",
                         args._parser)
    raw, pgm = export_attention(args.checkpoint, data.images[args.image_index], args.layer, args.out)
    log.info("wrote %s and %s", raw, pgm)
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest()
    return EXIT_OK if not failures else EXIT_RUNTIME


_COMMANDS = {
    "gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval,
    "bench-fps": _cmd_bench, "export-attn": _cmd_export, "selftest": _cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        exc.parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    args._parser = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        exc.parser.print_help(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
