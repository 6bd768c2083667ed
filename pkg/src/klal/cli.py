"""``klal`` command line: gen, train, eval, viz, report.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .dataset import TASKS, make_dataset, read_dataset, write_dataset
from .geometry import PatchGrid
from .model import load_checkpoint
from .train import REGIMES, TrainConfig, compare_regimes, evaluate, train
from .viz import SOURCES, HeatmapSpec, heatmap_values, render_overlay, save_image

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _layer(text: str):
    if text == "mean":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer must be an integer or 'mean', got {text!r}") from None


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="klal", description="Synthetic grounding tasks with attention supervision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a train/test dataset pair")
    g.add_argument("--task", required=True, choices=TASKS)
    g.add_argument("--train", type=int, required=True, help="number of training samples")
    g.add_argument("--test", type=int, required=True, help="number of test samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory (gets train/ and test/)")
    g.add_argument("--png", action="store_true", help="also write PNG copies of the images")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--train-data", dest="train_path")
    t.add_argument("--test-data", dest="test_path")
    t.add_argument("--out", dest="checkpoint_dir", help="checkpoint/log directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--base", help="initial checkpoint for the embedding-norm ratio")
    e.add_argument("--report", required=True, help="output report path")

    v = sub.add_parser("viz", help="render a heatmap overlay for one sample")
    v.add_argument("--checkpoint", help="required unless --source gt-map")
    v.add_argument("--data", required=True)
    v.add_argument("--sample", required=True, help="sample id")
    v.add_argument("--source", choices=SOURCES, default="attention")
    v.add_argument("--layer", type=_layer, default="mean")
    v.add_argument("--alpha", type=float, default=0.6)
    v.add_argument("--out", required=True, help=".ppm or .png path")

    r = sub.add_parser("report", help="paired NTP vs NTP+KLAL comparison over seeds")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    r.add_argument("--lambda", dest="lam", type=float)
    r.add_argument("--steps", type=int)
    r.add_argument("--train-data", dest="train_path")
    r.add_argument("--test-data", dest="test_path")
    r.add_argument("--out", required=True, help="output directory")
    return p


def _config(args) -> TrainConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    keys = ("regime", "lam", "seed", "steps", "train_path", "test_path", "checkpoint_dir")
    overrides = {k: getattr(args, k, None) for k in keys}
    try:
        return TrainConfig.from_text(text, **overrides)
    except ValueError as exc:
        raise UsageError(f"klal {args.command}: {exc}") from None


def _need(path: str, what: str) -> None:
    if not path:
        raise UsageError(f"{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_gen(args) -> None:
    if args.train < 0 or args.test < 0:
        raise UsageError("klal gen: sample counts must be non-negative")
    train_set = make_dataset(args.task, args.train, args.seed)
    test_set = make_dataset(args.task, args.test, args.seed, offset=args.train)
    out = Path(args.out)
    write_dataset(train_set, out / "train", png=args.png)
    write_dataset(test_set, out / "test", png=args.png)
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    _need(cfg.train_path, "training data")
    if cfg.eval_every and cfg.test_path:
        _need(cfg.test_path, "test data")
    if not cfg.checkpoint_dir:
        raise UsageError("klal train: --out (or checkpoint_dir) is required")
    res = train(cfg)
    Path(cfg.checkpoint_dir, "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    last = res.log[-1] if res.log else {}
    print(f"trained {cfg.steps} steps ({cfg.regime}, seed {cfg.seed}); final total {last.get('total', float('nan')):.6f}")


def cmd_eval(args) -> None:
    _need(args.checkpoint, "checkpoint")
    _need(args.data, "dataset")
    if args.base:
        _need(args.base, "base checkpoint")
    model = load_checkpoint(args.checkpoint)
    base = load_checkpoint(args.base) if args.base else None
    report = evaluate(model, read_dataset(args.data), base=base)
    Path(args.report).write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")


def cmd_viz(args) -> None:
    try:
        spec = HeatmapSpec(args.source, args.layer, args.alpha, args.out)
    except ValueError as exc:
        raise UsageError(f"klal viz: {exc}") from None
    if args.source != "gt-map" and not args.checkpoint:
        raise UsageError(f"klal viz: --checkpoint is required for --source {args.source}")
    _need(args.data, "dataset")
    samples = {s.id: s for s in read_dataset(args.data)}
    if args.sample not in samples:
        raise KeyError(f"no sample with id {args.sample!r}")
    sample = samples[args.sample]
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    values = heatmap_values(model, sample, spec)
    side = int(round(len(values) ** 0.5))
    grid = PatchGrid(sample.image.width, sample.image.height, sample.image.width // side)
    save_image(render_overlay(sample.image, values, grid, spec), args.out)
    print(f"wrote {args.out}")


def cmd_report(args) -> None:
    args.regime = None
    args.seed = None
    args.checkpoint_dir = str(Path(args.out))
    cfg = _config(args)
    if len(args.seeds) < 3:
        raise UsageError("klal report: at least 3 seeds are required")
    _need(cfg.train_path, "training data")
    _need(cfg.test_path, "test data")
    comparison = compare_regimes(cfg, args.seeds, read_dataset(cfg.train_path), read_dataset(cfg.test_path))
    out = Path(args.out, "comparison.txt")
    out.write_text(comparison.to_text(), encoding="utf-8")
    print(f"wrote {out}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if os.environ.get("KLAL_DEBUG"):
            raise
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
