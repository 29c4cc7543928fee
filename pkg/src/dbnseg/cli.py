"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``infer``, ``gradcheck``.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from .norm import UnseenDomainWarning

PALETTE = np.array([(0, 0, 0), (230, 25, 75), (60, 180, 75), (0, 130, 200)], dtype=np.uint8)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def colorize(mask: np.ndarray) -> np.ndarray:
    """``[H, W]`` class ids to ``[3, H, W]`` floats; ids wrap modulo the palette."""
    rgb = PALETTE[np.asarray(mask) % len(PALETTE)]
    return rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def _scales(text: str) -> tuple:
    try:
        values = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scale list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty scale list")
    return values


def build_parser() -> argparse.ArgumentParser:
    from .train import TrainConfig

    parser = _Parser(prog="dbnseg", description="Domain-aware semantic segmentation on synthetic shape scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--per-domain", type=int, default=48)
    p.add_argument("--val-per-domain", type=int, default=None)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat 'key = value' file")
    for f in fields(TrainConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None, metavar="VALUE")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scales", type=_scales, default=(0.5, 1.0))
    p.add_argument("--stats", choices=("running", "batch"), default="running")
    p.add_argument("--split", default="val")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--report", default="report.csv")

    p = sub.add_parser("infer", help="segment one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--domain", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", type=_scales, default=None)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def cmd_gen_data(args) -> int:
    from .data import generate_domain_dataset

    m = generate_domain_dataset(args.out, args.seed, args.per_domain, args.domains, args.size, args.val_per_domain)
    print(f"wrote {sum(sum(c) for c in m.counts.values())} samples over {m.num_domains} domains to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import parse_key_values
    from .train import TrainConfig, train_from_directory

    values = parse_key_values(Path(args.config).read_text()) if args.config else {}
    for f in fields(TrainConfig):
        flag = getattr(args, f"cfg_{f.name}")
        if flag is not None:
            values[f.name] = flag
    try:
        config = TrainConfig.from_mapping(values)
    except (KeyError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.dumps())
    result = train_from_directory(config, args.data, out)
    print(result.metrics_csv(), end="")
    best = "nan" if result.best_miou is None else f"{result.best_miou:.6f}"
    print(f"best val mIoU {best} at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import DatasetManifest, load_split
    from .train import evaluate, load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    manifest = DatasetManifest.load(args.data)
    dataset = load_split(args.data, args.split, manifest)
    settings = [tuple(args.scales)] + ([(1.0,)] if tuple(args.scales) != (1.0,) else [])
    modes = [args.stats, "batch" if args.stats == "running" else "running"]
    header = ["scales", "stats", "domain", "miou"] + [f"iou_{n}" for n in manifest.class_names]
    rows = []
    for scales in settings:
        for stats in modes:
            report = evaluate(model, dataset, scales, stats, args.batch_size, manifest.domain_names)
            print(report.format())
            rows.extend(report.rows())
    with open(args.report, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    print(f"report written to {args.report}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data import read_ppm, write_ppm
    from .train import load_checkpoint

    model, config = load_checkpoint(args.ckpt)
    image = read_ppm(args.image)
    scales = args.scales or (config.scales_train if config else (0.5, 1.0))
    if not 0 <= args.domain < model.config.num_domains:
        raise UsageError(f"--domain must be in [0, {model.config.num_domains})")
    h, w = image.shape[1:]
    ph, pw = h + h % 2, w + w % 2
    padded = np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)), mode="edge")
    pred = model.predict(padded[None], args.domain, scales)[0, :h, :w]
    colors = colorize(pred)
    write_ppm(args.out, colors)
    blend = 0.5 * image + 0.5 * colors
    out = Path(args.out)
    overlay = out.with_name(out.stem + "_overlay" + out.suffix)
    write_ppm(overlay, np.concatenate([image, blend], axis=2))
    print(f"mask written to {out}, overlay to {overlay}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .suite import format_table, run_suite

    rows = run_suite(args.seeds)
    print(format_table(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "dbnseg: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        # the norm layers also log these, once per layer and domain
        warnings.simplefilter("ignore", UnseenDomainWarning)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"dbnseg: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


run_cli = main


if __name__ == "__main__":
    sys.exit(main())
