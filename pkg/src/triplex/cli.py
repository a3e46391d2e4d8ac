"""Command line: ``triplex [global flags] <command> [flags]``.

Commands: prepare, train, cv, predict, eval, heatmap.  Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage or input error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, RunConfig, load_config, override
from .data import DataFormatError
from .model import CheckpointError

log = logging.getLogger("triplex")

INPUT_ERRORS = (
    FileNotFoundError,
    NotADirectoryError,
    DataFormatError,
    ConfigError,
    CheckpointError,
    pipeline.GeneMismatchError,
    KeyError,
)


class UsageError(Exception):
    pass


def _common(out_default: str | None) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global flags")
    g.add_argument("--config", help="INI run configuration")
    g.add_argument("--seed", type=int, help="seed for model init, shuffling and splits")
    g.add_argument("--out", default=out_default, help="output directory")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triplex", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("prepare", parents=[_common("prepared")], help="select genes, normalise labels, write features")
    p.add_argument("--spots")
    p.add_argument("--counts")
    p.add_argument("--features", help="directory of precomputed feature files")
    p.add_argument("--images", help="directory of <slide>.ppm images for the toy extractor")
    p.add_argument("--m-keep", type=int)
    p.add_argument("--no-smoothing", action="store_true")

    p = sub.add_parser("train", parents=[_common("run")], help="train one model on all prepared slides")
    p.add_argument("--prepared")

    p = sub.add_parser("cv", parents=[_common("cv")], help="patient-grouped cross-validation")
    p.add_argument("--prepared")
    p.add_argument("--mode", help="lopcv or kfold:k")

    p = sub.add_parser("predict", parents=[_common("predictions")], help="per-spot predictions from a checkpoint")
    p.add_argument("--prepared")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", action="append", help="slide id (repeatable; default all)")

    p = sub.add_parser("eval", parents=[_common("eval")], help="score prediction tables")
    p.add_argument("--prepared")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--ranking", help="genes.csv from cv, for PCC(H)")

    p = sub.add_parser("heatmap", parents=[_common("heatmaps")], help="CSV grid and graymap for one gene")
    p.add_argument("--prepared")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gene", required=True)
    p.add_argument("--slide")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg = override(cfg, section, name, value.strip())
    flags = {
        ("paths", "spots"): getattr(args, "spots", None),
        ("paths", "counts"): getattr(args, "counts", None),
        ("paths", "features"): getattr(args, "features", None),
        ("paths", "images"): getattr(args, "images", None),
        ("paths", "prepared"): getattr(args, "prepared", None),
        ("preprocess", "m_keep"): getattr(args, "m_keep", None),
        ("cv", "mode"): getattr(args, "mode", None),
    }
    for (section, name), value in flags.items():
        if value is not None:
            cfg = override(cfg, section, name, str(value))
    if getattr(args, "no_smoothing", False):
        cfg = override(cfg, "preprocess", "smoothing", "false")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _check_out(out) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise NotADirectoryError(f"output path is not a directory: {path}")
    return path


def run(args) -> int:
    cfg = resolve_config(args)
    out = _check_out(args.out)
    cmd = args.command
    if cmd == "prepare":
        stats = pipeline.prepare(cfg, out)
        print(f"prepared {stats['slides']} slides, {stats['spots']} spots, {stats['genes']} genes -> {out}")
    elif cmd == "train":
        result = pipeline.train(cfg, out)
        print(f"trained {len(result.history)} epochs (best epoch {result.best_epoch}) -> {out / 'model.ckpt'}")
    elif cmd == "cv":
        report = pipeline.cross_validate(cfg, out)
        print(f"pcc_m={report.pcc_m:.4f} pcc_h={report.pcc_h:.4f} mse={report.mse:.4f} mae={report.mae:.4f} -> {out}")
    elif cmd == "predict":
        for path in pipeline.predict(cfg, args.checkpoint, out, args.slide):
            print(path)
    elif cmd == "eval":
        report = pipeline.evaluate(cfg, args.predictions, out, args.ranking)
        print(f"pcc_m={report.pcc_m:.4f} pcc_h={report.pcc_h:.4f} mse={report.mse:.4f} mae={report.mae:.4f} -> {out}")
    elif cmd == "heatmap":
        for path in pipeline.heatmap(cfg, args.predictions, args.gene, out, args.slide).values():
            print(path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=1):
            return run(args)
    except UsageError as exc:
        parser.error(str(exc))
    except INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"triplex: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"triplex: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
