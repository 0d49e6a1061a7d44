"""Command-line entry point: ``qladder <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation. Set ``QLADDER_LOG_LEVEL`` (e.g. INFO, DEBUG) for logs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile

from . import pipeline
from .config import ConfigError, load_config
from .environment import DataError
from .qnet import InvariantError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4
SNAPSHOT_FILE = "config.resolved.json"

log = logging.getLogger("qladder")


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--metric", choices=["xpsnr", "vmaf"])
    common.add_argument("--weights", type=_floats, help="lambda1,lambda2,lambda3")
    common.add_argument("--penalty", choices=["fixed", "history"])
    common.add_argument("--noise", type=_floats, help="noise levels, e.g. 0,0.1,0.2")
    common.add_argument("--out", required=True, help="output directory")

    parser = argparse.ArgumentParser(prog="qladder", description="Per-segment bitrate ladders from a deep Q-network.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--segments", type=int)

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize external measurements")
    p.add_argument("--log", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--bitrate-scale", type=float, dest="bitrate_scale")
    p.add_argument("--time-scale", type=float, dest="time_scale")

    p = sub.add_parser("train-predictors", parents=[common], help="fit bitrate/quality/decoding-time models")
    p.add_argument("--corpus", required=True)
    p.add_argument("--sweep", action="store_true", help="grid-search ensemble size and depth first")

    p = sub.add_parser("train-agent", parents=[common], help="train the Q-network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--episodes", type=int)

    for name, text in (("build", "emit ladders for held-out segments"),
                       ("evaluate", "score all methods against the HLS template"),
                       ("robustness", "noise sweep for the agent and CDBL")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--predictors", required=True)
        p.add_argument("--agent", required=True, action="append" if name == "robustness" else "store",
                       help="checkpoint file" + (" (repeat once per seed)" if name == "robustness" else ""))

    p = sub.add_parser("bd", parents=[common], help="BD metrics between two curve CSVs")
    p.add_argument("--reference", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--column", default="metric", help="value column (default: metric)")
    return parser


def _prepare_dir(path: str) -> None:
    if os.path.exists(path) and not os.path.isdir(path):
        raise ConfigError(f"output path {path} exists and is not a directory")
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None


def write_outputs(out_dir: str, files: dict) -> None:
    """Write each file through a temporary sibling and an atomic rename."""
    _prepare_dir(out_dir)
    for name, content in files.items():
        path = os.path.join(out_dir, name)
        _prepare_dir(os.path.dirname(path))
        data = content.encode("utf-8") if isinstance(content, str) else content
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _read(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def run(args: argparse.Namespace) -> None:
    overrides = {"seed": args.seed, "metric": args.metric, "weights": args.weights,
                 "penalty": args.penalty, "noise": args.noise}
    for key in ("segments", "bitrate_scale", "time_scale"):
        overrides[key] = getattr(args, key, None)
    cfg = load_config(args.config, **overrides)
    if getattr(args, "episodes", None) is not None:
        cfg.dqn = {**cfg.dqn, "episodes": args.episodes}
        cfg.__post_init__()
    _prepare_dir(args.out)

    timings = {}
    cmd = args.command
    if cmd == "synth":
        files = pipeline.synth(cfg)
    elif cmd == "ingest":
        files = pipeline.ingest(cfg, _read(args.log), _read(args.features))
    elif cmd == "train-predictors":
        files, timings = pipeline.train_predictors(cfg, pipeline.load_corpus(args.corpus), args.sweep)
    elif cmd == "train-agent":
        files = pipeline.train_agent(cfg, pipeline.load_corpus(args.corpus))
    elif cmd == "bd":
        files = pipeline.bd_from_csv(_read(args.reference), _read(args.test), args.column)
    else:
        mlog = pipeline.load_corpus(args.corpus)
        preds = pipeline.load_predictors(args.predictors)
        if cmd == "build":
            files, timings = pipeline.build(cfg, mlog, preds, pipeline.load_agent(args.agent))
        elif cmd == "evaluate":
            files = pipeline.evaluate(cfg, mlog, preds, pipeline.load_agent(args.agent))
        else:
            agents = [pipeline.load_agent(p) for p in args.agent]
            files = pipeline.robustness(cfg, mlog, preds, agents)
    files[SNAPSHOT_FILE] = cfg.snapshot()
    write_outputs(args.out, {**files, **timings})
    log.info("%s wrote %d files to %s", cmd, len(files) + len(timings), args.out)


def main(argv=None) -> int:
    level = os.environ.get("QLADDER_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, AssertionError) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DataError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
