"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .discovery import DiscoveryError
from .nn.data import DataError
from .nn.train import DivergenceError
from .profiler import FakeTimer
from .saliency import METHODS

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("-c", "--config", help="key = value config file (INI sections)")
    p.add_argument("-o", "--out", default="runs/default", help="artifact directory (default: %(default)s)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --set pipeline.seed=N")
    p.add_argument("-v", "--verbose", action="store_true")


def _fake_timer(text):
    try:
        FakeTimer.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stairnet", description="Latency-aware student discovery pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the teacher")
    _common(p)
    p = sub.add_parser("prune", help="prune the teacher and sample the pruning curve")
    _common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--samples", type=int, help="number of specs sampled from the trace")
    p = sub.add_parser("profile", help="latency sweeps and optimal points for the teacher")
    _common(p)
    p.add_argument("--fake-timer", type=_fake_timer, metavar="SPEC",
                   help="synthetic clock, e.g. ceil:8, ceil:8:500, linear:100, const:1000")
    p.add_argument("--cache-dir", help="profile cache (default: OUT/cache)")
    p = sub.add_parser("discover", help="snap Fisher samples to optimal points")
    _common(p)
    p = sub.add_parser("distill", help="train discovered students with attention transfer")
    _common(p)
    p.add_argument("--student", type=int, help="only this student index")
    p.add_argument("--beta", type=float, help="attention weight (0 trains from scratch)")
    p = sub.add_parser("report", help="measure finished models and write report.csv")
    _common(p)
    p.add_argument("--fake-timer", type=_fake_timer, metavar="SPEC",
                   help="synthetic clock for the latency column")
    p = sub.add_parser("pipeline", help="train, prune, profile, discover, distill and report")
    _common(p)
    p.add_argument("--fake-timer", type=_fake_timer, metavar="SPEC",
                   help="synthetic clock for profile and report (see `profile --help`)")
    p.add_argument("--cache-dir", help="profile cache (default: OUT/cache)")
    return parser


def _config(args) -> pipeline.PipelineConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"pipeline.seed={args.seed}")
    if getattr(args, "fake_timer", None):
        overrides.append(f"profile.fake_timer={args.fake_timer}")
    if getattr(args, "samples", None) is not None:
        overrides.append(f"prune.samples={args.samples}")
    if getattr(args, "beta", None) is not None:
        overrides.append(f"distill.beta={args.beta}")
    return pipeline.PipelineConfig.load(args.config, overrides)


def run(args) -> None:
    cfg = _config(args)
    out = args.out
    if args.command == "train":
        print(pipeline.cmd_train(cfg, out))
    elif args.command == "prune":
        print(pipeline.cmd_prune(cfg, out, args.method))
    elif args.command == "profile":
        prof, hit = pipeline.cmd_profile(cfg, out, args.cache_dir)
        print(f"{'cache hit' if hit else 'profiled'}: {len(prof.profiles)} layers")
        for layer, pts in sorted(prof.point_sets().items()):
            print(f"  layer {layer}: {list(pts)}")
    elif args.command == "discover":
        for j, s in enumerate(pipeline.cmd_discover(cfg, out)):
            pairs = ", ".join(f"{c.fisher_width}->{c.chosen_width}" for c in s.provenance)
            print(f"student-{j}: {pairs}")
    elif args.command == "distill":
        for path in pipeline.cmd_distill(cfg, out, args.student):
            print(path)
    elif args.command == "report":
        print(pipeline.cmd_report(cfg, out))
    elif args.command == "pipeline":
        print(pipeline.cmd_pipeline(cfg, out, args.cache_dir))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (pipeline.ConfigError, pipeline.BusyError) as exc:
        print(f"stairnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DiscoveryError, FileNotFoundError) as exc:
        print(f"stairnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"stairnet: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
