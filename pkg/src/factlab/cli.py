"""Command-line experiment driver.

Subcommands map 1:1 to pipeline stages; `all` runs the whole chain. Exit
codes: 0 success, 1 usage error, 2 stage failure, 3 integrity-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .manifest import ABLATIONS, STAGES, ExperimentManifest, Pipeline, StageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2
EXIT_CHECK = 3

_COMMANDS = {
    "generate": ["generate"],
    "pretrain": ["pretrain"],
    "beam": ["beam"],
    "pool": ["pool"],
    "pairs": ["pairs"],
    "train-rl": ["train-rl"],
    "eval": ["eval-base", "eval"],
    "report": ["report"],
    "all": list(STAGES),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="factlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True, help="experiment manifest (JSON)")
        p.add_argument("--stage", choices=STAGES, help="run only this stage")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the manifest's master seed")
        p.add_argument("--ablation", action="append", choices=ABLATIONS, default=None,
                       help="add an ablation variant (repeatable)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        manifest = ExperimentManifest.load(args.manifest)
    except FileNotFoundError:
        print(f"error: manifest not found: {args.manifest}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: bad manifest: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed_override is not None:
        manifest.master_seed = args.seed_override
    if args.ablation:
        manifest.ablations = tuple(dict.fromkeys(list(manifest.ablations) + args.ablation))

    stages = [args.stage] if args.stage else _COMMANDS[args.command]
    pipe = Pipeline(manifest)
    for stage in stages:
        try:
            pipe.run_stage(stage)
        except StageError as exc:
            if "integrity" in str(exc):
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CHECK
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
