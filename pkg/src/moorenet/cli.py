"""Command line entry point: one subcommand per pipeline stage plus ``run``.

Exit status is 0 on success, 2 for a bad config or usage, and ``10 + i`` when
stage ``i`` fails (see ``pipeline.EXIT_CODES``).
"""

import argparse
import json
import logging
import sys

from .config import load_config, preset
from .pipeline import CONFIG_ERROR, STAGES, Pipeline, StageError, summary


def _parser():
    ap = argparse.ArgumentParser(prog="moorenet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="experiment config JSON")
        src.add_argument("--preset", metavar="NAME", help="built-in config, e.g. amnesia, blind-8-4, tomita3")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", metavar="DIR", required=True, help="artifact directory")

    for stage in STAGES:
        common(sub.add_parser(stage, help=f"run the {stage} stage"))
    common(sub.add_parser("run", help="run every stage in order and write the report"))
    common(sub.add_parser("report", help="rewrite report.json and report.md from existing artifacts"))
    show = sub.add_parser("show-config", help="print a preset config as JSON")
    show.add_argument("name")
    show.add_argument("--seed", type=int)
    return ap


def _config(args):
    cfg = load_config(args.config) if args.config else preset(args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")

    if args.command == "show-config":
        try:
            cfg = preset(args.name)
        except (ValueError, IndexError) as exc:
            print(f"error: bad preset {args.name!r}: {exc}", file=sys.stderr)
            return CONFIG_ERROR
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        sys.stdout.write(cfg.to_json())
        return 0

    try:
        cfg = _config(args)
        pipe = Pipeline(cfg, args.out)
    except (OSError, ValueError, TypeError, KeyError, IndexError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return CONFIG_ERROR

    try:
        if args.command == "run":
            doc = pipe.run()
            print(json.dumps(summary(doc), sort_keys=True))
        elif args.command == "report":
            pipe.report()
            print(open(f"{args.out}/report.md").read(), end="")
        else:
            print(json.dumps(pipe.run_stage(args.command), sort_keys=True))
    except StageError as exc:
        print(f"error: stage {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
