"""Command line entry point: ``feast <subcommand> --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 config error, 3 input error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from feast import __version__
from feast import pipeline as pl
from feast.errors import ConfigError

SUBCOMMANDS = ("digitize", "embed-human", "embed-machine", "combine", "evaluate", "pipeline", "plot")

RUNNERS = {
    "digitize": pl.run_digitize,
    "embed-human": pl.run_embed_human,
    "embed-machine": pl.run_embed_machine,
    "combine": pl.run_combine,
    "evaluate": pl.run_evaluate,
    "plot": pl.run_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feast", description="Wine flavor-embedding pipeline.")
    parser.add_argument("--version", action="version", version=f"feast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        nargs = "+" if name == "pipeline" else None
        p.add_argument("--config", required=True, nargs=nargs,
                       help="JSON config" + (" (several run as a batch)" if nargs else ""))
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(err: BaseException) -> int:
    code = pl.exit_code_for(err)
    print(f"feast: error: {err}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "pipeline":
        if len(args.config) > 1:
            results = pl.run_batch(args.config, args.seed, args.out)
            worst = 0
            for path, err in results:
                if err is None:
                    print(f"{path}: ok")
                else:
                    worst = max(worst, _fail(err))
            return worst
        try:
            cfg = pl.load_config(args.config[0], args.seed, args.out)
            report = pl.run_pipeline(cfg)
        except Exception as exc:  # noqa: BLE001 - mapped onto exit codes
            return _fail(exc)
        print(json.dumps(report["stages"].get("evaluate", {}), sort_keys=True))
        return 0

    cfg = None
    try:
        cfg = pl.load_config(args.config, args.seed, args.out)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        pl.clear_partial(cfg.output_dir)
        result = RUNNERS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001
        if cfg is not None and not isinstance(exc, ConfigError):
            pl.mark_partial(cfg.output_dir, exc)
        return _fail(exc)
    if isinstance(result, Path):
        print(result)
    else:
        print(json.dumps(result, sort_keys=True, default=pl._json_default))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
