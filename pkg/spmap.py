"""
spmap: multi-layer spherical projection codec and evaluation harness.

    python spmap.py encode fixture:sphere --res 256x512 --layers 4 -o sphere.spm
    python spmap.py roundtrip fixture:torus --res 128 --out runs/torus
    python spmap.py sweep desk --workers 4 --out runs/sweep
"""
import argparse
import logging
import sys

import config
import db
from tools import COMMANDS_SCHEMA, COMMON_OPTIONS, EXIT_OK, execute_command

log = logging.getLogger("spmap")


def setup_logging(level: str = config.SPMAP_LOG_LEVEL) -> None:
    logging.basicConfig(
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        level=getattr(logging, str(level).upper(), logging.INFO),
        datefmt="%H:%M:%S",
        stream=sys.stderr,
    )
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("trimesh").setLevel(logging.WARNING)


def _add_argument(parser: argparse.ArgumentParser, spec: dict) -> None:
    spec = dict(spec)
    flags = spec.pop("flags")
    parser.add_argument(*flags, **spec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spmap", description="Spherical projection map codec and evaluation harness.")
    parser.add_argument("--log-level", default=None, help="logging level (env SPMAP_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS_SCHEMA:
        p = sub.add_parser(command["name"], help=command["description"], description=command["description"])
        for spec in command["arguments"]:
            _add_argument(p, spec)
        for name in command["options"]:
            _add_argument(p, COMMON_OPTIONS[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or config.SPMAP_LOG_LEVEL)
    db.init_db()

    arguments = {k: v for k, v in vars(args).items() if k not in ("command", "log_level")}
    log.info("Running %s", args.command)
    code, output = execute_command(args.command, arguments)
    if code == EXIT_OK:
        print(output)
    else:
        print(f"error: {output}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
