"""Command line front end.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
``FRUGALFL_OUT_DIR`` prefixes relative ``--out`` paths.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

from .config import config_from_dict, dump_config, parse_config
from .errors import ConfigError
from .experiment import run
from .report import DEFAULT_BASELINE, compare, comparison_csv, emit, load_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUT_DIR_ENV = "FRUGALFL_OUT_DIR"

log = logging.getLogger("frugalfl")


def _load_config(path: str, seed: int | None = None):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err.strerror}", path=str(p)) from None
    fmt = "json" if p.suffix == ".json" else "toml" if p.suffix == ".toml" else None
    config = parse_config(text, fmt)
    if seed is not None:
        config = config_from_dict({**config.to_dict(), "seed": seed})
    return config


def _output_path(out: str) -> Path:
    p = Path(out)
    base = os.environ.get(OUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    path = _output_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_run(args) -> int:
    config = _load_config(args.config, args.seed)
    report = run(config)
    _write(emit(report, args.format), args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    config = _load_config(args.config)
    sys.stdout.write(dump_config(config) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = [load_report(Path(p).read_text()) for p in args.reports]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = compare(reports, args.baseline)
    for w in caught:
        log.warning("%s", w.message)
    _write(comparison_csv(rows), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frugalfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and emit its report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="tabulate reports against a baseline strategy")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", default=DEFAULT_BASELINE)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a config and print it with defaults resolved")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
