"""Command-line entry point: ``divem {generate,run,plot,ingest-check}``.

Exit codes: 0 success, 2 configuration error, 3 numerical error,
4 input/output error (including malformed data files).
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from typing import List, Optional

import numpy as np

from ..errors import ConfigError, InvalidModelError, NumericalError, ParseError
from ..schedule import StepError
from . import config as config_mod
from .data import FAMILIES, ingest_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("divem")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--print-schema", action="store_true", help="print the config JSON Schema and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="divem", description="Online and distributed EM experiments.", parents=[common])
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset and its true model")
    g.add_argument("--config", required=False)
    g.add_argument("--seed", type=_u64)
    g.add_argument("--out", required=False)

    r = sub.add_parser("run", parents=[common], help="run the configured experiment")
    r.add_argument("--config", required=False)
    r.add_argument("--seed", type=_u64)
    r.add_argument("--out", required=False)
    r.add_argument("--threads", type=_positive, default=1)

    pl = sub.add_parser("plot", parents=[common], help="render learning curves to SVG")
    pl.add_argument("csv", nargs="*")
    pl.add_argument("--out", required=False, help="output SVG path")
    pl.add_argument("--title", default="")

    ic = sub.add_parser("ingest-check", parents=[common], help="parse a CSV dataset and report its shape")
    ic.add_argument("path", nargs="?")
    ic.add_argument("--family", choices=FAMILIES)
    ic.add_argument("--config")
    return p


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise ConfigError(f"{args.verb}: missing {', '.join(missing)}")


def _dispatch(args) -> int:
    from . import experiments, plot  # deferred: keeps --help fast

    if args.verb == "generate":
        _require(args, "config", "out")
        cfg = config_mod.load_config(args.config, args.seed)
        for path in experiments.generate(cfg, args.out):
            print(path)
    elif args.verb == "run":
        _require(args, "config", "out")
        cfg = config_mod.load_config(args.config, args.seed)
        res = experiments.run(cfg, args.out, threads=args.threads)
        for method in res.repeats[0].finals:
            vals = res.finals(method)
            print(f"{method}: final nll mean {np.mean(vals):.6g} (min {np.min(vals):.6g}, max {np.max(vals):.6g})")
    elif args.verb == "plot":
        _require(args, "out", "csv")
        print(plot.plot(args.csv, args.out, args.title))
    elif args.verb == "ingest-check":
        if args.path is None:
            raise ConfigError("ingest-check: missing the data file path")
        family = args.family
        if family is None and args.config:
            family = config_mod.load_config(args.config)["family"]
        if family is None:
            raise ConfigError("ingest-check: give --family or --config")
        print(ingest_csv(args.path, family).describe())
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    logging.captureWarnings(True)
    if args.print_schema:
        print(config_mod.schema_json())
        return EXIT_OK
    if args.verb is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return _dispatch(args)
    except StepError as exc:
        code = EXIT_NUMERICAL if isinstance(exc.__cause__, (ArithmeticError, InvalidModelError, np.linalg.LinAlgError)) else EXIT_CONFIG
        log.error("%s", exc)
        return code
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, InvalidModelError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, ParseError) as exc:
        log.error("I/O: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
