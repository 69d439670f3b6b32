"""Command-line interface: ``rnnxfer <stage> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiment import METHODS, Experiment, StageError
from .io import ConfigError, default_config, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="sectioned key-value config file")
    common.add_argument("--system", choices=("cstr", "rlc"), default="rlc",
                        help="defaults to use when no config is given")
    common.add_argument("--seed", type=int, help="overrides the data and training seeds")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rnnxfer", description="Transfer learning of recurrent models by Jacobian feature regression.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="simulate the train/test/transfer/eval datasets")
    sub.add_parser("train", parents=[common], help="fit the nominal model on the training data")
    p = sub.add_parser("adapt", parents=[common], help="adapt the nominal model on the transfer data")
    p.add_argument("--method", choices=METHODS)
    p = sub.add_parser("eval", parents=[common], help="score nominal and adapted models")
    p.add_argument("--method", choices=METHODS)
    p = sub.add_parser("compare", parents=[common], help="run and score several adaptation methods")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p = sub.add_parser("infer", parents=[common], help="predict outputs for an input file")
    p.add_argument("--input", required=True, help="dataset CSV (outputs optional)")
    p.add_argument("--method", default="nominal", choices=("nominal",) + METHODS)
    return parser


def _run(args):
    cfg = load_config(args.config) if args.config else default_config(args.system)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    exp = Experiment(cfg, args.out)
    cmd = args.command
    try:
        with exp.phase(f"stage:{cmd}"):
            if cmd == "generate":
                for path in exp.generate():
                    print(path)
            elif cmd == "train":
                exp.train()
            elif cmd == "adapt":
                adapted = exp.adapt(args.method)
                exp.evaluate_adapted(exp.nominal(), adapted, "transfer")
            elif cmd == "eval":
                exp.eval(args.method)
            elif cmd == "compare":
                exp.compare(args.methods)
            elif cmd == "infer":
                for path in exp.infer(args.input, args.method):
                    print(path)
    except Exception as exc:
        exp.report.notes.append(f"aborted in stage {cmd}: {exc}")
        exp.finish()
        raise StageError(cmd, exc, exp.report) from exc
    report = exp.finish()
    if report.rows:
        print((exp.out / "summary.txt").read_text(), end="")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "rnnxfer: error: a subcommand is required\n")
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        sys.stderr.write(f"rnnxfer: config error: {exc}\n")
        return EXIT_USAGE
    except StageError as exc:
        if isinstance(exc.__cause__, ConfigError):
            sys.stderr.write(f"rnnxfer: config error: {exc.__cause__}\n")
            return EXIT_USAGE
        sys.stderr.write(f"rnnxfer: {exc}\n")
        return EXIT_RUNTIME
    except Exception as exc:
        sys.stderr.write(f"rnnxfer: error: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
