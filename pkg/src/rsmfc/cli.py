"""Command line entry point.

    rsmfc run <config-file> [--out DIR] [--seed N] [--threads N] [--paper-exact]
    rsmfc check <suite> [--config FILE] [--out DIR] [--seed N] [--threads N]

Exit status: 0 when every suite passes, 1 when one fails, 2 for usage,
configuration or output-directory errors. The seed is taken from ``--seed``,
then ``RSMFC_SEED``, then the config file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import replace

from .config import SUITES, ExperimentConfig, load_config
from .errors import ConfigError
from .lq_model import LqParams
from .runner import run

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# stress parameters for `check`; paper-repro keeps the reference constants
CHECK_MODEL = LqParams(a=0.5, b=1.0, sigma=0.3, theta=0.2)


def _seed(value: str, source: str) -> int:
    try:
        seed = int(value, 0)
    except ValueError:
        raise ConfigError(f"seed must be an integer, got {value!r}", key=source) from None
    if not 0 <= seed < 2**64:
        raise ConfigError("seed must lie in [0, 2**64)", key=source)
    return seed


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    env = os.environ.get("RSMFC_SEED")
    if args.seed is not None:
        cfg = replace(cfg, seed=_seed(args.seed, "--seed"))
    elif env not in (None, ""):
        cfg = replace(cfg, seed=_seed(env, "RSMFC_SEED"))
    return cfg


def check_config(suite: str) -> ExperimentConfig:
    """Built-in configuration used by ``rsmfc check`` when no file is given."""
    if suite == "paper-repro":
        return ExperimentConfig(suites=(suite,))
    return ExperimentConfig(model=CHECK_MODEL, n_steps=100, suites=(suite,))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsmfc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", help="master seed (overrides RSMFC_SEED and the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not change)")
        p.add_argument("-v", "--verbose", action="store_true")

    r = sub.add_parser("run", help="run the suites listed in a config file")
    r.add_argument("config", help="TOML config file")
    r.add_argument("--paper-exact", action="store_true",
                   help="run the reproduction suite at dt = 1e-6")
    common(r)
    c = sub.add_parser("check", help="run one verification suite")
    c.add_argument("suite", choices=SUITES)
    c.add_argument("--config", help="TOML config file (default: built-in check config)")
    common(c)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
        elif args.config:
            cfg = replace(load_config(args.config), suites=(args.suite,))
        else:
            cfg = check_config(args.suite)
        cfg = _apply_overrides(cfg, args)
    except ConfigError as exc:
        print(f"rsmfc: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    paper_exact = getattr(args, "paper_exact", False)
    try:
        if args.command == "check" and args.out is None:
            with tempfile.TemporaryDirectory(prefix="rsmfc-check-") as tmp:
                manifest = run(cfg, out=tmp, threads=args.threads, echo=print)
        else:
            manifest = run(cfg, out=args.out, threads=args.threads, paper_exact=paper_exact,
                           echo=print)
            print(f"outputs in {manifest.path.parent}")
    except OSError as exc:
        print(f"rsmfc: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if manifest.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
