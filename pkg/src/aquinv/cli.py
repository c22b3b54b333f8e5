"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as pl
from .config import apply_overrides, load_config
from .errors import AquinvError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

VERBS = {
    "synth-ti": "synthesise the two-facies training-image volume",
    "extract-patches": "cut CAAE training/test patches from the volume",
    "train-caae": "train the adversarial autoencoder",
    "make-truth": "build the truth field, source and observations",
    "gen-dataset": "simulate prior realisations for the surrogate",
    "train-surrogate": "train the DenseED surrogate",
    "invert": "run ESMDA with the PDE or surrogate forward model",
    "report": "write posterior tables and field slices",
}


def _add_globals(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default("desk"),
                        help="named scale (desk, paper) or path to a JSON config")
    parser.add_argument("--seed", type=int, default=default(None), help="base seed for every stage")
    parser.add_argument("--out", default=default("runs/desk"), help="run directory")
    parser.add_argument("--threads", type=int, default=default(None), help="worker processes / torch threads")
    parser.add_argument("--set", action="append", default=default([]), metavar="KEY=VALUE",
                        help="override a config field, e.g. esmda.n_e=64 (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser():
    parser = argparse.ArgumentParser(prog="aquinv", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, text in VERBS.items():
        p = sub.add_parser(verb, help=text, description=text)
        _add_globals(p, suppress=True)
        if verb == "invert":
            p.add_argument("--forward", choices=pl.FORWARDS, default="surrogate")
    return parser


def load(args):
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def dispatch(args):
    if args.verb == "report":
        for path in pl.report(args.out):
            print(path)
        return
    cfg = load(args)
    stage = {
        "synth-ti": pl.synth_ti,
        "extract-patches": pl.extract,
        "train-caae": pl.train_caae_stage,
        "make-truth": pl.make_truth,
        "gen-dataset": pl.generate_dataset,
        "train-surrogate": pl.train_surrogate_stage,
    }.get(args.verb)
    if stage is not None:
        stage(cfg, args.out)
        print(f"{args.verb}: done ({args.out})")
        return
    _, summary = pl.invert(cfg, args.out, args.forward)
    print(json.dumps(summary, indent=2))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except AquinvError as exc:
        code = exc.exit_code if exc.exit_code in (EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING) else EXIT_NUMERIC
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
