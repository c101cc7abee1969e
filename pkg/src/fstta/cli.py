"""Command line: ``fstta {pretrain,run,forgetting,compare}``.

Every ``RunConfig`` field is also a flag (``--stream-count 50``); flags win
over ``--config`` file values, which win over defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from . import harness
from .errors import ConfigError, DataValidityError, NumericalError, SchemaError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_TRAINING = 5


def _add_config_flags(p):
    p.add_argument("--config", help="flat 'key = value' config file")
    for f in fields(harness.RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.type.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="fstta")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("pretrain", "train the policy and save it"),
                       ("run", "strategy x stream x shuffle sweep"),
                       ("forgetting", "four-condition seen/unseen protocol")):
        _add_config_flags(sub.add_parser(name, help=text))
    cmp = sub.add_parser("compare", help="merge results files into one table")
    cmp.add_argument("files", nargs="+")
    cmp.add_argument("--out", help="also write the merged table as CSV")
    return parser


def config_from_args(args):
    mapping = harness.read_config_file(args.config) if args.config else {}
    for f in fields(harness.RunConfig):
        value = getattr(args, f.name)
        if value is not None:
            mapping[f.name] = value
    return harness.RunConfig.from_mapping(mapping)


def _dispatch(args):
    if args.command == "compare":
        text, _ = harness.cmd_compare(args.files, args.out)
        sys.stdout.write(text)
        return
    cfg = config_from_args(args)
    print("# config " + json.dumps(cfg.to_dict(), sort_keys=True))
    if args.command == "pretrain":
        _, report = harness.cmd_pretrain(cfg)
        print(f"saved {report['params_file']}  heldout_accuracy={report['heldout_accuracy']:.4f}")
    elif args.command == "run":
        _, aggs = harness.cmd_run(cfg)
        for a in aggs:
            print(f"{a['strategy']:<16}{a['stream']:<8}SR {a['SR']:6.2f} +- {a['SR_std']:5.2f}  SPL {a['SPL']:6.2f}")
    elif args.command == "forgetting":
        for r in harness.cmd_forgetting(cfg):
            print(f"{r['condition']:<6}SR {r['SR']:6.2f} +- {r['SR_std']:5.2f}  SPL {r['SPL']:6.2f}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataValidityError, SchemaError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK
