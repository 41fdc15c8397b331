"""Command-line entry point: ``run``, ``sweep`` and ``reference-pair``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import harness
from .stream import dump_stream, generate


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(args):
    cfg = harness.load_config(args.config)
    over = {}
    if getattr(args, "method", None):
        over["method"] = args.method
    if getattr(args, "droptop", None):
        over["droptop"] = args.droptop
    if getattr(args, "seeds", None):
        over["seeds"] = args.seeds
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    if getattr(args, "dump_masks", False):
        over["dump_masks"] = True
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def _cmd_run(args):
    cfg = _load(args)
    art = harness.run(cfg)
    if cfg.out_dir:
        if args.dump_stream:
            dump_stream(generate(replace(cfg.stream, seed=harness.derive_seed(cfg.seeds[0], "data"))),
                        f"{cfg.out_dir}/stream")
    print(json.dumps(art.aggregate, indent=2, sort_keys=True))
    return 0


def _cmd_sweep(args):
    cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = harness.sweep(cfg, args.axis, values)
    print(f"{args.axis},A_avg_mean,A_avg_stderr,unbiased_A_avg_mean,unbiased_A_avg_stderr")
    for v, a, ase, u, use in rows:
        print(f"{v},{a:.4f},{ase:.4f},{u:.4f},{use:.4f}")
    return 0


def _cmd_pair(args):
    cfg = _load(args)
    report = harness.run_reference_pair(cfg)
    print(json.dumps({"agreement": report.agreement, "per_seed": report.seed_agreements()}, indent=2))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="droptop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every seed of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--method", choices=harness.METHODS)
    r.add_argument("--droptop", choices=harness.DROPTOP_MODES)
    r.add_argument("--seeds", type=_int_list)
    r.add_argument("--out")
    r.add_argument("--dump-masks", action="store_true")
    r.add_argument("--dump-stream", action="store_true", help="write the first seed's stream as raw tensors")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="vary one intensity hyperparameter")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_sweep)

    q = sub.add_parser("reference-pair", help="single-model vs two-model intensity agreement")
    q.add_argument("--config", required=True)
    q.add_argument("--seeds", type=_int_list)
    q.add_argument("--out")
    q.set_defaults(func=_cmd_pair)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
