"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical abort.
"""

import argparse
import json
import logging
import os
import sys
from importlib import resources

from .curvature import verify_bound
from .errors import ConfigError, NumericalError
from .experiments import (
    _clean, load_preset, output_dir, read_runs_csv, report, run_feynman, run_preset, run_single, summarize,
)
from .network import KanNetwork
from .targets import get_target, train_test

PRESETS = ("fig1", "fig2", "fig3", "fig4", "fig5", "table1", "appB")


def resolve_config(arg):
    """A path to a JSON file, or the name of a bundled preset."""
    if os.path.exists(arg):
        return arg
    if arg in PRESETS:
        return str(resources.files("curvkan") / "presets" / f"{arg}.json")
    raise ConfigError(f"no config file or preset named {arg!r}")


def _cmd_train(args):
    preset = load_preset(resolve_config(args.config))
    cfg = preset.conditions[0]
    rec = run_single(cfg, args.lam, args.seed)
    out = output_dir(cfg, args.output)
    report([rec], out, summarize(preset, [rec]))
    print(json.dumps(_clean({"test_rmse": rec.test_rmse, "r2": rec.r2,
                             "total_curvature": rec.total_curvature, "output": out})))
    return 2 if rec.aborted else 0


def _cmd_sweep(args):
    preset = load_preset(resolve_config(args.config))
    if preset.mode == "feynman":
        return _cmd_feynman(args, preset)
    records = run_preset(preset, args.jobs)
    summary = summarize(preset, records)
    out = output_dir(preset.name, args.output)
    report(records, out, summary)
    print(out)
    return 0


def _cmd_feynman(args, preset=None):
    preset = preset or load_preset(resolve_config(args.config))
    if preset.mode != "feynman":
        raise ConfigError("feynman needs a preset with mode 'feynman'")
    records, table = run_feynman(preset, args.jobs)
    out = output_dir(preset.name, args.output)
    report(records, out, table)
    print(out)
    return 0


def _cmd_bound_check(args):
    net = KanNetwork.load(args.checkpoint)
    preset = load_preset(resolve_config(args.config))
    cfg = preset.conditions[0]
    seed = cfg.seeds[0] if args.seed is None else args.seed
    tr, _ = train_test(get_target(cfg.target), seed, cfg.n_train, cfg.n_test)
    diag = verify_bound(net, tr.inputs, bins=args.bins)
    text = json.dumps(_clean(diag.to_dict()), indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_report(args):
    path = os.path.join(args.dir, "runs.csv")
    if not os.path.exists(path):
        raise ConfigError(f"{path} not found")
    records = read_runs_csv(path)
    summary = None
    if args.config:
        summary = summarize(load_preset(resolve_config(args.config)), records)
    report(records, args.dir, summary)
    print(args.dir)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="curvkan", description="Curvature-regularized KAN experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one (lambda, seed) cell")
    t.add_argument("config")
    t.add_argument("--lam", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--output")
    t.set_defaults(func=_cmd_train)

    for name, func, help_ in (("sweep", _cmd_sweep, "run every condition of a preset"),
                              ("feynman", _cmd_feynman, "run a Feynman table preset")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--output")
        s.set_defaults(func=func)

    b = sub.add_parser("bound-check", help="verify the curvature bound on a saved network")
    b.add_argument("checkpoint")
    b.add_argument("config")
    b.add_argument("--seed", type=int)
    b.add_argument("--bins", type=int, default=64)
    b.add_argument("--output")
    b.set_defaults(func=_cmd_bound_check)

    r = sub.add_parser("report", help="rewrite summary and artifacts from runs.csv")
    r.add_argument("dir")
    r.add_argument("--config")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
