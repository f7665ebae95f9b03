"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 computation failure.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import ConfigError, parse_config
from .recipes import DESK_DEFAULTS, RECIPE_NAMES, ExperimentRecipe, run_recipe

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

FLAG_KEYS = ("L", "Np", "Nz", "eta", "alpha", "Nr", "steps", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    for key in FLAG_KEYS:
        p.add_argument(f"--{key}", dest=key, default=None, metavar=key.upper())
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key (repeatable)")


def build_parser():
    parser = _Parser(prog="probetrace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-pool", help="write the training pool (optionally with trace estimates)")
    _common(p)
    p.add_argument("--warm", action="store_true", help="compute every Hutchinson estimate")

    p = sub.add_parser("train", help="train probing vectors (full-scale defaults)")
    _common(p)

    p = sub.add_parser("evaluate", help="deviations of trained probes on fresh matrices")
    _common(p)
    p.add_argument("--probes", default=None)

    p = sub.add_parser("hutchinson", help="Hutchinson error versus number of noise vectors")
    _common(p)

    p = sub.add_parser("unbiased", help="bias-corrected expectation of f(trace)")
    _common(p)
    p.add_argument("--probes", default=None)

    p = sub.add_parser("recipe", help="run a named experiment recipe (desk-scale defaults)")
    p.add_argument("name", choices=RECIPE_NAMES)
    _common(p)
    p.add_argument("--probes", default=None)
    return parser


def _flags(args):
    flags = {key: getattr(args, key) for key in FLAG_KEYS}
    for item in args.sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip()] = value.strip()
    if getattr(args, "probes", None):
        flags["probes"] = args.probes
    return flags


def _gen_pool(training, out, warm):
    from .training import make_pool

    os.makedirs(out, exist_ok=True)
    pool = make_pool(training)
    if warm:
        pool.warm()
    pool.write_csv(os.path.join(out, "pool.csv"))
    with open(os.path.join(out, "pool.json"), "w") as fh:
        meta = {k: v for k, v in pool.to_dict().items() if k != "cache"}
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return pool


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = _flags(args)
    out = args.out or os.path.join("runs", args.command if args.command != "recipe" else args.name)

    if args.command == "recipe":
        training, options = parse_config(args.config, flags, defaults=DESK_DEFAULTS)
        manifest = run_recipe(ExperimentRecipe(args.name, training, options, out))
    elif args.command == "gen-pool":
        training, _ = parse_config(args.config, flags)
        pool = _gen_pool(training, out, args.warm)
        print(f"wrote {pool.size} pool entries to {out}")
        return EXIT_OK
    else:
        name = {"train": "train", "evaluate": "evaluate", "hutchinson": "fig3-hutchinson",
                "unbiased": "unbiased"}[args.command]
        nz_list = None
        if args.command == "hutchinson" and flags.get("Nz"):
            nz_list = flags.pop("Nz")   # a comma list of noise-vector counts here
        training, options = parse_config(args.config, flags)
        if nz_list and not options.scan:
            options = dataclasses.replace(options, scan=str(nz_list))
        manifest = run_recipe(ExperimentRecipe(name, training, options, out))
    summary = {k: manifest[k] for k in ("recipe", "status", "matvecs_total", "wall_time_s")}
    summary["results"] = manifest["results"]
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # computation failures
        print(f"computation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
