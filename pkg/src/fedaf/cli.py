"""``fedaf`` command line: run, report, inspect-partition.

Exit status: 0 on success, 1 on a runtime failure, 2 on a bad config or usage.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from . import experiment, report

log = logging.getLogger("fedaf")


def _split_overrides(extra: list[str]) -> list[str]:
    """Turn ``--a.b=1`` / ``--a.b 1`` tokens into ``a.b=1`` strings."""
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise cfgmod.ConfigError(tok, "unrecognized argument (overrides look like --section.key=value)")
        if "=" in tok:
            out.append(tok[2:])
            i += 1
        elif i + 1 < len(extra):
            out.append(f"{tok[2:]}={extra[i + 1]}")
            i += 2
        else:
            raise cfgmod.ConfigError(tok, "override is missing a value")
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedaf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("config")
    run.add_argument("--rounds", type=int, help="shorthand for --federation.rounds")
    run.add_argument("--output", help="shorthand for --output.directory")

    rep = sub.add_parser("report", help="compare finished runs")
    rep.add_argument("runs", nargs="+", help="run directories")
    rep.add_argument("--output", required=True, help="directory for comparison.csv and curves.csv")

    insp = sub.add_parser("inspect-partition", help="print per-client class counts")
    insp.add_argument("config")
    insp.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    return p


def _load(args, extra) -> dict:
    overrides = _split_overrides(extra)
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"federation.rounds={args.rounds}")
    if getattr(args, "output", None) is not None and args.command == "run":
        overrides.append(f"output.directory={args.output}")
    return cfgmod.load(args.config, overrides)


def cmd_run(args, extra) -> int:
    cfg = _load(args, extra)
    directory = experiment.output_directory(cfg)
    result = experiment.run_experiment(cfg, directory)
    print(f"{cfg['federation']['algorithm']}: final accuracy {result.final_accuracy:.4f}, "
          f"best {result.best_accuracy:.4f}; results in {directory}")
    return 0


def cmd_report(args, extra) -> int:
    if extra:
        raise cfgmod.ConfigError(extra[0], "unrecognized argument")
    table = report.write_report(args.runs, args.output)
    print(report.format_table(table))
    return 0


def cmd_inspect(args, extra) -> int:
    cfg = _load(args, extra)
    train, _ = experiment.load_datasets(cfg)
    shards = experiment.partition(cfg, train)
    classes = range(train.num_classes)
    if args.csv:
        print("client," + ",".join(f"class{c}" for c in classes) + ",total")
        for s in shards:
            print(f"{s.client_id}," + ",".join(str(n) for n in s.class_counts) + f",{len(s)}")
        return 0
    width = max(6, len(str(len(train))) + 1)
    print("client " + "".join(f"{c:>{width}}" for c in classes) + f"{'total':>{width + 2}}")
    for s in shards:
        print(f"{s.client_id:>6} " + "".join(f"{n:>{width}}" for n in s.class_counts) + f"{len(s):>{width + 2}}")
    return 0


COMMANDS = {"run": cmd_run, "report": cmd_report, "inspect-partition": cmd_inspect}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse usage errors already exit with 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except report.IncompatibleRuns as exc:
        print(f"report refused: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
