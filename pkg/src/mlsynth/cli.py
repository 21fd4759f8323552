"""Command-line driver.

    mlsynth run --assay pcr --chip 8x9 --mode mls --trace out.jsonl --report out.json
    mlsynth bench --assay pcr --assay ivd --chip 8x9 --chip 7x9
    mlsynth baseline --assay pcr --chip 8x9
"""

import argparse
import json
import sys

from .assay import load_assay
from .baseline import baseline_module_time
from .exceptions import DeadlockError, InvalidConfigError, RecoveryError, SynthesisError
from .grid import new_chip
from .recovery import FaultConfig
from .report import report_tables
from .router import RunOptions, run_assay

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEADLOCK = 3
EXIT_FAILED = 4
EXIT_IO = 5


def chip_dims(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"chip must look like 8x9, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("chip sides must be positive")
    return w, h


def _common(p):
    p.add_argument("--freq", type=float, default=16.0, help="actuation frequency in Hz (default 16)")
    p.add_argument("--mode", choices=("mls", "mmls"), default="mls")
    p.add_argument("--smt", choices=("off", "auto", "on"), default="off",
                   help="SAT escalation: off, auto (wide stages and deadlocks) or on")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="mlsynth", description="Module-less bioassay synthesis")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="synthesize one assay")
    run.add_argument("--assay", required=True, help="built-in name, hard<k>, or JSON path")
    run.add_argument("--chip", type=chip_dims, help="WxH (default: the assay's chip hint)")
    _common(run)
    run.add_argument("--inject-error", metavar="SPEC", default=None,
                     help='faults, e.g. "p=0.005" or "M1@5,M3@20!" (! = permanent)')
    run.add_argument("--trace", metavar="PATH", help="write a JSON Lines trace")
    run.add_argument("--report", metavar="PATH", help="write the JSON report (default: stdout)")
    run.add_argument("--emit-cnf", metavar="PATH", help="write DIMACS of every SAT query")
    run.add_argument("--max-steps", type=int, default=20000)

    bench = sub.add_parser("bench", help="run several assays and print a comparison table")
    bench.add_argument("--assay", action="append", required=True)
    bench.add_argument("--chip", type=chip_dims, action="append",
                       help="repeatable; default: each assay's chip hint")
    _common(bench)
    bench.add_argument("--modes", default="mls,mmls",
                       help="comma-separated columns to run, e.g. mls,mmls,mmls+sat")

    base = sub.add_parser("baseline", help="module-based synthesis time")
    base.add_argument("--assay", required=True)
    base.add_argument("--chip", type=chip_dims)
    return ap


def _chip_for(spec, dims):
    dims = dims or spec.chip_hint
    if dims is None:
        raise InvalidConfigError(f"{spec.name}: no --chip given and no chip hint")
    return dims


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_trace(path, trace):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def cmd_run(args, out):
    spec = load_assay(args.assay)
    w, h = _chip_for(spec, args.chip)
    faults = None
    if args.inject_error:
        faults = FaultConfig.parse(args.inject_error, seed=args.seed)
    opt = RunOptions(mode=args.mode, smt=args.smt, seed=args.seed, faults=faults,
                     emit_cnf=args.emit_cnf, max_steps=args.max_steps)
    rep = run_assay(new_chip(w, h, args.freq), spec, opt)
    if args.trace:
        write_trace(args.trace, rep.trace)
    text = _dump(rep.to_dict())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)
    return EXIT_OK


def cmd_bench(args, out):
    reports = []
    for name in args.assay:
        spec = load_assay(name)
        for dims in args.chip or [None]:
            w, h = _chip_for(spec, dims)
            for col in args.modes.split(","):
                mode, _, sat = col.lower().partition("+")
                opt = RunOptions(mode=mode, smt="on" if sat else args.smt, seed=args.seed)
                reports.append(run_assay(new_chip(w, h, args.freq), spec, opt))
    out.write(report_tables(reports) + "\n")
    return EXIT_OK


def cmd_baseline(args, out):
    spec = load_assay(args.assay)
    out.write(f"{baseline_module_time(spec, _chip_for(spec, args.chip)):.3f}\n")
    return EXIT_OK


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "bench": cmd_bench, "baseline": cmd_baseline}[args.cmd]
    try:
        return handler(args, out)
    except DeadlockError as e:
        print(f"deadlock at step {e.step}: {e} ({', '.join(e.droplets)})", file=sys.stderr)
        return EXIT_DEADLOCK
    except InvalidConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RecoveryError, SynthesisError, LookupError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
