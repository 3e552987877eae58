"""Command-line entry point: run, sweep, gen-trace, validate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ProgramBinding, SystemConfig, load_config
from .engine import SimulationError, run
from .explorer import (
    FAMILIES, PAIR, SweepSpec, Workload, best_rows, default_workloads, sweep, write_outputs,
)
from .workload import KINDS, ProgramModel, TraceError, dump_trace, generate_trace, load_trace


def _weights(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be comma-separated numbers: {text!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="tilemem", description=__doc__, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--trace", metavar="PATH", action="append", default=[],
                        help="trace file; repeatable, order = program index")
        sp.add_argument("--warmup", choices=("on", "off"), default="on")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--cycles-max", type=int, metavar="N",
                        help="watchdog: cycles without progress before aborting")
        sp.add_argument("--out", metavar="PATH")

    r = sub.add_parser("run", help="simulate one configuration", allow_abbrev=False)
    common(r)
    r.add_argument("--format", choices=("csv", "summary"), default="summary",
                   help="what to print on standard output")

    s = sub.add_parser("sweep", help="explore a configuration family", allow_abbrev=False)
    common(s)
    s.add_argument("--family", choices=FAMILIES, default=PAIR)
    s.add_argument("--weights", type=_weights)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--plot-data", action="store_true")
    s.add_argument("--format", choices=("csv", "summary"), default="summary")

    g = sub.add_parser("gen-trace", help="write a synthetic trace", allow_abbrev=False)
    g.add_argument("--kind", choices=KINDS, default="loop_nest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", metavar="PATH", required=True)
    g.add_argument("--length", type=int, help="data accesses (streaming, pointer_chase)")
    for name, default in (("inst-bytes", 256), ("data-bytes", 2048), ("stride", 4),
                          ("accesses-per-packet", 4), ("use-distance", 2), ("reps", 1),
                          ("inner", 1), ("stage", 0), ("lines", 64)):
        g.add_argument(f"--{name}", type=int, default=default)
    g.add_argument("--store-fraction", type=float, default=0.0)

    v = sub.add_parser("validate", help="check config and trace files", allow_abbrev=False)
    v.add_argument("--config", metavar="PATH")
    v.add_argument("--trace", metavar="PATH", action="append", default=[])
    return p


def _system(args):
    """Configuration with traces bound from --config and/or --trace."""
    cfg = load_config(args.config) if args.config else SystemConfig()
    traces = [load_trace(t) for t in args.trace]
    progs = list(cfg.programs)
    for i, (path, trace) in enumerate(zip(args.trace, traces)):
        if i < len(progs):
            progs[i] = replace(progs[i], trace=trace, trace_path=path)
        else:
            progs.append(ProgramBinding(Path(path).stem, core=i, trace=trace, trace_path=path))
    return cfg.with_programs(progs).validate()


def cmd_run(args):
    cfg = _system(args)
    if not cfg.programs:
        raise ConfigError("nothing to run: give --config with programs or --trace")
    rep = run(cfg, warmup=args.warmup, watchdog=args.cycles_max, label=args.config or "cli")
    csv_text = rep.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    print(csv_text if args.format == "csv" else rep.summary(), end="" if args.format == "csv" else "\n")
    return 0


def cmd_sweep(args):
    if not args.out:
        raise ConfigError("sweep needs --out DIR")
    if args.config or args.trace:
        cfg = _system(args)
        workloads = [Workload(p.name, p.trace if p.trace is not None else load_trace(p.trace_path))
                     for p in cfg.programs]
        base = cfg.with_programs([])
    else:
        workloads = default_workloads(args.family, args.seed)
        base = SystemConfig()
    if args.family == PAIR:
        workloads = workloads[:2]
    spec = SweepSpec(workloads, args.family, args.weights or (), None, args.jobs,
                     args.warmup == "on", base, watchdog=args.cycles_max)
    result = sweep(spec)
    files = write_outputs(result, args.out, plot_data=args.plot_data)
    if args.format == "csv":
        print((Path(args.out) / "best.csv").read_text(), end="")
    else:
        print(f"{args.family}: {len(result.configs)} configurations, wrote {', '.join(files)}")
        for row in best_rows(result):
            print(f"  {row['selection']}: {row['config']} score={float(row['score']):.4f} "
                  f"L1 misses={row['combined_misses']}")
    return 0


def cmd_gen_trace(args):
    model = ProgramModel(args.kind, inst_bytes=args.inst_bytes, data_bytes=args.data_bytes,
                         stride=args.stride, accesses_per_packet=args.accesses_per_packet,
                         use_distance=args.use_distance, store_fraction=args.store_fraction,
                         reps=args.reps, inner=args.inner, seed=args.seed, stage=args.stage,
                         lines=args.lines)
    events = generate_trace(model, args.length)
    Path(args.out).write_text(dump_trace(events, header=f"{model}"))
    print(f"wrote {len(events)} events to {args.out}")
    return 0


def cmd_validate(args):
    if not args.config and not args.trace:
        raise ConfigError("validate needs --config and/or --trace")
    if args.config:
        cfg = load_config(args.config)
        for p in cfg.programs:
            if p.trace_path:
                load_trace(p.trace_path)
        print(f"{args.config}: ok ({len(cfg.programs)} program(s))")
    for t in args.trace:
        events = load_trace(t)
        print(f"{t}: ok ({len(events)} events)")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "gen-trace": cmd_gen_trace,
            "validate": cmd_validate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TraceError, SimulationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
