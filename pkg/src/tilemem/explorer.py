"""Design-space sweeps over L1 partitions and L2 size, and selection of the best point."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .config import (
    ConfigError, DirectoryConfig, L1ConfigPoint, MemoryGroupConfig, ProgramBinding, ProgramGroups,
    SystemConfig, enumerate_pair_configs, enumerate_single_program_configs, fixed_pair_configs,
)
from .workload import LOOP_NEST, STREAMING, ProgramModel, generate_trace
from .engine import CALIBRATION, CSV_COLUMNS, ITERATION_RULE, SimulationError, run

SINGLE = "single_l1"
PAIR = "pair_l1"
L2 = "l2"
FAMILIES = (SINGLE, PAIR, L2)

COMPUTE_TILE = (1, 1)
OBJECTIVE = ("objective: minimize sum_i w_i * timed_cycles_i / baseline_cycles_i; baseline = "
             "best single-program configuration over all 8 banks, program alone; ties -> fewer "
             "banks, then enumeration order")


def adjacent_tiles(tile, width=4, height=4):
    """Neighbours in fixed E, S, W, N order, clipped to the mesh."""
    x, y = tile
    out = []
    for dx, dy in ((1, 0), (0, 1), (-1, 0), (0, -1)):
        t = (x + dx, y + dy)
        if 0 <= t[0] < width and 0 <= t[1] < height:
            out.append(t)
    return out


@dataclass
class Workload:
    name: str
    trace: list


@dataclass
class SweepSpec:
    workloads: list  # of Workload; two for the pair family
    family: str = SINGLE
    weights: tuple = ()
    out: str | None = None
    jobs: int = 1
    warmup: bool = True
    base: SystemConfig = field(default_factory=SystemConfig)
    banks: int = 8
    l2_max: int = 4
    watchdog: int | None = None

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.workloads:
            raise ConfigError("sweep needs at least one workload")
        if self.family == PAIR and len(self.workloads) != 2:
            raise ConfigError("the pair family needs exactly two workloads")
        w = self.resolved_weights()
        if len(w) != len(self.workloads):
            raise ConfigError("one weight per workload is required")
        if any(x < 0 for x in w) or not any(w):
            raise ConfigError("weights must be non-negative and not all zero")
        adj = adjacent_tiles(COMPUTE_TILE, self.base.mesh_width, self.base.mesh_height)
        if self.family == L2 and self.l2_max > len(adj):
            raise ConfigError(f"only {len(adj)} tiles are adjacent to the compute tile")
        return self

    def resolved_weights(self):
        if self.weights:
            return tuple(Fraction(str(w)) for w in self.weights)
        return (Fraction(1),) * len(self.workloads)


@dataclass
class SweepResult:
    family: str
    workloads: list  # names
    configs: list  # labels in enumeration order
    total_banks: dict  # label -> banks used
    cycles: dict  # (label, program) -> timed cycles
    misses: dict  # (label, program) -> L1 misses
    rows: list  # full CSV rows
    baselines: dict  # program -> (label, cycles, misses)
    weights: tuple = ()

    def score(self, label, weights=None):
        w = self.weights if weights is None else tuple(Fraction(str(x)) for x in weights)
        total = Fraction(0)
        for wi, prog in zip(w, self.workloads):
            total += wi * Fraction(self.cycles[(label, prog)], self.baselines[prog][1])
        return total

    def combined_misses(self, label):
        return sum(self.misses[(label, p)] for p in self.workloads)


# -- building systems --------------------------------------------------------------

def build_system(point, workloads, base=None, l2_tiles=()):
    """Bind ``workloads`` to the compute tile under an L1 configuration point."""
    base = base if base is not None else SystemConfig()
    progs = []
    for i, (wl, groups) in enumerate(zip(workloads, point.programs)):
        progs.append(ProgramBinding(wl.name, COMPUTE_TILE, i, trace=wl.trace,
                                    inst=groups.inst, data=groups.data))
    l2_tiles = tuple(tuple(t) for t in l2_tiles)
    directory = DirectoryConfig.striped(l2_tiles, base.directory.entry_count,
                                        base.directory.index_bit_position)
    return replace(base, programs=progs, l2_tiles=l2_tiles, directory=directory)


def unified_point(banks=8):
    g = MemoryGroupConfig(0, banks)
    return L1ConfigPoint(f"U{banks}", (ProgramGroups(g, g),))


def _simulate(task):
    key, cfg, warmup, watchdog = task
    try:
        rep = run(cfg, warmup=warmup, watchdog=watchdog, label=key[1])
    except SimulationError as exc:
        raise SimulationError(f"{key[0]} / {key[1]}: {exc}") from exc
    return key, [(p.name, p.timed_cycles, p.l1_misses) for p in rep.programs], rep.rows()


def _execute(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        results = [_simulate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_simulate, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return sorted(results, key=lambda r: r[0])


def _tasks_for(spec):
    """(group key, label, cfg) triples, in enumeration order."""
    wls = spec.workloads
    out = []
    if spec.family == SINGLE:
        for wl in wls:
            for p in enumerate_single_program_configs(spec.banks):
                out.append((wl.name, p.label, build_system(p, [wl], spec.base), p.total_banks))
    elif spec.family == PAIR:
        for p in enumerate_pair_configs(spec.banks):
            out.append(("pair", p.label, build_system(p, wls, spec.base), p.total_banks))
    else:
        adj = adjacent_tiles(COMPUTE_TILE, spec.base.mesh_width, spec.base.mesh_height)
        point = unified_point(spec.banks)
        for wl in wls:
            for n in range(spec.l2_max + 1):
                out.append((wl.name, f"L2x{n}", build_system(point, [wl], spec.base, adj[:n]),
                            spec.banks + 8 * n))
    return out


def baselines(workloads, base=None, warmup=True, jobs=1, banks=8, watchdog=None):
    """Best solo cycles of each program over the single-program family."""
    base = base if base is not None else SystemConfig()
    points = enumerate_single_program_configs(banks)
    tasks = []
    for wi, wl in enumerate(workloads):
        for pi, p in enumerate(points):
            tasks.append(((wi, pi), build_system(p, [wl], base), warmup, watchdog))
    results = _execute(tasks, jobs)
    best = {}
    for (wi, pi), progs, _ in results:
        name, cycles, misses = progs[0]
        cur = best.get(name)
        cand = (cycles, points[pi].total_banks, pi)
        if cur is None or cand < cur[0]:
            best[name] = (cand, points[pi].label, cycles, misses)
    return {n: (v[1], v[2], v[3]) for n, v in best.items()}


def sweep(spec: SweepSpec, base_runs=None):
    """Simulate every configuration of the family; deterministic for any ``jobs``."""
    spec.validate()
    triples = _tasks_for(spec)
    tasks = [((i, label), cfg, spec.warmup, spec.watchdog)
             for i, (_, label, cfg, _) in enumerate(triples)]
    results = _execute(tasks, spec.jobs)
    cycles, misses, rows = {}, {}, []
    configs, total_banks = [], {}
    for (i, label), progs, prow in results:
        group = triples[i][0]
        key = label if spec.family == PAIR else f"{group}:{label}"
        configs.append(key)
        total_banks[key] = triples[i][3]
        for name, c, m in progs:
            cycles[(key, name)] = c
            misses[(key, name)] = m
        for r in prow:
            r["config"] = key
        rows += prow
    if base_runs is None:
        base_runs = baselines(spec.workloads, spec.base, spec.warmup, spec.jobs, spec.banks,
                              spec.watchdog)
    res = SweepResult(spec.family, [w.name for w in spec.workloads], configs, total_banks,
                      cycles, misses, rows, base_runs, spec.resolved_weights())
    if spec.out:
        write_outputs(res, spec.out)
    return res


# -- selection ------------------------------------------------------------------------

def _candidates(result, program=None):
    if result.family == PAIR or program is None:
        return list(result.configs)
    return [c for c in result.configs if c.startswith(program + ":")]


def best_config(result, weights=None, program=None):
    """Configuration minimizing the weighted slowdown, and its score.

    For per-program families, ``program`` restricts the choice to that
    program's rows and the score is its own slowdown.
    """
    if not result.configs:
        raise ValueError("empty sweep result")
    if result.family != PAIR and program is None and len(result.workloads) == 1:
        program = result.workloads[0]
    cands = _candidates(result, program)
    best = None
    for order, label in enumerate(cands):
        if result.family == PAIR:
            s = result.score(label, weights)
        else:
            s = Fraction(result.cycles[(label, program)], result.baselines[program][1])
        key = (s, result.total_banks[label], order)
        if best is None or key < best[0]:
            best = (key, label)
    return best[1], best[0][0]


def relative_table(result):
    """Per (config, program): cycles and L1 misses relative to the solo baseline."""
    out = []
    for label in result.configs:
        progs = result.workloads if result.family == PAIR else [label.split(":", 1)[0]]
        ratios = []
        for prog in progs:
            if prog not in result.baselines:
                raise KeyError(f"no baseline run for program {prog!r}")
            _, bc, bm = result.baselines[prog]
            c, m = result.cycles[(label, prog)], result.misses[(label, prog)]
            ratio = c / bc if bc else 1.0
            ratios.append(ratio)
            out.append({"config": label, "program": prog, "cycles": c, "baseline_cycles": bc,
                        "relative": ratio, "misses": m, "baseline_misses": bm,
                        "miss_ratio": (m / bm) if bm else (1.0 if m == 0 else math.inf)})
        out.append({"config": label, "program": "*mean", "cycles": "", "baseline_cycles": "",
                    "relative": sum(ratios) / len(ratios), "misses": "", "baseline_misses": "",
                    "miss_ratio": _geomean(ratios)})
    return out


def _geomean(xs):
    return math.exp(sum(math.log(x) for x in xs) / len(xs)) if xs and all(x > 0 for x in xs) else 0.0


# -- outputs ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, Fraction):
        return f"{float(v):.6f}"
    return v


def _header():
    lines = [f"# calibration: {c}" for c in CALIBRATION]
    lines.append(f"# iteration rule: {ITERATION_RULE}")
    lines.append(f"# {OBJECTIVE}")
    lines.append("# means: relative = arithmetic mean over programs; miss_ratio column of "
                 "*mean rows = geometric mean of relative cycles")
    return "\n".join(lines) + "\n"


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def best_rows(result):
    rows = []
    if result.family == PAIR:
        label, score = best_config(result)
        fixed = [p.label for p in fixed_pair_configs()]
        for name in [label] + fixed:
            rows.append({"selection": "best" if name == label else "fixed", "config": name,
                         "score": result.score(name), "combined_misses": result.combined_misses(name),
                         "miss_ratio_vs_best": (result.combined_misses(label) /
                                                result.combined_misses(name))
                         if result.combined_misses(name) else 1.0})
    else:
        for prog in result.workloads:
            label, score = best_config(result, program=prog)
            rows.append({"selection": prog, "config": label, "score": score,
                         "combined_misses": result.misses[(label, prog)],
                         "miss_ratio_vs_best": 1.0})
    return rows


BEST_COLUMNS = ("selection", "config", "score", "combined_misses", "miss_ratio_vs_best")
RELATIVE_COLUMNS = ("config", "program", "cycles", "baseline_cycles", "relative", "misses",
                    "baseline_misses", "miss_ratio")


def write_outputs(result, out, plot_data=False):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "sweep.csv": _header() + _csv(result.rows, CSV_COLUMNS),
        "best.csv": _header() + _csv(best_rows(result), BEST_COLUMNS),
        "relative.csv": _header() + _csv(relative_table(result), RELATIVE_COLUMNS),
    }
    if plot_data:
        files.update(plot_files(result))
    # Write everything only after all content is built, so a failure leaves no partial set.
    for name, text in files.items():
        (out / name).write_text(text)
    return sorted(files)


def plot_files(result):
    rel = [r for r in relative_table(result) if r["program"] != "*mean"]
    if result.family == SINGLE:
        rows = [{"program": r["program"], "config": r["config"].split(":", 1)[1],
                 "relative": r["relative"], "miss_ratio": r["miss_ratio"]} for r in rel]
        return {"fig4_single.csv": _csv(rows, ("program", "config", "relative", "miss_ratio"))}
    if result.family == PAIR:
        label, _ = best_config(result)
        sizes = _allocation(label)
        alloc = [{"config": label, **sizes}]
        fixed = [p.label for p in fixed_pair_configs()]
        by = {(r["config"], r["program"]): r for r in rel}
        pair_rows = []
        for name in [label] + fixed:
            for prog in result.workloads:
                r = by[(name, prog)]
                pair_rows.append({"config": name, "program": prog, "relative": r["relative"],
                                  "miss_ratio": r["miss_ratio"]})
        return {
            "fig5_allocation.csv": _csv(alloc, ("config", "Ai", "Ad", "Bi", "Bd")),
            "fig6_pair.csv": _csv(pair_rows, ("config", "program", "relative", "miss_ratio")),
        }
    rows = []
    for r in rel:
        rows.append({"program": r["program"], "l2_tiles": int(r["config"].rsplit("x", 1)[1]),
                     "relative": r["relative"], "cycles": r["cycles"]})
    return {"fig7_l2.csv": _csv(rows, ("program", "l2_tiles", "relative", "cycles"))}


def _allocation(label):
    """Banks seen by each of Ai, Ad, Bi, Bd in a pair label."""
    sizes = {}
    for part in label.split(":", 1)[1].split(","):
        users, size = part.split("=")
        for u in users.split("+"):
            sizes[u] = int(size)
    return sizes


def default_jobs():
    return max(1, os.cpu_count() or 1)


# -- stock workloads ---------------------------------------------------------------------

def contention_pair_models(seed=0):
    """A: 8kB of code around a 256B hot data set; B: one L0-resident packet
    sweeping 8kB of data a line at a time."""
    a = ProgramModel(LOOP_NEST, inst_bytes=8192, data_bytes=256, stride=4, accesses_per_packet=4,
                     use_distance=2, reps=2, inner=4, seed=seed)
    b = ProgramModel(LOOP_NEST, inst_bytes=256, data_bytes=8192, stride=32,
                     accesses_per_packet=16, use_distance=1, reps=8, seed=seed + 1)
    return a, b


def l2_models(seed=0):
    """24kB reuse loop, a no-reuse stream larger than four L2 tiles, and a 48kB loop."""
    return (
        ("loop24", ProgramModel(LOOP_NEST, inst_bytes=256, data_bytes=24 * 1024, stride=32,
                                accesses_per_packet=16, use_distance=1, reps=2, seed=seed)),
        ("stream", ProgramModel(STREAMING, inst_bytes=256, data_bytes=160 * 1024, stride=32,
                                accesses_per_packet=16, use_distance=1, seed=seed)),
        ("mix48", ProgramModel(LOOP_NEST, inst_bytes=256, data_bytes=48 * 1024, stride=32,
                               accesses_per_packet=16, use_distance=1, reps=2, seed=seed)),
    )


def default_workloads(family, seed=0):
    if family == PAIR:
        a, b = contention_pair_models(seed)
        return [Workload("A", generate_trace(a)), Workload("B", generate_trace(b))]
    if family == L2:
        return [Workload(n, generate_trace(m)) for n, m in l2_models(seed)]
    a, b = contention_pair_models(seed)
    return [Workload("A", generate_trace(a)), Workload("B", generate_trace(b))]
