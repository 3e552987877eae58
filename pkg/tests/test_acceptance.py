"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (also collected in the terminal summary).
Tolerances are fixed here and never loosened to make a result pass.
"""

import random
import time

import pytest

from tilemem import mem
from tilemem.config import (
    CACHE, SCRATCHPAD, ChannelMapEntry, MemoryGroupConfig, ProgramBinding, SystemConfig,
    fixed_pair_configs,
)
from tilemem.engine import Simulator, run
from tilemem.explorer import L2, PAIR, SweepSpec, best_config, default_workloads, sweep
from tilemem.hierarchy import L2Tile
from tilemem.mem import MemOp, access, map_address, unmap_address
from tilemem.noc import Flit, MeshNetwork
from tilemem.workload import Load, ProgramModel, Use, generate_trace, pipeline_system

from oracles import DirectMapped, LRUSetAssoc, flush_stall, interleave, miss_closed_form, route
from test_noc import soak, stream

SHAPES = [MemoryGroupConfig(b, s, m) for m in (CACHE, SCRATCHPAD)
          for s in (1, 2, 4, 8) for b in range(0, 8, s)]

# Pinned tolerances.
THROUGHPUT_TOL = 1  # flits per 10^4 cycles
MISS_FACTOR = 2  # best pair config vs fixed configs, combined L1 misses
STEP_DROP = 0.8  # mix48: cycles with 3 L2 tiles at most this fraction of cycles with 2


@pytest.fixture(scope="module")
def pair_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    t = time.time()
    res = sweep(SweepSpec(default_workloads(PAIR), PAIR, out=str(out), jobs=1))
    return res, out, time.time() - t


@pytest.fixture(scope="module")
def l2_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("l2")
    t = time.time()
    res = sweep(SweepSpec(default_workloads(L2), L2, out=str(out), jobs=1))
    return res, out, time.time() - t


def solo(trace, warmup, tile=(1, 1), **kw):
    cfg = SystemConfig(programs=[ProgramBinding("p", tile=tile, trace=trace,
                                                inst=MemoryGroupConfig(0, 4),
                                                data=MemoryGroupConfig(4, 4))], **kw)
    return run(cfg, warmup=warmup).program("p").timed_cycles


def test_1_latency_exactness(verdict):
    t = time.time()
    # Warm LOAD;USE: response 3 cycles after the request, USE retires one later.
    hit = solo([Load(0x100), Use()], True) - 1
    misses = []
    for tile, mc in [((1, 1), (0, 0)), ((0, 0), (0, 0)), ((3, 3), (0, 0)), ((2, 1), (3, 2))]:
        got = solo([Load(0x100), Use()], False, tile=tile, memctrl_tile=mc) - 1
        misses.append((got, miss_closed_form(0, tile, mc)))
    ok = hit == 3 and all(g == w for g, w in misses) and time.time() - t < 1
    verdict(1, ok, f"hit={hit} cycles (want 3); misses (got, closed form)={misses}")


def test_2_flush_cost_exactness(verdict):
    rng = random.Random(2024)
    bad = []
    for case in range(1000):
        old = rng.choice([g for g in SHAPES if g.mode == CACHE])
        new = rng.choice([g for g in SHAPES if g.mode == CACHE and g != old])
        sim = Simulator(SystemConfig(programs=[ProgramBinding(
            "p", trace=[], inst=MemoryGroupConfig(0, 8), data=old)]), warmup=False)
        banks = sim.banks[(1, 1)]
        dirty = 0
        p_dirty = rng.random()
        for b in old.banks:
            for s in range(64):
                r = rng.random()
                if r < p_dirty * 0.5:
                    banks[b].fill(s, (s * 8 + b) * 32, [case] * 8, dirty=True)
                    dirty += 1
                elif r < 0.6:
                    banks[b].fill(s, (s * 8 + b) * 32, [case] * 8)
        for b in set(range(8)) - set(old.banks):  # dirty data outside the group is not flushed
            banks[b].fill(0, 0x40000 + b * 32, [1] * 8, dirty=True)
        cost = sim.apply_reconfig(0, 1, ChannelMapEntry.to_group(new))
        if cost != 1 + 8 * dirty + dirty or cost != flush_stall(dirty):
            bad.append((case, old, new, dirty, cost))
    verdict(2, not bad, f"1000 random dirty states, mismatches={len(bad)} {bad[:3]}")


def test_3_cache_oracles(verdict):
    rng = random.Random(3)
    bank, g, ref = mem.MemoryBank(0), MemoryGroupConfig(0, 1), DirectMapped()
    dm_bad = 0
    hot = [rng.randrange(1 << 15) * 4 for _ in range(300)]
    for _ in range(100_000):
        a = rng.choice(hot) if rng.random() < 0.5 else rng.randrange(1 << 20) * 4
        res = access(bank, MemOp(mem.LOAD_WORD, a), CACHE, g)
        if res.outcome == mem.MISS:
            bank.fill(bank.locate(a, g).set, res.refill, [0] * 8)
        dm_bad += (res.outcome == mem.HIT) != ref.access(a)
    l2, lru = L2Tile(), LRUSetAssoc(64, 8)
    l2_bad = 0
    hot = [rng.randrange(1 << 14) * 32 for _ in range(700)]
    for _ in range(100_000):
        a = rng.choice(hot) if rng.random() < 0.8 else rng.randrange(1 << 22) * 4
        res = l2.access(a, "load_word")
        if res.outcome == mem.MISS:
            l2.install(res.refill, (0,) * 8)
        l2_bad += (res.outcome == mem.HIT) != lru.access(a)
    verdict(3, dm_bad == 0 and l2_bad == 0,
            f"direct-mapped mismatches={dm_bad}/100000, 8-way LRU mismatches={l2_bad}/100000")


def test_4_interleaving(verdict):
    bad = 0
    for g in SHAPES:
        for w in range(1 << 16):
            addr = w * 4
            ba = map_address(addr, g)
            bad += (ba.bank, ba.set) != interleave(addr, g.base_bank, g.size)
            bad += unmap_address(ba, g) != addr
    verdict(4, bad == 0, f"{len(SHAPES)} shapes x 65536 addresses, failures={bad}")


def test_5_noc_properties(verdict):
    t = time.time()
    cases = []
    for src, dst in [((0, 0), (1, 0)), ((0, 0), (2, 1)), ((1, 1), (3, 3)), ((0, 0), (3, 3))]:
        for credits in (1, 3, 8, 16):
            got = stream(src, dst, credits)
            want = min(1, credits / (2 * route(src, dst))) * 10_000
            cases.append((src, dst, credits, got, round(want, 2)))
    thr_ok = all(abs(c[3] - c[4]) <= THROUGHPUT_TOL for c in cases)
    # Conservation and overflow under a random consumer.
    rng = random.Random(5)
    net = MeshNetwork()
    conns = [net.open_connection(((0, 0), i), ((3, 2), i, 0), rng.randint(1, 6)) for i in range(3)]
    cons_ok = True
    for _ in range(20_000):
        for c in conns:
            net.send_flit(c, Flit())
            if rng.random() < 0.3:
                net.consume(c.dst)
        net.step()
        cons_ok &= all(c.conserved() for c in conns)
    net, sent, received = soak(100_000, seed=5)
    for _ in range(5000):
        for key in list(net.endpoints):
            while net.consume(key) is not None:
                received += 1
        net.step()
    soak_ok = net.idle() and sent == received and net.violations == 0 and net.occupancy_ok()
    took = time.time() - t
    ok = thr_ok and cons_ok and soak_ok and took < 60
    worst = max(abs(c[3] - c[4]) for c in cases)
    verdict(5, ok, f"throughput worst error={worst:.2f} flits/10^4 over {len(cases)} streams; "
                   f"conservation={cons_ok}; soak sent={sent} received={received} "
                   f"violations={net.violations} max_occupancy={net.max_occupancy}; {took:.0f}s")


def test_6_contention_benefit(verdict, pair_sweep):
    res, _, took = pair_sweep
    best, score = best_config(res)
    best_m = res.combined_misses(best)
    rows = []
    ok = True
    for f in fixed_pair_configs():
        fm, fs = res.combined_misses(f.label), res.score(f.label)
        rows.append(f"{f.label}: misses={fm} score={float(fs):.3f}")
        ok &= MISS_FACTOR * best_m <= fm and score < fs
    ok &= took < 300
    verdict(6, ok, f"best {best}: misses={best_m} score={float(score):.3f}; " + "; ".join(rows)
            + f"; {took:.0f}s")


def test_7_l2_direction(verdict, l2_sweep):
    res, _, took = l2_sweep
    c = {w: [res.cycles[(f"{w}:L2x{n}", w)] for n in range(5)] for w in res.workloads}
    loop_ok = c["loop24"][1] < c["loop24"][0]
    stream_ok = c["stream"][1] > c["stream"][0]
    step_ok = c["mix48"][3] <= STEP_DROP * c["mix48"][2] and c["mix48"][2] <= c["mix48"][1]
    verdict(7, loop_ok and stream_ok and step_ok and took < 300,
            f"cycles by L2 tiles 0..4: {c}; {took:.0f}s")


def test_8_isolation(verdict):
    a = ProgramModel("loop_nest", inst_bytes=512, data_bytes=1024, reps=3, store_fraction=0.25, seed=8)
    b = ProgramModel("pointer_chase", inst_bytes=1024, data_bytes=2048, reps=2, seed=9)
    ta, tb = generate_trace(a), generate_trace(b, 300)
    layouts = [
        ((1, 1), MemoryGroupConfig(0, 2), MemoryGroupConfig(2, 2),
         (1, 1), MemoryGroupConfig(4, 2), MemoryGroupConfig(6, 2)),
        ((1, 1), MemoryGroupConfig(0, 1), MemoryGroupConfig(1, 1, SCRATCHPAD),
         (1, 1), MemoryGroupConfig(4, 4), MemoryGroupConfig(2, 2)),
        ((1, 1), MemoryGroupConfig(0, 4), MemoryGroupConfig(4, 4),
         (2, 2), MemoryGroupConfig(0, 4), MemoryGroupConfig(4, 4)),
    ]
    got = []
    for ta_tile, ai, ad, tb_tile, bi, bd in layouts:
        pa = ProgramBinding("a", ta_tile, 0, trace=ta, inst=ai, data=ad)
        pb = ProgramBinding("b", tb_tile, 1, trace=tb, inst=bi, data=bd)
        alone_a = run(SystemConfig(programs=[pa])).program("a")
        alone_b = run(SystemConfig(programs=[pb])).program("b")
        both = run(SystemConfig(programs=[pa, pb]))
        got.append((alone_a.timed_cycles, both.program("a").timed_cycles,
                    alone_b.timed_cycles, both.program("b").timed_cycles))
        got[-1] += (alone_a.stats == both.program("a").stats
                    and alone_b.stats == both.program("b").stats,)
    ok = all(x[0] == x[1] and x[2] == x[3] and x[4] for x in got)
    verdict(8, ok, f"(solo a, shared a, solo b, shared b, stats equal) = {got}")


def test_9_determinism(verdict, pair_sweep, l2_sweep, tmp_path):
    same = []
    for family, (res, out, _) in ((PAIR, pair_sweep), (L2, l2_sweep)):
        again = tmp_path / family
        sweep(SweepSpec(default_workloads(family), family, out=str(again), jobs=2))
        first = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
        second = {p.name: p.read_bytes() for p in sorted(again.iterdir())}
        same.append((family, sorted(first), first == second))
    verdict(9, all(s[2] for s in same), f"jobs=1 vs jobs=2 byte-identical: {same}")


def test_10_pipeline_specialization(verdict):
    t = time.time()
    cyc = {}
    for spec in (True, False):
        for lines in (True, False):
            rep = run(pipeline_system(specialized=spec, line_ops=lines, lines=256))
            cyc[(spec, lines)] = rep.cycles
    thr = {k: 256 / v for k, v in cyc.items()}
    ok = (thr[(True, True)] > thr[(False, True)] and thr[(True, False)] > thr[(False, False)]
          and thr[(True, True)] > thr[(True, False)] and thr[(False, True)] > thr[(False, False)])
    took = time.time() - t
    verdict(10, ok and took < 120,
            "cycles for 256 lines (specialized, line ops): "
            + ", ".join(f"{k}={v}" for k, v in cyc.items()) + f"; {took:.0f}s")
