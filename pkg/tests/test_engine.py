import pytest
from hypothesis import given, settings, strategies as st

from tilemem.config import (
    SCRATCHPAD, ChannelMapEntry, ConfigError, DirectoryConfig, MemoryGroupConfig,
    ProgramBinding, SystemConfig,
)
from tilemem.engine import (
    CSV_COLUMNS, DeadlockError, LivelockError, SimulationError, Simulator, run,
)
from tilemem.workload import (
    Compute, Fetch, LineOp, Load, ProgramModel, Recv, Reconfig, Send, Store, TraceEvent, Use,
    generate_trace,
)

from oracles import l2_hit_closed_form, l2_miss_closed_form, miss_closed_form, route

INST4, DATA4 = MemoryGroupConfig(0, 4), MemoryGroupConfig(4, 4)


def system(*programs, **kw):
    return SystemConfig(programs=list(programs), **kw)


def prog(trace, name="p", tile=(1, 1), core=0, inst=INST4, data=DATA4, **kw):
    return ProgramBinding(name, tile=tile, core=core, trace=list(trace), inst=inst, data=data, **kw)


def cycles(trace, warmup=False, **kw):
    sys_kw = {k: kw.pop(k) for k in list(kw) if k in SystemConfig.__dataclass_fields__}
    return run(system(prog(trace, **kw), **sys_kw), warmup=warmup).program("p")


def with_l2(*tiles):
    return dict(l2_tiles=tuple(tiles), directory=DirectoryConfig.striped(tiles))


class TestLatency:
    def test_hit_is_three_cycles(self):
        # Timed iteration: LOAD issues at 0, data ready at 3, USE retires at 4.
        assert cycles([Load(0x100), Use()], warmup=True).timed_cycles == 4

    @pytest.mark.parametrize("tile,memctrl", [((1, 1), (0, 0)), ((0, 0), (0, 0)),
                                              ((1, 1), (3, 3)), ((3, 0), (0, 2))])
    def test_cold_miss_closed_form(self, tile, memctrl):
        got = cycles([Load(0x100), Use()], tile=tile, memctrl_tile=memctrl).timed_cycles
        assert got == miss_closed_form(0, tile, memctrl) + 1

    @pytest.mark.parametrize("latency", [0, 10, 35, 100])
    def test_memory_latency_parameter(self, latency):
        got = cycles([Load(0x0), Use()], main_memory_latency=latency).timed_cycles
        assert got == miss_closed_form(0, latency=latency) + 1

    @pytest.mark.parametrize("data", [MemoryGroupConfig(4, 1), MemoryGroupConfig(4, 2),
                                      MemoryGroupConfig(0, 8)])
    def test_group_shape_does_not_change_idle_latency(self, data):
        assert cycles([Load(0x40), Use()], data=data, inst=data).timed_cycles == miss_closed_form(0) + 1

    @pytest.mark.parametrize("l2", [(2, 1), (1, 2), (0, 1), (3, 3)])
    def test_l2_miss_and_hit(self, l2):
        cold = cycles([Load(0x100), Use()], **with_l2(l2)).timed_cycles
        assert cold == l2_miss_closed_form(0, (1, 1), l2) + 1
        # 0x2100 evicts 0x100 from the 8kB L1 group; the third load then hits in L2.
        seq = [Load(0x100), Use(), Load(0x2100), Use()]
        two = cycles(seq, **with_l2(l2)).timed_cycles
        three = cycles(seq + [Load(0x100), Use()], **with_l2(l2)).timed_cycles
        assert three - two == l2_hit_closed_form(0, (1, 1), l2) + 1
        assert two - cold == cold  # second cold miss has the same latency

    def test_back_to_back_misses_pipeline(self):
        # Two loads to different banks overlap their misses; one more cycle, not double.
        one = cycles([Load(0x0), Use()]).timed_cycles
        two = cycles([Load(0x0), Load(0x20), Use(), Use()]).timed_cycles
        assert two <= one + 2 * 8

    def test_empty_trace(self):
        p = cycles([])
        assert p.timed_cycles == 0 and p.stats.instructions == 0

    def test_compute_only(self):
        assert cycles([Compute(17)], warmup=True).timed_cycles == 17


class TestFetch:
    def test_warm_packet_hits_l0(self):
        p = cycles([Fetch(0, 8), Compute(8)], warmup=True)
        assert p.timed_cycles == 8
        assert p.stats.inst_l0_hits == 1 and p.stats.inst_l0_misses == 0

    def test_cold_packet_misses_to_memory(self):
        p = cycles([Fetch(0, 8), Compute(8)])
        assert p.stats.inst_l0_misses == 1 and p.stats.inst_l1_misses == 1
        assert p.timed_cycles >= miss_closed_form(0)

    def test_packet_over_l0_capacity_refetches(self):
        trace = [Fetch(0, 64), Compute(64), Fetch(0x100, 64), Compute(64)]
        p = cycles(trace, warmup=True)
        assert p.stats.inst_l0_hits == 0 and p.stats.inst_l1_hits == 16


class TestReconfig:
    def stores(self, n):
        return [Store(0x100000 + 32 * i, i) for i in range(n)] + [Compute(2000)]

    def test_clean_group_change_costs_one(self):
        p = cycles([Reconfig(1, ChannelMapEntry.to_group(MemoryGroupConfig(4, 2)))])
        assert p.stats.reconfig_cycles == 1

    def test_dirty_lines_are_flushed(self):
        p = cycles(self.stores(10) + [Reconfig(1, ChannelMapEntry.to_group(MemoryGroupConfig(4, 2)))])
        assert p.stats.reconfig_cycles == 91
        assert p.stats.writebacks == 10

    def test_same_group_keeps_data(self):
        p = cycles(self.stores(10) + [Reconfig(1, ChannelMapEntry.to_group(DATA4))])
        assert p.stats.reconfig_cycles == 1

    def test_channel_entry_costs_one(self):
        p = cycles([Reconfig(3, ChannelMapEntry.to_core((2, 2), 1, 0))])
        assert p.stats.reconfig_cycles == 1

    def test_mixed_mode_overlap_rejected(self):
        with pytest.raises(ConfigError, match="mixed-mode"):
            cycles([Reconfig(1, ChannelMapEntry.to_group(MemoryGroupConfig(0, 2, SCRATCHPAD)))])

    def test_flushed_data_reaches_memory(self):
        trace = [Store(0x40, 77), Compute(200),
                 Reconfig(1, ChannelMapEntry.to_group(MemoryGroupConfig(4, 2))),
                 Load(0x40), Use()]
        sim = Simulator(system(prog(trace, address_offset=0)), warmup=False)
        sim.run()
        assert sim.memory.read(0x40)[0] == 77

    def test_direct_api(self):
        sim = Simulator(system(prog([Compute(1)])))
        assert sim.apply_reconfig(0, 1, ChannelMapEntry.to_group(MemoryGroupConfig(4, 1))) == 1
        assert sim.reconfig_log[-1][3] == 1


class TestSecondaryChannel:
    TRACE = [Fetch(0, 8), Compute(4), Load(0x0), Use(), Compute(2),
             Fetch(0x20, 8), Compute(8), Fetch(0x40, 4), Compute(4)]

    def test_injected_packet_waits_for_boundary(self):
        sim = Simulator(system(prog(self.TRACE)), warmup=False, record=True)
        for at in (1, 30, 70):
            sim.inject(0, [Compute(3)], at=at)
        sim.run()
        log = sim.cores[0].model.log
        for i, (kind, pos) in enumerate(log):
            if kind == "secondary":
                assert log[i - 1][0] in ("boundary", "secondary")
            if kind == "boundary":
                assert pos == len(self.TRACE) or self.TRACE[pos].kind == "F"
        assert sum(k == "secondary" for k, _ in log) == 3

    def test_injection_adds_its_cost(self):
        base = run(system(prog([Compute(50)])), warmup=False).program("p").total_cycles
        sim = Simulator(system(prog([Compute(50)])), warmup=False)
        sim.inject(0, [Compute(2)], at=10)
        assert sim.run().program("p").total_cycles == base + 2

    def test_idle_core_runs_packet_at_once(self):
        sim = Simulator(system(prog([])), warmup=False, record=True)
        sim.inject(((1, 1), 0), [Compute(5)], at=0)
        sim.run()
        assert ("secondary", 0) in sim.cores[0].model.log


class TestChannels:
    def pair(self, a, b, **kw):
        return run(system(a, b, **kw), warmup=False)

    def test_local_send_recv(self):
        a = prog([Send(2, 1)] * 8, name="a", channels={2: ChannelMapEntry.to_core((1, 1), 1, 0)})
        b = prog([Recv(0)] * 8, name="b", core=1)
        rep = self.pair(a, b)
        assert rep.program("b").stats.instructions == 8

    def test_local_buffer_full_blocks_sender(self):
        a = prog([Send(2, 1)] * 8, name="a", channels={2: ChannelMapEntry.to_core((1, 1), 1, 0)})
        b = prog([Compute(100)] + [Recv(0)] * 8, name="b", core=1)
        rep = self.pair(a, b)
        assert rep.program("a").stats.stall_network >= 90

    @pytest.mark.parametrize("dst", [(2, 1), (3, 3)])
    def test_credits_limit_throughput(self, dst):
        words = 40

        def t(credits):
            a = prog([Send(2, 0)] * words, name="a",
                     channels={2: ChannelMapEntry.to_core(dst, 0, 0, credits=credits)})
            b = prog([Recv(0)] * words, name="b", tile=dst)
            rep = self.pair(a, b)
            return rep.program("a"), rep.program("b")

        a1, b1 = t(1)
        a8, b8 = t(8)
        rt = 2 * route((1, 1), dst)
        assert a1.stats.stall_credits > 0
        # One credit: one word per round trip.
        assert b1.total_cycles >= (words - 1) * rt
        assert b8.total_cycles < b1.total_cycles

    def test_multicast(self):
        a = prog([Send(3, 5)] * 6, name="a", channels={3: ChannelMapEntry.to_multicast(0b110, 1)})
        b = prog([Recv(1)] * 6, name="b", core=1)
        c = prog([Compute(40)] + [Recv(1)] * 6, name="c", core=2)
        rep = run(system(a, b, c), warmup=False)
        assert rep.program("c").stats.instructions == 46
        # c's full buffer holds up delivery to b as well.
        assert rep.program("a").stats.stall_network > 0

    def test_return_channel(self):
        data = MemoryGroupConfig(4, 4, return_channel=(1, 0))
        a = prog([Load(0x0), Load(0x4), Load(0x8)], name="a", data=data)
        b = prog([Recv(0)] * 3, name="b", core=1, data=MemoryGroupConfig(4, 4))
        rep = self.pair(a, b)
        assert rep.program("b").total_cycles >= miss_closed_form(0)

    def test_send_on_memory_slot_is_error(self):
        with pytest.raises(SimulationError, match="memory channel"):
            cycles([Send(1, 0)])

    def test_deadlock_reports_blocked_cores(self):
        a = prog([Recv(0), Send(2, 0)], name="a", channels={2: ChannelMapEntry.to_core((1, 1), 1, 0)})
        b = prog([Recv(0), Send(2, 0)], name="b", core=1,
                 channels={2: ChannelMapEntry.to_core((1, 1), 0, 0)})
        with pytest.raises(DeadlockError) as err:
            self.pair(a, b)
        assert len(err.value.blocked) == 2
        assert "waiting on input buffer 0" in str(err.value)

    def test_watchdog(self):
        a = prog([Recv(0)], name="a")
        b = prog([Compute(10_000)], name="b", core=1)
        with pytest.raises(DeadlockError):
            run(system(a, b), warmup=False, watchdog=100)


class TestBypass:
    @pytest.mark.parametrize("mode", ["skip-l1", "skip-all"])
    def test_bypass_counts_and_skips_banks(self, mode):
        data = MemoryGroupConfig(4, 4, bypass=mode)
        trace = [Load(0x0), Use(), Store(0x20, 1), Load(0x0), Use()]
        p = run(system(prog(trace, data=data), **with_l2((2, 1))), warmup=False).program("p")
        assert p.stats.data_bypassed == p.stats.data_accesses == 3
        assert p.stats.data_l1_hits == p.stats.data_l1_misses == 0

    def test_skip_all_is_not_faster_than_l2_hit(self):
        trace = [Load(0x0), Use(), Compute(100), Load(0x0), Use()]
        via_l2 = run(system(prog(trace, data=MemoryGroupConfig(4, 4, bypass="skip-l1")),
                            **with_l2((2, 1))), warmup=False).program("p")
        direct = run(system(prog(trace, data=MemoryGroupConfig(4, 4, bypass="skip-all")),
                            **with_l2((2, 1))), warmup=False).program("p")
        assert via_l2.timed_cycles < direct.timed_cycles


class TestAtomic:
    def test_reservation_serialises_other_core(self):
        a = prog([TraceEvent("AB", 1), Load(0x0), Use(), Compute(300), TraceEvent("AE", 1)],
                 name="a", address_offset=0)
        b = prog([Compute(100), Load(0x0), Use()], name="b", core=1, address_offset=0,
                 inst=INST4, data=DATA4)
        rep = run(system(a, b), warmup=False)
        pa, pb = rep.program("a"), rep.program("b")
        # b's load waits for the end of a's region (a's first pass, AE + release).
        assert pb.total_cycles > pa.timed_cycles
        assert pb.stats.stall_memory > 200

    def test_livelock_bound(self):
        a = prog([TraceEvent("AB", 1), Load(0x0), Use(), Compute(500), TraceEvent("AE", 1)])
        with pytest.raises(LivelockError, match="over the bound"):
            run(system(a, atomic_bound=100), warmup=False)


class TestIsolation:
    def models(self):
        a = ProgramModel("loop_nest", inst_bytes=512, data_bytes=1024, reps=3, seed=1,
                         store_fraction=0.2)
        b = ProgramModel("loop_nest", inst_bytes=256, data_bytes=2048, stride=8, reps=2, seed=2)
        return generate_trace(a), generate_trace(b)

    def test_private_groups_are_timing_isolated(self):
        ta, tb = self.models()
        alone = run(system(prog(ta, name="a", inst=MemoryGroupConfig(0, 2),
                                data=MemoryGroupConfig(2, 2))))
        both = run(system(prog(ta, name="a", inst=MemoryGroupConfig(0, 2),
                               data=MemoryGroupConfig(2, 2)),
                          prog(tb, name="b", core=1, inst=MemoryGroupConfig(4, 2),
                               data=MemoryGroupConfig(6, 2))))
        pa, pb = alone.program("a"), both.program("a")
        assert pa.timed_cycles == pb.timed_cycles
        assert pa.stats == pb.stats

    def test_shared_group_interferes(self):
        ta, tb = self.models()
        g = MemoryGroupConfig(0, 1)
        alone = run(system(prog(ta, name="a", inst=g, data=g)))
        both = run(system(prog(ta, name="a", inst=g, data=g),
                          prog(tb, name="b", core=1, inst=g, data=g)))
        assert both.program("a").timed_cycles > alone.program("a").timed_cycles


class TestStatsAndDeterminism:
    def mixed(self, seed):
        models = [ProgramModel("loop_nest", inst_bytes=1024, data_bytes=4096, store_fraction=0.3,
                               seed=seed),
                  ProgramModel("pointer_chase", data_bytes=8192, seed=seed),
                  ProgramModel("streaming", stride=32, seed=seed)]
        progs = [prog(generate_trace(m, 200), name=m.kind, core=i,
                      inst=MemoryGroupConfig(0, 2), data=MemoryGroupConfig(2 + 2 * i, 2))
                 for i, m in enumerate(models)]
        progs.append(prog([LineOp("fetch", 0x40)] + [Use()] * 8 + [LineOp("flush", 0x40),
                           LineOp("prefetch", 0x80), LineOp("storeline", 0xc0)],
                          name="lines", core=3, inst=MemoryGroupConfig(0, 2),
                          data=MemoryGroupConfig(6, 2)))
        return system(*progs, **with_l2((2, 1), (1, 2)))

    def test_digest_stable(self):
        assert run(self.mixed(4)).digest() == run(self.mixed(4)).digest()
        assert run(self.mixed(4)).to_csv() == run(self.mixed(4)).to_csv()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_accounting(self, seed):
        rep = run(self.mixed(seed))
        end = max(p.total_cycles for p in rep.programs)
        for p in rep.programs:
            s = p.stats
            assert s.data_accesses == s.data_l1_hits + s.data_l1_misses + s.data_bypassed
            assert s.inst_l1_hits + s.inst_l1_misses >= s.inst_l0_misses
            assert p.timed_cycles <= p.total_cycles
            assert s.stall_memory + s.stall_fetch + s.stall_network + s.stall_credits <= p.timed_cycles
        for accesses, busy in rep.bank_accesses.values():
            assert busy <= end

    def test_csv_columns(self):
        text = run(self.mixed(0)).to_csv()
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        assert lines[0].split(",") == list(CSV_COLUMNS)
        assert len(lines) == 5
        assert any(ln.startswith("# calibration:") for ln in text.splitlines())

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 60), st.integers(1, 40))
    def test_latency_monotone(self, lat, extra):
        s = self.mixed(1)
        a = run(SystemConfig(**{**s.__dict__, "main_memory_latency": lat})).cycles
        b = run(SystemConfig(**{**s.__dict__, "main_memory_latency": lat + extra})).cycles
        assert b >= a


class TestStaleCheck:
    def test_flags_dirty_copy_under_other_shape(self):
        a = prog([Store(0x40, 9), Compute(10)], name="a", address_offset=0,
                 inst=MemoryGroupConfig(0, 2), data=MemoryGroupConfig(0, 2))
        b = prog([Compute(500), Load(0x40), Use()], name="b", core=1, address_offset=0,
                 inst=MemoryGroupConfig(0, 4), data=MemoryGroupConfig(0, 4))
        sim = Simulator(system(a, b), warmup=False, stale_check=True)
        sim.run()
        assert sim.stale_reads and sim.stale_reads[0][1] == "b"

    def test_off_by_default(self):
        a = prog([Store(0x40, 9)], name="a", address_offset=0,
                 inst=MemoryGroupConfig(0, 2), data=MemoryGroupConfig(0, 2))
        b = prog([Compute(500), Load(0x40), Use()], name="b", core=1, address_offset=0,
                 inst=MemoryGroupConfig(0, 4), data=MemoryGroupConfig(0, 4))
        assert run(system(a, b), warmup=False).stale_reads == []
