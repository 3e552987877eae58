"""Simulation kernel.

Events are processed in causal time order from a single heap. A core runs
purely local instructions inline and yields to the heap whenever it touches
shared state (banks, buffers, the network), so every interaction happens at
the cycle it is issued. Shared resources are servers with next-free times;
mesh links are wormhole reservations.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
from collections import deque
from dataclasses import dataclass, field, fields

from . import mem
from .config import (
    BYPASS_ALL, BYPASS_L1, BYPASS_NONE, CACHE, DATA_SLOT, INST_SLOT, LOCAL_MULTICAST, MEMCTRL,
    MEMORY_GROUP, REMOTE_CORE, SCRATCHPAD, ChannelMapEntry, ConfigError, SystemConfig,
    _check_overlap_modes,
)
from .hierarchy import L2Tile, MainMemory, MemoryController, directory_lookup
from .noc import LinkReservations, TrafficClass, route_latency
from .workload import (
    ATOMIC_BEGIN, ATOMIC_END, COMPUTE, FETCH, LINEOP, LOAD, RECONFIG, RECV, SEND, STORE, USE,
    CoreModel, load_trace, validate_trace,
)

L1_RESPONSE_DELAY = 2  # bank access cycle + one network cycle back to the core
BANK_QUEUE = 4

ITERATION_RULE = ("each program stops at its first iteration boundary after every "
                  "program has completed one timed iteration")
CALIBRATION = (
    "route latency = hops + 1 (one cycle per hop plus one for injection/ejection)",
    "L1 hit = 3 cycles request to response",
    "line transfer = 8 flits, one per cycle",
)


class SimulationError(RuntimeError):
    pass


class DeadlockError(SimulationError):
    def __init__(self, message, blocked=()):
        self.blocked = list(blocked)
        if self.blocked:
            message += "; blocked: " + "; ".join(self.blocked)
        super().__init__(message)


class LivelockError(mem.LivelockError, SimulationError):
    pass


@dataclass
class ProgStats:
    instructions: int = 0
    inst_l0_hits: int = 0
    inst_l0_misses: int = 0
    inst_l1_hits: int = 0
    inst_l1_misses: int = 0
    data_accesses: int = 0
    data_l1_hits: int = 0
    data_l1_misses: int = 0
    data_bypassed: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    mem_requests: int = 0
    stall_memory: int = 0
    stall_network: int = 0
    stall_credits: int = 0
    stall_fetch: int = 0
    reconfig_cycles: int = 0
    writebacks: int = 0

    def snapshot(self):
        return dict(self.__dict__)

    def minus(self, base):
        return ProgStats(**{k: v - base[k] for k, v in self.__dict__.items()})


STAT_FIELDS = tuple(f.name for f in fields(ProgStats))


class Slot:
    """A response the core is waiting for; ``ready`` is None until scheduled."""

    __slots__ = ("ready", "waiter")

    def __init__(self):
        self.ready = None
        self.waiter = None


class Req:
    __slots__ = ("kind", "addr", "group", "core", "slots", "inst", "payload", "packet", "ret")

    def __init__(self, kind, addr, group, core, slots=(), inst=False, payload=(), packet=None,
                 ret=None):
        self.kind = kind
        self.addr = addr
        self.group = group
        self.core = core
        self.slots = slots
        self.inst = inst
        self.payload = payload
        self.packet = packet
        self.ret = ret


class BankServer:
    __slots__ = ("tile", "bank", "queue", "free_at", "blocked", "kick_at", "inflight",
                 "waiters", "busy_cycles", "reserve_serial")

    def __init__(self, tile, bank):
        self.tile = tile
        self.bank = bank
        self.queue = deque()
        self.free_at = 0
        self.blocked = False
        self.kick_at = None
        self.inflight = 0
        self.waiters = []
        self.busy_cycles = 0
        self.reserve_serial = 0

    def occupancy(self):
        return self.inflight + len(self.queue)


class Conn:
    """Credit state of one inter-tile core-to-core channel."""

    __slots__ = ("limit", "credits", "waiter")

    def __init__(self, limit):
        self.limit = limit
        self.credits = limit
        self.waiter = None


class Core:
    def __init__(self, sim, index, binding, trace, offset):
        self.sim = sim
        self.index = index
        self.binding = binding
        self.name = binding.name
        self.tile = tuple(binding.tile)
        self.core = binding.core
        self.model = CoreModel(self.tile, self.core, trace)
        self.trace = trace
        self.offset = offset
        self.pos = 0
        self.pending = deque()  # secondary-channel events run ahead of the trace
        self.in_secondary = False
        self.time = 0
        self.stats = ProgStats()
        self.outstanding = deque()
        self.finished = False
        self.iterations = 0
        self.timed_start = None
        self.timed_cycles = None
        self.timed_stats = None
        self.total_cycles = 0
        self.base_snapshot = None
        self.blocked = None  # stall category while waiting
        self.block_start = 0
        self.block_reason = ""
        self.atomic = None
        self.reserved = set()
        self.conns = {}
        depth = sim.cfg.buffer_depth
        self.buffers = [deque() for _ in range(sim.cfg.buffers_per_core)]
        self.buffer_space = [depth] * sim.cfg.buffers_per_core
        self.buffer_waiters = [[] for _ in range(sim.cfg.buffers_per_core)]
        self.fetch = None  # in-flight instruction fetch: (pc, length, slots, words)
        self.iter_start = None
        self.scheduled = False

    def __repr__(self):
        return f"Core({self.name}@{self.tile}/{self.core})"

    def block(self, kind, reason):
        self.blocked = kind
        self.block_start = self.time
        self.block_reason = reason

    def describe(self):
        ev = self.trace[self.pos] if self.pos < len(self.trace) else None
        return f"{self.name} {self.tile}/{self.core} at event {self.pos} {ev}: {self.block_reason}"


class Simulator:
    def __init__(self, cfg: SystemConfig, traces=None, warmup=True, watchdog=None,
                 iteration_limit=None, record=False, stale_check=False):
        cfg.validate()
        self.cfg = cfg
        self.warmup = warmup
        self.watchdog = watchdog if watchdog is not None else cfg.watchdog
        self.record = record
        self.stale_check = stale_check
        self.stale_reads = []
        self.heap = []
        self.seq = 0
        self.now = 0
        self.last_progress = 0
        self.links = LinkReservations()
        self.memory = MainMemory(cfg.words_per_line)
        self.memctrl = MemoryController(cfg.main_memory_latency, self.memory)
        self.memctrl_tile = tuple(cfg.memctrl_tile)
        self.l2 = {tuple(t): L2Tile(t, cfg.lines_per_bank, cfg.words_per_line)
                   for t in cfg.l2_tiles}
        self.l2_free = {t: 0 for t in self.l2}
        self.directory = cfg.directory
        self.banks = {}
        self.servers = {}
        self.reconfig_log = []
        self.packet_serial = 0
        self.injections_scheduled = 0
        self.cores = []
        self.by_location = {}
        for i, binding in enumerate(cfg.programs):
            trace = self._trace_for(i, binding, traces)
            offset = binding.address_offset if binding.address_offset is not None else i << 24
            core = Core(self, i, binding, trace, offset)
            core.model.record = record
            tile = core.tile
            if tile not in self.banks:
                self.banks[tile] = [mem.MemoryBank(b, cfg.lines_per_bank, cfg.words_per_line)
                                    for b in range(cfg.banks_per_tile)]
                self.servers[tile] = [BankServer(tile, b) for b in self.banks[tile]]
            core.model.cmt.update(INST_SLOT, ChannelMapEntry.to_group(binding.inst))
            core.model.cmt.update(DATA_SLOT, ChannelMapEntry.to_group(binding.data))
            for slot, entry in sorted(binding.channels.items()):
                core.model.cmt.update(slot, entry)
            self.cores.append(core)
            self.by_location[(tile, core.core)] = core
        self.max_iterations = iteration_limit

    def _trace_for(self, i, binding, traces):
        if traces is not None and i < len(traces) and traces[i] is not None:
            trace = list(traces[i])
        elif binding.trace is not None:
            trace = list(binding.trace)
        elif binding.trace_path:
            trace = load_trace(binding.trace_path, validate=False)
        else:
            raise ConfigError(f"program {binding.name} has no trace bound")
        validate_trace(trace, balanced=binding.data.return_channel is None)
        return trace

    # -- event plumbing -------------------------------------------------------

    def at(self, t, fn, arg=None):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, fn, arg))

    def wake(self, core, t):
        if not core.scheduled:
            core.scheduled = True
            self.at(t, self._resume, core)

    def _resume(self, core, t):
        core.scheduled = False
        self.run_core(core, t)

    def inject(self, target, events, at=0):
        """Deliver an instruction packet on a core's secondary channel at cycle ``at``.

        ``target`` is a program index or a ``(tile, core)`` pair.
        """
        core = self.cores[target] if isinstance(target, int) else self.by_location[
            (tuple(target[0]), target[1])]
        events = list(events)
        self.injections_scheduled += 1
        self.at(at, self._inject, (core, events))

    def _inject(self, arg, t):
        core, events = arg
        self.injections_scheduled -= 1
        core.model.inject_remote_packet(events, t)
        if core.blocked is None and not core.scheduled:
            # Idle or between packets: run at once; a core mid-packet picks it
            # up at its next boundary.
            if core.finished or core.time <= t:
                self.wake(core, max(t, core.time))

    # -- core execution ------------------------------------------------------------

    def run_core(self, core, now):
        if core.blocked is not None:
            waited = now - core.block_start
            if waited > 0:
                st = core.stats
                setattr(st, core.blocked, getattr(st, core.blocked) + waited)
            core.blocked = None
        t = max(core.time, now)
        core.time = t
        trace = core.trace
        stats = core.stats
        start = t
        while True:
            if core.pending:
                ev = core.pending[0]
                secondary = True
            else:
                if core.finished:
                    if core.time > start:
                        self.last_progress = max(self.last_progress, core.time)
                    return
                at_boundary = core.pos >= len(trace) or (
                    trace[core.pos][0] == FETCH and core.fetch is None)
                if at_boundary and self.injections_scheduled and core.time > now:
                    # An injected packet may arrive before this boundary is reached.
                    self.wake(core, core.time)
                    break
                if core.pos >= len(trace):
                    if self._packet_boundary(core):
                        continue
                    if self._end_iteration(core):
                        return
                    if core.time > now:
                        # Another pass while partners finish: let the clock catch up.
                        self.wake(core, core.time)
                        break
                    continue
                ev = trace[core.pos]
                secondary = False
                if ev[0] == FETCH and core.fetch is None and self._packet_boundary(core):
                    continue
            kind = ev[0]
            if kind == COMPUTE:
                core.time += ev[1]
                stats.instructions += ev[1]
            elif kind == USE:
                slot = core.outstanding[0]
                if slot.ready is None:
                    slot.waiter = core
                    core.block("stall_memory", "waiting for a load response")
                    break
                if slot.ready > core.time:
                    stats.stall_memory += slot.ready - core.time
                    core.time = slot.ready
                core.outstanding.popleft()
                core.time += 1
                stats.instructions += 1
            elif kind == FETCH:
                if not self._fetch(core, ev, now):
                    break
            else:
                if core.time > now:
                    self.wake(core, core.time)
                    break
                done = self._interact(core, ev, now)
                if not done:
                    break
            if secondary:
                core.pending.popleft()
                if core.model.record:
                    core.model.log.append(("secondary", core.pos))
            else:
                if core.model.record:
                    core.model.log.append(("primary", core.pos))
                core.pos += 1
        if core.time > start:
            self.last_progress = max(self.last_progress, core.time)

    def _packet_boundary(self, core):
        """Start a queued secondary-channel packet, if one has arrived."""
        events = core.model.next_secondary(core.time)
        if events is None:
            return False
        if core.model.record:
            core.model.log.append(("boundary", core.pos))
        core.pending.extend(events)
        return True

    def _end_iteration(self, core):
        """Handle the end of one pass over the trace; True when the core stops."""
        t = core.time
        if core.outstanding:
            raise SimulationError(f"{core.name}: iteration ended with unused load responses")
        core.iterations += 1
        core.pos = 0
        empty_pass = t == core.iter_start
        core.iter_start = t
        timed_index = 1 if self.warmup else 0
        first_timed_done = core.iterations == timed_index + 1
        if core.iterations == timed_index and core.timed_start is None:
            core.timed_start = t
            core.base_snapshot = core.stats.snapshot()
        if first_timed_done:
            if core.timed_start is None:
                core.timed_start = 0
                core.base_snapshot = ProgStats().snapshot()
            core.timed_cycles = t - core.timed_start
            core.timed_stats = core.stats.minus(core.base_snapshot)
        all_done = all(c.timed_cycles is not None for c in self.cores)
        limit = self.max_iterations
        if all_done or not core.trace or empty_pass or (
                limit is not None and core.iterations >= limit):
            if core.timed_cycles is not None or not core.trace:
                if core.timed_cycles is None:
                    core.timed_cycles = 0
                    core.timed_stats = ProgStats()
                core.finished = True
                core.total_cycles = t
                if all(c.finished for c in self.cores):
                    self.done = True
                return True
        return False

    # -- instruction fetch -------------------------------------------------------

    def _fetch(self, core, ev, now):
        """Execute a packet header. False while waiting for instructions."""
        pc, length = ev[1] + core.offset, ev[2]
        if core.fetch is None:
            l0 = core.model.l0
            if l0.contains(pc, length):
                l0.hits += 1
                core.stats.inst_l0_hits += 1
                return True
            if core.time > now:
                self.wake(core, core.time)
                return False
            l0.misses += 1
            core.stats.inst_l0_misses += 1
            group = core.model.cmt.group(INST_SLOT)
            lb = self.cfg.line_bytes
            first_line = pc - pc % lb
            last_line = (pc + 4 * length - 1) // lb * lb
            slots = []
            t = core.time
            for k, line in enumerate(range(first_line, last_line + 1, lb)):
                slot = Slot()
                slots.append(slot)
                req = Req(mem.FETCH_LINE, line, group, core, (slot,), inst=True)
                self._issue_memory(core, req, t + k)
            core.fetch = (pc, length, slots, t)
        pc, length, slots, issued = core.fetch
        for slot in slots:
            if slot.ready is None:
                slot.waiter = core
                core.block("stall_fetch", "waiting for instructions")
                return False
        lb = self.cfg.line_bytes
        first_line = pc - pc % lb
        start = 0
        prev = None
        line_first_word = {}
        for i in range(length):
            addr = pc + 4 * i
            k = (addr - first_line) // lb
            word = (addr % lb) // 4
            base = line_first_word.setdefault(k, word)
            avail = slots[k].ready + (word - base)
            if prev is not None and avail < prev + 1:
                avail = prev + 1
            prev = avail
            start = max(start, avail - i)
        core.fetch = None
        if start > core.time:
            core.stats.stall_fetch += start - core.time
            core.time = start
        core.model.l0.insert(pc, length)
        return True

    # -- interactions -------------------------------------------------------------

    def _interact(self, core, ev, now):
        kind = ev[0]
        if kind == LOAD:
            return self._word_op(core, mem.LOAD_WORD, ev[1] + core.offset, now)
        if kind == STORE:
            return self._word_op(core, mem.STORE_WORD, ev[1] + core.offset, now, (ev[2],))
        if kind == LINEOP:
            return self._line_op(core, ev[1], ev[2] + core.offset, now)
        if kind == SEND:
            return self._send(core, ev[1], ev[2], now)
        if kind == RECV:
            return self._recv(core, ev[1], now)
        if kind == RECONFIG:
            return self._reconfig(core, ev[1], ev[2], now)
        if kind == ATOMIC_BEGIN:
            self.packet_serial += 1
            core.atomic = self.packet_serial
            core.time += 1
            core.stats.instructions += 1
            return True
        if kind == ATOMIC_END:
            pid = core.atomic
            core.atomic = None
            for (tile, b) in sorted(core.reserved):
                self.at(now + 1, self._release, (self.servers[tile][b], pid))
            core.reserved.clear()
            core.time += 1
            core.stats.instructions += 1
            return True
        raise SimulationError(f"unknown event {ev!r}")

    def _data_group(self, core):
        group = core.model.cmt.group(DATA_SLOT)
        if group is None:
            raise SimulationError(f"{core.name}: data channel is not a memory group")
        return group

    def _bank_for(self, core, addr, group):
        b = group.base_bank + (addr // self.cfg.line_bytes) % group.size
        return self.servers[core.tile][b]

    def _word_op(self, core, kind, addr, now, payload=()):
        group = self._data_group(core)
        if kind == mem.LOAD_WORD:
            slot = Slot()
            slots = (slot,)
        else:
            slots = ()
        ret = group.return_channel
        req = Req(kind, addr, group, core, slots, payload=payload, packet=core.atomic, ret=ret)
        if group.bypass != BYPASS_NONE:
            core.stats.data_accesses += 1
            core.stats.data_bypassed += 1
            self._bypass(core, req, now)
        else:
            server = self._bank_for(core, addr, group)
            if server.occupancy() >= BANK_QUEUE:
                server.waiters.append(core)
                core.block("stall_memory", f"bank {server.bank.bank_id} input buffer full")
                return False
            core.stats.data_accesses += 1
            self._issue_memory(core, req, now)
        if slots and ret is None:
            core.outstanding.append(slot)
        core.time = now + 1
        core.stats.instructions += 1
        return True

    def _line_op(self, core, kind, addr, now):
        group = self._data_group(core)
        wpl = self.cfg.words_per_line
        issue = 1
        slots = ()
        payload = ()
        if kind == mem.FETCH_LINE:
            slots = tuple(Slot() for _ in range(wpl))
        elif kind == mem.STORE_LINE:
            payload = (0,) * wpl
            issue = wpl  # one flit per word
        ret = group.return_channel if kind == mem.FETCH_LINE else None
        req = Req(kind, addr, group, core, slots, payload=payload, packet=core.atomic, ret=ret)
        counted = kind in (mem.FETCH_LINE, mem.STORE_LINE, mem.PREFETCH_LINE)
        if group.bypass != BYPASS_NONE:
            if counted:
                core.stats.data_accesses += 1
                core.stats.data_bypassed += 1
            if kind in (mem.FETCH_LINE, mem.STORE_LINE):
                self._bypass(core, req, now + issue - 1)
            else:
                for s in slots:
                    s.ready = now
        else:
            server = self._bank_for(core, addr, group)
            if server.occupancy() >= BANK_QUEUE:
                server.waiters.append(core)
                core.block("stall_memory", f"bank {server.bank.bank_id} input buffer full")
                return False
            if counted:
                core.stats.data_accesses += 1
            self._issue_memory(core, req, now + issue - 1)
        if ret is None:
            core.outstanding.extend(slots)
        core.time = now + issue
        core.stats.instructions += issue
        return True

    # -- banks ---------------------------------------------------------------------

    def _issue_memory(self, core, req, t):
        """Send ``req`` from a core at cycle ``t``; it reaches the bank at t+1."""
        server = self._bank_for(core, req.addr, req.group)
        server.inflight += 1
        self.at(t + 1, self._bank_arrive, (server, req))

    def _bank_arrive(self, arg, t):
        server, req = arg
        server.inflight -= 1
        server.queue.append(req)
        self._kick(server, t)

    def _kick_event(self, server, t):
        server.kick_at = None
        self._kick(server, t)

    def _kick(self, server, t):
        while server.queue and not server.blocked:
            if server.free_at > t:
                if server.kick_at is None or server.kick_at > server.free_at:
                    server.kick_at = server.free_at
                    self.at(server.free_at, self._kick_event, server)
                return
            owner = server.bank.reserved_by
            if owner is None:
                req = server.queue.popleft()
            else:
                req = None
                for r in server.queue:
                    if r.packet == owner:
                        req = r
                        break
                if req is None:
                    return
                server.queue.remove(req)
            if server.waiters:
                self.wake(server.waiters.pop(0), t)
            self._serve(server, req, t)

    def _reserve(self, server, req, t):
        bank = server.bank
        if req.packet is None or bank.reserved_by is not None:
            return
        bank.reserved_by = req.packet
        server.reserve_serial += 1
        req.core.reserved.add((server.tile, bank.bank_id))
        bound = self.cfg.atomic_bound
        self.at(t + bound + 1, self._livelock_check, (server, server.reserve_serial, t))

    def _livelock_check(self, arg, t):
        server, serial, since = arg
        if server.bank.reserved_by is not None and server.reserve_serial == serial:
            raise LivelockError(
                f"bank {server.bank.bank_id} on tile {server.tile} reserved by atomic packet "
                f"{server.bank.reserved_by} since cycle {since}, over the bound of "
                f"{self.cfg.atomic_bound} cycles")

    def _release(self, arg, t):
        server, pid = arg
        if server.bank.reserved_by == pid:
            server.bank.reserved_by = None
            self._kick(server, t)

    def _stats_hit(self, req, hit):
        st = req.core.stats
        if req.inst:
            if hit:
                st.inst_l1_hits += 1
            else:
                st.inst_l1_misses += 1
        elif req.kind not in (mem.FLUSH_LINE, mem.INVALIDATE_LINE):
            if hit:
                st.data_l1_hits += 1
            else:
                st.data_l1_misses += 1

    def _op(self, req):
        return mem.MemOp(req.kind, req.addr, req.payload, req.packet)

    def _serve(self, server, req, s):
        bank = server.bank
        group = req.group
        self._reserve(server, req, s)
        if req.kind in (mem.FLUSH_LINE, mem.INVALIDATE_LINE):
            res = mem.line_op(bank, req.kind, req.addr, group, group.mode)
            if res.writeback is not None:
                req.core.stats.writebacks += 1
                self._writeback(server.tile, res.writeback, s + 1, req.core)
            server.free_at = s + res.busy
            server.busy_cycles += res.busy
            return
        if self.stale_check and not req.inst and req.kind in (mem.LOAD_WORD, mem.FETCH_LINE):
            self._check_stale(server, req, s)
        res = mem.access(bank, self._op(req), group.mode, group)
        if res.outcome == mem.HIT:
            self._stats_hit(req, True)
            self._finish(server, req, res, s)
            return
        self._stats_hit(req, False)
        server.blocked = True
        if res.writeback is not None:
            req.core.stats.writebacks += 1
            self._writeback(server.tile, res.writeback, s + 1, req.core)
        wb_busy = res.busy
        line = res.refill

        def filled(words, f):
            ba = bank.locate(req.addr, group)
            victim = bank.fill(ba.set, line, words)
            if victim is not None:  # the set was reused while the line was in flight
                self._writeback(server.tile, victim, f + 1, req.core)
            hit = mem.access(bank, self._op(req), group.mode, group, count=False)
            server.blocked = False
            server.busy_cycles += f - s
            self._finish(server, req, hit, f, floor=s + wb_busy)
            self._kick(server, f)

        self._refill(server.tile, line, s + 1, req.core, filled, req.inst)

    def _finish(self, server, req, res, s, floor=0):
        """Complete an access that hits at cycle ``s``."""
        n = len(res.words) if req.kind == mem.FETCH_LINE else 0
        busy = max(res.busy, n, 1)
        if req.kind == mem.FETCH_LINE and req.inst:
            busy = self.cfg.words_per_line
        server.free_at = max(s + busy, floor)
        server.busy_cycles += busy
        if res.writeback is not None:
            req.core.stats.writebacks += 1
            self._writeback(server.tile, res.writeback, s + 1, req.core)
        self._respond(req, s + L1_RESPONSE_DELAY)

    def _respond(self, req, r0):
        if req.ret is not None:
            dst = self.by_location.get((req.core.tile, req.ret[0]))
            if dst is None:
                raise SimulationError(f"return channel names core {req.ret[0]} with no program")
            n = len(req.slots) if req.slots else 0
            for i in range(n):
                self.at(r0 + i, self._deliver, (dst, req.ret[1], None))
            return
        for i, slot in enumerate(req.slots):
            slot.ready = r0 + i
            if slot.waiter is not None:
                w = slot.waiter
                slot.waiter = None
                if w.blocked is not None:
                    self.wake(w, r0 + i)

    def _check_stale(self, server, req, s):
        """Flag reads that miss a newer dirty copy held under another group shape."""
        line = req.addr - req.addr % self.cfg.line_bytes
        for b in self.banks[server.tile]:
            if b is server.bank:
                continue
            for si, tag in enumerate(b.tags):
                if tag == line and b.dirty[si]:
                    self.stale_reads.append((s, req.core.name, line, b.bank_id))
                    return

    # -- next levels -----------------------------------------------------------------

    def _call(self, arg, t):
        fn, words = arg
        fn(words, t)

    def _mem_read(self, src, line, depart, core, cb, nflits):
        """Request ``line`` from the controller; ``cb(words, t)`` runs when the
        last of ``nflits`` response flits reaches ``src``."""
        core.stats.mem_requests += 1
        arr = self.links.traverse(src, self.memctrl_tile, TrafficClass.MEM_REQ, depart, 1)

        def accepted(_, t):
            out = self.memctrl.request(t)
            head = self.links.traverse(self.memctrl_tile, src, TrafficClass.MEM_RESP, out, nflits)
            self.at(head + nflits - 1, self._call, (cb, self.memory.read(line)))

        self.at(arr, accepted)

    def _l2_slot(self, tile, t):
        s = max(t, self.l2_free[tile])
        self.l2_free[tile] = s + 1
        return s

    def _refill(self, tile, line, depart, core, cb, inst=False, nflits=None):
        """Fetch a line for an L1 bank (or a bypassing core) from its next level."""
        wpl = self.cfg.words_per_line
        nflits = wpl if nflits is None else nflits
        target, phys = directory_lookup(line, self.directory)
        if target == MEMCTRL:
            self._mem_read(tile, phys, depart, core, cb, nflits)
            return
        target = tuple(target)
        l2 = self.l2[target]
        arr = self.links.traverse(tile, target, TrafficClass.L1_REQ, depart, 1)

        def respond(words, ready):
            head = self.links.traverse(target, tile, TrafficClass.L2_RESP, ready, nflits)
            self.at(head + nflits - 1, self._call, (cb, words))

        def at_l2(_, t):
            s = self._l2_slot(target, t)
            res = l2.access(phys, mem.LOAD_LINE)
            if res.outcome == mem.HIT:
                core.stats.l2_hits += 1
                respond(res.words, s + 1)
                return
            core.stats.l2_misses += 1

            def l2_filled(words, f):
                victim = l2.install(phys - phys % self.cfg.line_bytes, words)
                if victim is not None:
                    self._mem_write(target, victim, f + 1)
                respond(words, f + 1)

            self._mem_read(target, phys - phys % self.cfg.line_bytes, s + 1, core, l2_filled, wpl)

        self.at(arr, at_l2)

    def _mem_write(self, src, wb, depart):
        line, words = wb
        n = self.cfg.words_per_line
        arr = self.links.traverse(src, self.memctrl_tile, TrafficClass.MEM_REQ, depart, n)
        self.at(arr + n - 1, self._memctrl_write, (line, words))

    def _memctrl_write(self, arg, t):
        self.memctrl.write_back(t, *arg)

    def _writeback(self, tile, wb, depart, core):
        """Fire-and-forget write of an evicted dirty L1 line to its next level."""
        line, words = wb
        target, phys = directory_lookup(line, self.directory)
        if target == MEMCTRL:
            self._mem_write(tile, (phys, words), depart)
            return
        target = tuple(target)
        n = self.cfg.words_per_line
        arr = self.links.traverse(tile, target, TrafficClass.L1_REQ, depart, n)

        def at_l2(_, t):
            s = self._l2_slot(target, t)
            res = self.l2[target].access(phys, mem.STORE_LINE, words, count=False)
            if res.writeback is not None:
                self._mem_write(target, res.writeback, s + 1)

        self.at(arr + n - 1, at_l2)

    def _bypass(self, core, req, t):
        """Send a request from the core straight past its L1 at cycle ``t``."""
        tile = core.tile
        lb = self.cfg.line_bytes
        line = req.addr - req.addr % lb
        skip_all = req.group.bypass == BYPASS_ALL
        if req.kind in (mem.STORE_WORD, mem.STORE_LINE):
            words = tuple(req.payload)
            if skip_all or directory_lookup(line, self.directory)[0] == MEMCTRL:
                phys = directory_lookup(line, self.directory)[1]
                n = len(words)
                arr = self.links.traverse(tile, self.memctrl_tile, TrafficClass.MEM_REQ, t, n)
                self.at(arr + n - 1, self._memctrl_write_partial, (phys, req.addr, words))
                return
            target, phys = directory_lookup(req.addr, self.directory)
            target = tuple(target)
            n = len(words)
            arr = self.links.traverse(tile, target, TrafficClass.L1_REQ, t, n)
            kind = req.kind

            def at_l2(_, t2):
                self._l2_slot(target, t2)
                res = self.l2[target].access(phys, kind, words)
                if res.outcome == mem.MISS:  # no write-allocate past a bypassed L1
                    self._mem_write(target, (phys - phys % lb, self._merge(phys, words)), t2 + 1)

            self.at(arr + n - 1, at_l2)
            return
        n = len(req.slots) if req.slots else 1
        offset = (req.addr % lb) // self.cfg.word_bytes

        def deliver(words, last):
            self._respond(req, last - (n - 1))

        if skip_all:
            self._mem_read(tile, line, t, core, deliver, n)
            return
        target, phys = directory_lookup(line, self.directory)
        if target == MEMCTRL:
            self._mem_read(tile, phys, t, core, deliver, n)
            return
        # L2 serves just the requested words; it still allocates the line on a miss.
        self._refill(tile, line, t, core, deliver, nflits=n)

    def _merge(self, addr, words):
        lb = self.cfg.line_bytes
        line = addr - addr % lb
        cur = list(self.memory.read(line))
        if len(words) == len(cur):
            return tuple(words)
        i = (addr % lb) // self.cfg.word_bytes
        cur[i:i + len(words)] = words
        return tuple(cur)

    def _memctrl_write_partial(self, arg, t):
        line_or_phys, addr, words = arg
        lb = self.cfg.line_bytes
        line = line_or_phys - line_or_phys % lb
        self.memctrl.write_back(t, line, self._merge(line + addr % lb, words))

    # -- core-to-core channels -----------------------------------------------------

    def _dest(self, tile, core_id, what):
        dst = self.by_location.get((tuple(tile), core_id))
        if dst is None:
            raise SimulationError(f"{what}: no program bound to core {core_id} on tile {tuple(tile)}")
        return dst

    def _send(self, core, ch, word, now):
        entry = core.model.cmt[ch] if 0 <= ch < len(core.model.cmt) else None
        if entry is None:
            raise SimulationError(f"{core.name}: SEND on unmapped channel {ch}")
        if entry.kind == REMOTE_CORE:
            dtile, dcore, dbuf = entry.remote_core
            dtile = tuple(dtile)
            dst = self._dest(dtile, dcore, f"{core.name} channel {ch}")
            if dtile == core.tile:
                if dst.buffer_space[dbuf] <= 0:
                    dst.buffer_waiters[dbuf].append(core)
                    core.block("stall_network", f"buffer {dbuf} of core {dcore} full")
                    return False
                dst.buffer_space[dbuf] -= 1
                self.at(now + 1, self._deliver, (dst, dbuf, None))
            else:
                conn = core.conns.get(ch)
                if conn is None:
                    limit = entry.credit_limit or self.cfg.default_credits
                    conn = core.conns[ch] = Conn(limit)
                if conn.credits <= 0:
                    conn.waiter = core
                    core.block("stall_credits", f"no credits on channel {ch}")
                    return False
                conn.credits -= 1
                dst.buffer_space[dbuf] -= 1
                arr = self.links.traverse(core.tile, dtile, TrafficClass.CORE, now, 1)
                self.at(arr, self._deliver, (dst, dbuf, (conn, core.tile, dtile)))
        elif entry.kind == LOCAL_MULTICAST:
            buf = entry.multicast_buffer
            dsts = [self._dest(core.tile, c, f"{core.name} multicast")
                    for c in range(self.cfg.cores_per_tile) if entry.multicast_mask >> c & 1]
            full = [d for d in dsts if d.buffer_space[buf] <= 0]
            if full:
                for d in full:
                    d.buffer_waiters[buf].append(core)
                core.block("stall_network", f"multicast buffer {buf} full")
                return False
            for d in dsts:
                d.buffer_space[buf] -= 1
                self.at(now + 1, self._deliver, (d, buf, None))
        else:
            raise SimulationError(f"{core.name}: SEND on memory channel {ch}; use LOAD/STORE")
        core.time = now + 1
        core.stats.instructions += 1
        return True

    def _deliver(self, arg, t):
        dst, buf, conn = arg
        dst.buffers[buf].append((t, conn))
        if dst.blocked == "stall_network" and getattr(dst, "recv_wait", None) == buf:
            dst.recv_wait = None
            self.wake(dst, t)

    def _recv(self, core, buf, now):
        q = core.buffers[buf]
        if not q:
            core.recv_wait = buf
            core.block("stall_network", f"waiting on input buffer {buf}")
            return False
        _, conn = q.popleft()
        core.buffer_space[buf] += 1
        waiters, core.buffer_waiters[buf] = core.buffer_waiters[buf], []
        for w in waiters:
            self.wake(w, now)
        if conn is not None:
            c, src, dst = conn
            self.at(now + route_latency(dst, src), self._credit, c)
        core.time = now + 1
        core.stats.instructions += 1
        return True

    def _credit(self, conn, t):
        conn.credits += 1
        if conn.waiter is not None:
            w, conn.waiter = conn.waiter, None
            self.wake(w, t)

    # -- reconfiguration -------------------------------------------------------------

    def _tile_groups(self, tile, skip=None):
        groups = []
        for c in self.cores:
            if c.tile != tile:
                continue
            for slot, entry in enumerate(c.model.cmt.entries):
                if (c, slot) == skip or entry is None or entry.kind != MEMORY_GROUP:
                    continue
                groups.append(entry.group)
        return groups

    def _reconfig(self, core, slot, entry, now):
        cost = self.apply_reconfig(core, slot, entry, now)
        core.time = now + cost
        core.stats.instructions += 1
        return True

    def apply_reconfig(self, core, slot, entry, now=None):
        """Rewrite one channel-map entry; return the stall charged to ``core``."""
        now = self.now if now is None else now
        if isinstance(core, int):
            core = self.cores[core]
        table = core.model.cmt
        old = table[slot]
        if entry.kind == MEMORY_GROUP:
            entry.group.validate(self.cfg.banks_per_tile, self.cfg.cores_per_tile,
                                 self.cfg.buffers_per_core)
            _check_overlap_modes(self._tile_groups(core.tile, skip=(core, slot)) + [entry.group])
        banks = self.banks[core.tile]
        flush = 0
        flushed = ()
        if old is not None and old.kind == MEMORY_GROUP:
            new = entry.group if entry.kind == MEMORY_GROUP else None
            if new is None or (old.group.base_bank, old.group.size, old.group.mode) != (
                    new.base_bank, new.size, new.mode):
                before = sum(banks[b].stats.writebacks for b in old.group.banks)
                flush = mem.flush_group(banks, old.group, sink=self.memory.write)
                core.stats.writebacks += sum(banks[b].stats.writebacks for b in old.group.banks) - before
                flushed = old.group.banks
        cost = table.update(slot, entry) + flush
        for b in flushed:
            server = self.servers[core.tile][b]
            server.free_at = max(server.free_at, now + cost)
        core.stats.reconfig_cycles += cost
        self.reconfig_log.append((now, core.name, slot, cost))
        return cost

    # -- driver -------------------------------------------------------------------------

    def _scan_stuck(self, t):
        """A core blocked for longer than the watchdog is stuck even if others run."""
        for c in self.cores:
            if c.blocked is not None and not c.finished and t - c.block_start > self.watchdog:
                raise DeadlockError(
                    f"watchdog: {c.name} blocked for {t - c.block_start} cycles (cycle {t})",
                    self.blocked_components())

    def blocked_components(self):
        out = [c.describe() for c in self.cores if not c.finished]
        for tile, servers in sorted(self.servers.items()):
            for s in servers:
                if s.queue or s.blocked or s.bank.reserved_by is not None:
                    out.append(f"bank {s.bank.bank_id}@{tile}: queue={len(s.queue)} "
                               f"blocked={s.blocked} reserved_by={s.bank.reserved_by}")
        return out

    def run(self):
        self.done = not self.cores
        for core in self.cores:
            self.wake(core, 0)
        heap = self.heap
        pop = heapq.heappop
        next_scan = self.watchdog
        while heap and not self.done:
            t, _, fn, arg = pop(heap)
            if t > self.last_progress + self.watchdog:
                raise DeadlockError(
                    f"watchdog: no progress for {self.watchdog} cycles (cycle {t})",
                    self.blocked_components())
            if t > next_scan:
                self._scan_stuck(t)
                next_scan = t + max(1, self.watchdog // 2)
            self.now = t
            fn(arg, t)
        if not self.done and all(c.timed_cycles is not None for c in self.cores):
            # Every timed iteration is complete; cores left waiting on partners
            # that already stopped end where they blocked.
            for c in self.cores:
                if not c.finished:
                    c.finished = True
                    c.total_cycles = c.block_start if c.blocked else c.time
            self.done = True
        if not self.done:
            raise DeadlockError(f"deadlock at cycle {self.now}: every component is blocked",
                                self.blocked_components())
        return self.report()

    def report(self, label=""):
        programs = [ProgramReport(c.name, c.tile, c.core, c.timed_cycles or 0, c.total_cycles,
                                  c.iterations, c.timed_stats or ProgStats())
                    for c in self.cores]
        end = max([p.total_cycles for p in programs], default=0)
        banks = {}
        for tile, servers in sorted(self.servers.items()):
            for s in servers:
                banks[(tile, s.bank.bank_id)] = (s.bank.stats.accesses, s.busy_cycles)
        header = [f"calibration: {c}" for c in CALIBRATION]
        header.append(f"iteration rule: {ITERATION_RULE}")
        header.append(f"warmup: {'on' if self.warmup else 'off'}")
        header += config_echo(self.cfg)
        return SimReport(label, programs, self.links.utilization(end), banks,
                         list(self.reconfig_log), header, list(self.stale_reads))


def config_echo(cfg):
    out = [f"config: mesh={cfg.mesh_width}x{cfg.mesh_height} memctrl={tuple(cfg.memctrl_tile)} "
           f"l2_tiles={[tuple(t) for t in cfg.l2_tiles]} memory_latency={cfg.main_memory_latency} "
           f"credits={cfg.default_credits} buffer_depth={cfg.buffer_depth}"]
    for p in cfg.programs:
        out.append(f"config: program {p.name} tile={tuple(p.tile)} core={p.core} "
                   f"inst={p.inst} data={p.data}")
    return out


@dataclass
class ProgramReport:
    name: str
    tile: tuple
    core: int
    timed_cycles: int
    total_cycles: int
    iterations: int
    stats: ProgStats

    @property
    def l1_misses(self):
        return self.stats.inst_l1_misses + self.stats.data_l1_misses


CSV_COLUMNS = ("config", "program", "tile", "core", "timed_cycles", "total_cycles",
               "iterations") + STAT_FIELDS


@dataclass
class SimReport:
    label: str
    programs: list
    link_utilization: dict = field(default_factory=dict)
    bank_accesses: dict = field(default_factory=dict)  # (tile, bank) -> (accesses, busy cycles)
    reconfigs: list = field(default_factory=list)
    header: list = field(default_factory=list)
    stale_reads: list = field(default_factory=list)

    def program(self, name):
        for p in self.programs:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def cycles(self):
        return max((p.timed_cycles for p in self.programs), default=0)

    def rows(self, label=None):
        label = self.label if label is None else label
        out = []
        for p in self.programs:
            row = {"config": label, "program": p.name, "tile": f"{p.tile[0]}:{p.tile[1]}",
                   "core": p.core, "timed_cycles": p.timed_cycles,
                   "total_cycles": p.total_cycles, "iterations": p.iterations}
            row.update(p.stats.__dict__)
            out.append(row)
        return out

    def to_csv(self, header=True, label=None):
        buf = io.StringIO()
        if header:
            for line in self.header:
                buf.write(f"# {line}\n")
        w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows(label))
        return buf.getvalue()

    def summary(self):
        lines = [f"{len(self.programs)} program(s); cycles = {self.cycles}"]
        for p in self.programs:
            s = p.stats
            lines.append(
                f"  {p.name} [{p.tile[0]}:{p.tile[1]}/{p.core}] timed={p.timed_cycles} "
                f"total={p.total_cycles} iters={p.iterations} instr={s.instructions} "
                f"L1i {s.inst_l1_hits}/{s.inst_l1_misses} L1d {s.data_l1_hits}/{s.data_l1_misses} "
                f"L2 {s.l2_hits}/{s.l2_misses} mem={s.mem_requests} "
                f"stalls mem={s.stall_memory} net={s.stall_network} cred={s.stall_credits} "
                f"fetch={s.stall_fetch}")
        if self.reconfigs:
            lines.append(f"  reconfigurations: {len(self.reconfigs)}, "
                         f"{sum(r[3] for r in self.reconfigs)} cycles")
        if self.stale_reads:
            lines.append(f"  stale reads flagged: {len(self.stale_reads)}")
        return "\n".join(lines)

    def digest(self):
        text = self.to_csv() + repr(sorted(self.link_utilization.items())) + repr(
            sorted(self.bank_accesses.items()))
        return hashlib.sha256(text.encode()).hexdigest()


def run(config, traces=None, warmup=True, **kw):
    """Simulate ``config`` and return a :class:`SimReport`."""
    if isinstance(warmup, str):
        if warmup not in ("on", "off"):
            raise ValueError("warmup must be 'on' or 'off'")
        warmup = warmup == "on"
    label = kw.pop("label", "")
    rep = Simulator(config, traces, warmup, **kw).run()
    rep.label = label
    return rep


def apply_reconfig(sim, core, event):
    """Apply a RECONFIG trace event for ``core``; returns the stall charged."""
    return sim.apply_reconfig(core, event[1], event[2])
