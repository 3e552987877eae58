"""Trace events, the core's instruction-supply state, and synthetic workloads."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

from .config import (
    CACHE, SCRATCHPAD, ChannelMapEntry, ChannelMapTable, ConfigError, DATA_SLOT, INST_SLOT,
    MemoryGroupConfig, ProgramBinding, SystemConfig, format_group, parse_channel,
)

WORD = 4
LINE = 32
WORDS_PER_LINE = 8
L0_CAPACITY = 64
MAX_PACKET = 64

# Event kinds, also the trace-file mnemonics.
FETCH = "F"
LOAD = "L"
STORE = "S"
USE = "U"
LINEOP = "X"
COMPUTE = "C"
RECONFIG = "R"
SEND = "SND"
RECV = "RCV"
ATOMIC_BEGIN = "AB"
ATOMIC_END = "AE"

LINE_KINDS = {
    "fetch": "fetch_line",
    "flush": "flush_line",
    "inv": "invalidate_line",
    "prefetch": "prefetch_line",
    "storeline": "store_line",
}
LINE_MNEMONICS = {v: k for k, v in LINE_KINDS.items()}


class TraceEvent(NamedTuple):
    kind: str
    a: object = None
    b: object = None


class TraceError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def Fetch(pc, length):
    return TraceEvent(FETCH, pc, length)


def Load(addr):
    return TraceEvent(LOAD, addr)


def Store(addr, word=0):
    return TraceEvent(STORE, addr, word)


def Use():
    return TraceEvent(USE)


def LineOp(kind, addr):
    return TraceEvent(LINEOP, LINE_KINDS.get(kind, kind), addr)


def Compute(n):
    return TraceEvent(COMPUTE, n)


def Reconfig(slot, entry):
    return TraceEvent(RECONFIG, slot, entry)


def Send(channel, word=0):
    return TraceEvent(SEND, channel, word)


def Recv(buffer=0):
    return TraceEvent(RECV, buffer)


def response_words(ev):
    """Words an event adds to the core's outstanding-response queue."""
    if ev.kind == LOAD:
        return 1
    if ev.kind == LINEOP and ev.a == "fetch_line":
        return WORDS_PER_LINE
    return 0


def instruction_count(ev):
    if ev.kind == COMPUTE:
        return ev.a
    if ev.kind == FETCH:
        return 0
    if ev.kind == LINEOP and ev.a == "store_line":
        return WORDS_PER_LINE
    return 1


# -- trace files ---------------------------------------------------------------

def _hex(text, lineno):
    try:
        return int(text, 16)
    except ValueError:
        raise TraceError(f"bad hex value {text!r}", lineno) from None


def _dec(text, lineno):
    try:
        return int(text, 0)
    except ValueError:
        raise TraceError(f"bad integer {text!r}", lineno) from None


def parse_trace(text, validate=True):
    events = []
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        tok = body.split()
        op, args = tok[0], tok[1:]
        try:
            if op == FETCH and len(args) == 2:
                length = _dec(args[1], lineno)
                if not 1 <= length <= MAX_PACKET:
                    raise TraceError(f"packet length {length} outside 1..{MAX_PACKET}", lineno)
                ev = Fetch(_hex(args[0], lineno), length)
            elif op == LOAD and len(args) == 1:
                ev = Load(_hex(args[0], lineno))
            elif op == STORE and len(args) == 2:
                ev = Store(_hex(args[0], lineno), _dec(args[1], lineno))
            elif op == USE and not args:
                ev = Use()
            elif op == LINEOP and len(args) == 2:
                if args[0] not in LINE_KINDS:
                    raise TraceError(f"unknown line operation {args[0]!r}", lineno)
                ev = LineOp(args[0], _hex(args[1], lineno))
            elif op == COMPUTE and len(args) == 1:
                ev = Compute(_dec(args[0], lineno))
            elif op == RECONFIG and len(args) == 2:
                ev = Reconfig(_dec(args[0], lineno), parse_channel(args[1], lineno))
            elif op == SEND and len(args) == 2:
                ev = Send(_dec(args[0], lineno), _dec(args[1], lineno))
            elif op == RECV and len(args) == 1:
                ev = Recv(_dec(args[0], lineno))
            elif op in (ATOMIC_BEGIN, ATOMIC_END) and len(args) == 1:
                ev = TraceEvent(op, _dec(args[0], lineno))
            else:
                raise TraceError(f"malformed event {body!r}", lineno)
        except ConfigError as exc:
            raise TraceError(str(exc), lineno) from None
        _check_alignment(ev, lineno)
        events.append(ev)
        lines.append(lineno)
    if validate:
        validate_trace(events, lines)
    return events


def _check_alignment(ev, lineno=None):
    if ev.kind in (LOAD, STORE) and ev.a % WORD:
        raise TraceError(f"word access {ev.a:#x} is not word-aligned", lineno)
    if ev.kind == LINEOP and ev.b % LINE:
        raise TraceError(f"line operation {ev.b:#x} is not line-aligned", lineno)


def validate_trace(events, lines=None, balanced=True):
    """Check LOAD/USE balance and atomic-region nesting.

    With ``balanced=False`` responses may be left unused, as when a program's
    loads are redirected to another core's buffer.
    """
    outstanding = 0
    atomic = []
    for i, ev in enumerate(events):
        lineno = lines[i] if lines else i + 1
        _check_alignment(ev, lineno)
        outstanding += response_words(ev)
        if ev.kind == USE:
            if outstanding == 0:
                raise TraceError("USE with no outstanding load", lineno)
            outstanding -= 1
        elif ev.kind == ATOMIC_BEGIN:
            atomic.append(ev.a)
        elif ev.kind == ATOMIC_END:
            if not atomic or atomic[-1] != ev.a:
                raise TraceError(f"ATOMIC_END {ev.a} without matching begin", lineno)
            atomic.pop()
        elif ev.kind == COMPUTE and ev.a < 0:
            raise TraceError("negative compute", lineno)
    if outstanding and balanced:
        raise TraceError(f"{outstanding} load response(s) never used (LOAD/USE imbalance)")
    if atomic:
        raise TraceError(f"atomic region {atomic[-1]} never closed")
    return True


def load_trace(path, validate=True):
    return parse_trace(Path(path).read_text(), validate)


def format_event(ev):
    k = ev.kind
    if k == FETCH:
        return f"F {ev.a:#x} {ev.b}"
    if k == LOAD:
        return f"L {ev.a:#x}"
    if k == STORE:
        return f"S {ev.a:#x} {ev.b}"
    if k == USE:
        return "U"
    if k == LINEOP:
        return f"X {LINE_MNEMONICS[ev.a]} {ev.b:#x}"
    if k == COMPUTE:
        return f"C {ev.a}"
    if k == RECONFIG:
        return f"R {ev.a} {format_entry(ev.b)}"
    if k == SEND:
        return f"SND {ev.a} {ev.b}"
    if k == RECV:
        return f"RCV {ev.a}"
    return f"{k} {ev.a}"


def format_entry(entry):
    if entry.group is not None:
        return format_group(entry.group)
    if entry.remote_core is not None:
        (x, y), c, b = entry.remote_core
        text = f"core:{x},{y},{c},{b}"
        if entry.credit_limit is not None:
            text += f",credits={entry.credit_limit}"
        return text
    return f"mcast:{entry.multicast_mask:#x},{entry.multicast_buffer}"


def dump_trace(events, header=None):
    out = []
    if header:
        out += [f"# {line}" for line in header.splitlines()]
    out += [format_event(ev) for ev in events]
    return "\n".join(out) + "\n"


# -- core instruction supply -----------------------------------------------------

class L0Cache:
    """FIFO of whole instruction packets holding at most 64 instructions."""

    def __init__(self, capacity=L0_CAPACITY):
        self.capacity = capacity
        self.packets = deque()
        self.resident = {}
        self.used = 0
        self.hits = 0
        self.misses = 0

    def contains(self, pc, length):
        return self.resident.get(pc, 0) >= length

    def lookup(self, pc, length):
        if self.contains(pc, length):
            self.hits += 1
            return True
        self.misses += 1
        return False

    def insert(self, pc, length):
        if length > self.capacity or pc in self.resident:
            if pc in self.resident:
                self._drop(pc)
            if length > self.capacity:
                return
        while self.used + length > self.capacity:
            old_pc, old_len = self.packets.popleft()
            del self.resident[old_pc]
            self.used -= old_len
        self.packets.append((pc, length))
        self.resident[pc] = length
        self.used += length

    def _drop(self, pc):
        length = self.resident.pop(pc)
        self.packets = deque(p for p in self.packets if p[0] != pc)
        self.used -= length


@dataclass
class CoreModel:
    """Architectural state of one core as the engine sees it."""

    tile: tuple
    core: int
    trace: list
    cmt: ChannelMapTable = field(default_factory=ChannelMapTable)
    l0: L0Cache = field(default_factory=L0Cache)
    secondary: deque = field(default_factory=deque)  # (arrival cycle, events)
    log: list = field(default_factory=list)
    record: bool = False

    def inject_remote_packet(self, events, arrival=0):
        """Queue an instruction packet on the secondary channel; it runs at
        the next packet boundary, ahead of the primary channel."""
        self.secondary.append((arrival, list(events)))

    def next_secondary(self, now):
        if self.secondary and self.secondary[0][0] <= now:
            return self.secondary.popleft()[1]
        return None


# -- synthetic generators ---------------------------------------------------------

LOOP_NEST = "loop_nest"
POINTER_CHASE = "pointer_chase"
STREAMING = "streaming"
PIPELINE_STAGE = "pipeline_stage"
KINDS = (LOOP_NEST, POINTER_CHASE, STREAMING, PIPELINE_STAGE)

ADDRESS_SPACE = 1 << 24  # per-program region; programs are placed 16MB apart


@dataclass(frozen=True)
class ProgramModel:
    kind: str
    inst_bytes: int = 256
    data_bytes: int = 2048
    stride: int = WORD  # bytes between consecutive data accesses
    accesses_per_packet: int = 4
    use_distance: int = 2  # independent cycles between a load and its use
    store_fraction: float = 0.0
    reps: int = 1  # sweeps over the data working set per iteration
    inner: int = 1  # back-to-back executions of each packet (innermost loop)
    seed: int = 0
    code_base: int = 0x0
    data_base: int = 0x100000
    # pipeline_stage
    stage: int = 0
    stages: int = 8
    lines: int = 64
    lookups: int = 2
    stage_compute: int = 1
    line_ops: bool = True
    prefetch: bool = True
    table_bytes: int = 1024

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.inst_bytes <= 0 or self.inst_bytes % WORD:
            raise ValueError("instruction working set must be a positive multiple of 4 bytes")
        if self.data_bytes <= 0 or self.stride <= 0 or self.stride % WORD:
            raise ValueError("data working set and stride must be positive, stride word-aligned")
        if self.data_base + self.data_bytes > ADDRESS_SPACE or self.code_base + self.inst_bytes > self.data_base:
            raise ValueError("working sets do not fit the program's address space")
        if self.accesses_per_packet < 1 or self.use_distance < 0 or self.reps < 1:
            raise ValueError("accesses_per_packet and reps must be >= 1, use_distance >= 0")
        if not 0.0 <= self.store_fraction <= 1.0:
            raise ValueError("store_fraction must lie in [0, 1]")
        return self


def _packets(model):
    n_inst = model.inst_bytes // WORD
    pcs = []
    pc = model.code_base
    remaining = n_inst
    while remaining > 0:
        length = min(MAX_PACKET, remaining)
        pcs.append((pc, length))
        pc += length * WORD
        remaining -= length
    return pcs


def _packet_body(length, addrs, model, rng):
    body = []
    used = 0
    for addr in addrs:
        if model.store_fraction and rng.random() < model.store_fraction:
            body.append(Store(addr, rng.randrange(1 << 16)))
            used += 1
        else:
            body.append(Load(addr))
            if model.use_distance:
                body.append(Compute(model.use_distance))
            body.append(Use())
            used += 2 + model.use_distance
    if used < length:
        body.append(Compute(length - used))
    return body


def _loop_nest(model, rng):
    packets = _packets(model)
    n_words = model.data_bytes // model.stride
    accesses = model.reps * n_words
    execs = max(model.reps * len(packets) * model.inner,
                -(-accesses // model.accesses_per_packet))
    events = []
    k = 0
    for e in range(execs):
        pc, length = packets[(e // model.inner) % len(packets)]
        events.append(Fetch(pc, length))
        addrs = []
        for _ in range(model.accesses_per_packet):
            addrs.append(model.data_base + (k % n_words) * model.stride)
            k += 1
        events += _packet_body(length, addrs, model, rng)
    return events


def _streaming(model, rng, length):
    packets = _packets(model)
    n = length if length is not None else model.data_bytes // model.stride
    events = []
    per = model.accesses_per_packet
    for i in range(0, n, per):
        pc, plen = packets[(i // per) % len(packets)]
        events.append(Fetch(pc, plen))
        addrs = [model.data_base + k * model.stride for k in range(i, min(n, i + per))]
        events += _packet_body(plen, addrs, model, rng)
    return events


def _pointer_chase(model, rng, length):
    lines = model.data_bytes // LINE
    order = list(range(lines))
    rng.shuffle(order)
    nxt = {order[i]: order[(i + 1) % lines] for i in range(lines)}
    n = length if length is not None else lines * model.reps
    packets = _packets(model)
    events = []
    cur = order[0]
    per = model.accesses_per_packet
    for i in range(n):
        if i % per == 0:
            pc, plen = packets[(i // per) % len(packets)]
            events.append(Fetch(pc, plen))
        events += [Load(model.data_base + cur * LINE), Use(), Compute(1)]
        cur = nxt[cur]
    return events


# Pipeline channel and buffer conventions.
PIPE_OUT = 2  # channel-map slot of the link to the next stage
PIPE_IN = 0  # input buffer a stage receives on


def _pipeline_stage(model, rng):
    """One stage of a software pipeline streaming ``lines`` cache lines.

    Stage 0 reads input lines and forwards words; middle stages receive a
    word, do table lookups and compute, and forward it; the last stage
    collects a line and writes it out.
    """
    last = model.stages - 1
    words = model.lines * WORDS_PER_LINE
    pc = model.code_base + model.stage * 0x400
    events = []
    if model.stage == 0:
        for ln in range(model.lines):
            addr = model.data_base + ln * LINE
            if model.line_ops:
                events.append(Fetch(pc, 2 + 2 * WORDS_PER_LINE))
                events.append(LineOp("fetch", addr))
                if model.prefetch:
                    events.append(LineOp("prefetch", addr + LINE))
            else:
                events.append(Fetch(pc, 3 * WORDS_PER_LINE))
                events += [Load(addr + w * WORD) for w in range(WORDS_PER_LINE)]
            for _ in range(WORDS_PER_LINE):
                events += [Use(), Send(PIPE_OUT, 0)]
    elif model.stage == last:
        for ln in range(model.lines):
            addr = model.data_base + ln * LINE
            events.append(Fetch(pc, 2 * WORDS_PER_LINE + 1))
            events += [Recv(PIPE_IN) for _ in range(WORDS_PER_LINE)]
            if model.line_ops:
                events.append(LineOp("storeline", addr))
            else:
                events += [Store(addr + w * WORD, 0) for w in range(WORDS_PER_LINE)]
    else:
        table_words = model.table_bytes // WORD
        body_len = 2 + model.stage_compute + model.lookups * 3
        for _ in range(words):
            events.append(Fetch(pc, body_len))
            events.append(Recv(PIPE_IN))
            for _ in range(model.lookups):
                events += [Load(model.data_base + rng.randrange(table_words) * WORD), Compute(1), Use()]
            events += [Compute(model.stage_compute), Send(PIPE_OUT, 0)]
    return events


def generate_trace(model, length=None):
    """Deterministic one-iteration trace for ``model``.

    ``length`` sets the number of data accesses for streaming and
    pointer-chase models; the other kinds size themselves from the model.
    """
    model.validate()
    rng = random.Random(f"{model.kind}:{model.seed}")
    if model.kind == LOOP_NEST:
        events = _loop_nest(model, rng)
    elif model.kind == STREAMING:
        events = _streaming(model, rng, length)
    elif model.kind == POINTER_CHASE:
        events = _pointer_chase(model, rng, length)
    else:
        events = _pipeline_stage(model, rng)
    return events


# -- ready-made systems ------------------------------------------------------------

def pipeline_system(specialized=True, line_ops=True, lines=64, tile=(1, 1), seed=0,
                    base=None, **stage_kw):
    """Eight-core software pipeline on one tile.

    Specialized: bank 0 holds instructions, bank 1 is the input cache,
    lookup tables sit in scratchpad banks 2-6 and bank 7 is the output
    cache. Otherwise every core shares one unified 8-bank cache group.
    """
    cfg = base if base is not None else SystemConfig()
    tile = tuple(tile)
    shared = MemoryGroupConfig(0, 8, CACHE)
    inst_bank = MemoryGroupConfig(0, 1, CACHE)
    programs = []
    # All stages share one address space so the unified cache sees one set of lines.
    input_base, output_base, table_base = 0x100000, 0x200000, 0x300000
    for k in range(8):
        if k == 0:
            data = MemoryGroupConfig(1, 1, CACHE)
            data_base = input_base
        elif k == 7:
            data = MemoryGroupConfig(7, 1, CACHE)
            data_base = output_base
        else:
            bank = 2 + (k - 1) % 4 if k <= 5 else 6
            data = MemoryGroupConfig(bank, 1, SCRATCHPAD)
            data_base = table_base + (bank - 2) * 0x800
        model = ProgramModel(PIPELINE_STAGE, inst_bytes=256, code_base=0, data_base=data_base,
                             stage=k, lines=lines, line_ops=line_ops, seed=seed + k, **stage_kw)
        channels = {}
        if k < 7:
            channels[PIPE_OUT] = ChannelMapEntry.to_core(tile, k + 1, PIPE_IN)
        programs.append(ProgramBinding(
            name=f"stage{k}", tile=tile, core=k, trace=generate_trace(model),
            inst=inst_bank if specialized else shared,
            data=data if specialized else shared,
            channels=channels, address_offset=0))
    return cfg.with_programs(programs).validate()
