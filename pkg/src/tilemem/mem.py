"""Memory banks: direct-mapped cache or scratchpad storage behind a group mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .config import CACHE, SCRATCHPAD, MemoryGroupConfig

LINE_BYTES = 32
WORD_BYTES = 4
WORDS_PER_LINE = LINE_BYTES // WORD_BYTES
LINES_PER_BANK = 64

# Access outcomes.
HIT = "hit"
MISS = "miss"
STALLED = "stalled"

LOAD_WORD = "load_word"
STORE_WORD = "store_word"
LOAD_LINE = "load_line"
STORE_LINE = "store_line"
PREFETCH_LINE = "prefetch_line"
FLUSH_LINE = "flush_line"
INVALIDATE_LINE = "invalidate_line"
FETCH_LINE = "fetch_line"

WORD_OPS = (LOAD_WORD, STORE_WORD)
LINE_OPS = (LOAD_LINE, STORE_LINE, PREFETCH_LINE, FLUSH_LINE, INVALIDATE_LINE, FETCH_LINE)


class BankError(RuntimeError):
    pass


class LivelockError(RuntimeError):
    """An atomic packet held a bank longer than the configured bound."""


@dataclass(frozen=True)
class BankAddress:
    bank: int
    set: int
    offset: int
    tag: int


@dataclass(frozen=True)
class MemOp:
    kind: str
    address: int
    payload: tuple = ()
    packet_id: Optional[int] = None
    end_of_packet: bool = True

    def __post_init__(self):
        align = WORD_BYTES if self.kind in WORD_OPS else LINE_BYTES
        if self.address % align:
            raise ValueError(f"{self.kind} address {self.address:#x} not {align}-byte aligned")


@dataclass(frozen=True)
class AccessResult:
    outcome: str
    words: tuple = ()
    busy: int = 1
    refill: Optional[int] = None  # line-aligned byte address to request
    writeback: Optional[tuple] = None  # (line byte address, words)


@dataclass
class BankStats:
    hits: int = 0
    misses: int = 0
    accesses: int = 0
    flushes: int = 0
    writebacks: int = 0
    writeback_words: int = 0
    discards: int = 0


def map_address(addr, group, line_bytes=LINE_BYTES, lines_per_bank=LINES_PER_BANK):
    """Locate ``addr`` in a group: lines are interleaved round-robin over its banks."""
    line = addr // line_bytes
    per_bank = line // group.size
    return BankAddress(
        bank=group.base_bank + line % group.size,
        set=per_bank % lines_per_bank,
        offset=addr % line_bytes,
        tag=per_bank // lines_per_bank,
    )


def unmap_address(ba, group, line_bytes=LINE_BYTES, lines_per_bank=LINES_PER_BANK):
    line = (ba.tag * lines_per_bank + ba.set) * group.size + (ba.bank - group.base_bank)
    return line * line_bytes + ba.offset


class MemoryBank:
    """One bank: 64 lines of 8 words with tag/valid/dirty state.

    Tags hold the full line address, so groups of different shapes over the
    same bank never produce false hits.
    """

    def __init__(self, bank_id=0, lines=LINES_PER_BANK, words_per_line=WORDS_PER_LINE):
        self.bank_id = bank_id
        self.words_per_line = words_per_line
        self.line_bytes = words_per_line * WORD_BYTES
        self.n_lines = lines
        self.tags = [None] * lines  # None: invalid
        self.dirty = [False] * lines
        self.data = [[0] * words_per_line for _ in range(lines)]
        self.reserved_by = None
        self.stats = BankStats()

    def __repr__(self):
        return f"MemoryBank({self.bank_id})"

    # -- state helpers
    def valid(self, s):
        return self.tags[s] is not None

    def resident(self, s, line_addr):
        return self.tags[s] == line_addr

    def dirty_lines(self):
        return sum(self.dirty)

    def locate(self, addr, group):
        ba = map_address(addr, group, self.line_bytes, self.n_lines)
        if ba.bank != self.bank_id:
            raise BankError(f"address {addr:#x} maps to bank {ba.bank}, not {self.bank_id}")
        return ba

    def _evict(self, s):
        """Drop line ``s``; return its writeback if it was dirty."""
        wb = None
        if self.tags[s] is not None and self.dirty[s]:
            wb = (self.tags[s], tuple(self.data[s]))
            self.stats.writebacks += 1
            self.stats.writeback_words += self.words_per_line
        self.tags[s] = None
        self.dirty[s] = False
        return wb

    def fill(self, s, line_addr, words, dirty=False):
        """Install a line; return the writeback of a dirty victim, if any."""
        wb = None
        if self.tags[s] != line_addr:
            wb = self._evict(s)
        self.tags[s] = line_addr
        self.dirty[s] = dirty or self.dirty[s]
        self.data[s] = list(words)
        return wb

    def write_back_line(self, s):
        """Clean line ``s``; return its writeback if it was dirty."""
        if self.tags[s] is None or not self.dirty[s]:
            return None
        self.dirty[s] = False
        self.stats.writebacks += 1
        self.stats.writeback_words += self.words_per_line
        return (self.tags[s], tuple(self.data[s]))


def _wb_busy(wb, words_per_line):
    return words_per_line if wb is not None else 0


def access(bank, op, mode, group, count=True):
    """Serve a word or whole-line read/write at ``bank``.

    In cache mode a miss evicts the victim (its writeback is returned) and
    asks for a refill; the caller completes it with :meth:`MemoryBank.fill`
    and re-issues the access with ``count=False``.
    """
    if bank.reserved_by is not None and op.packet_id != bank.reserved_by:
        return AccessResult(STALLED, busy=0)
    ba = bank.locate(op.address, group)
    s = ba.set
    word = ba.offset // WORD_BYTES
    wpl = bank.words_per_line
    line_addr = op.address - ba.offset
    st = bank.stats
    if count:
        st.accesses += 1

    if mode == SCRATCHPAD:
        if count:
            st.hits += 1
        if op.kind == LOAD_WORD:
            return AccessResult(HIT, (bank.data[s][word],))
        if op.kind == STORE_WORD:
            bank.data[s][word] = op.payload[0]
            return AccessResult(HIT)
        if op.kind in (LOAD_LINE, FETCH_LINE):
            return AccessResult(HIT, tuple(bank.data[s]))
        if op.kind == STORE_LINE:
            bank.data[s] = list(op.payload)
            return AccessResult(HIT)
        raise BankError(f"{op.kind} is not a read/write operation")

    if mode != CACHE:
        raise BankError(f"unknown mode {mode!r}")

    if op.kind == STORE_LINE:
        # Whole-line write: no refill needed.
        wb = bank.fill(s, line_addr, op.payload, dirty=True)
        if count:
            st.hits += 1
        return AccessResult(HIT, busy=1 + _wb_busy(wb, wpl), writeback=wb)

    if bank.tags[s] != line_addr:
        if count:
            st.misses += 1
        wb = bank._evict(s)
        return AccessResult(MISS, busy=1 + _wb_busy(wb, wpl), refill=line_addr, writeback=wb)

    if count:
        st.hits += 1
    if op.kind == LOAD_WORD:
        return AccessResult(HIT, (bank.data[s][word],))
    if op.kind == STORE_WORD:
        bank.data[s][word] = op.payload[0]
        bank.dirty[s] = True
        return AccessResult(HIT)
    if op.kind in (LOAD_LINE, FETCH_LINE, PREFETCH_LINE):
        words = () if op.kind == PREFETCH_LINE else tuple(bank.data[s])
        return AccessResult(HIT, words)
    raise BankError(f"{op.kind} is not a read/write operation")


def line_op(bank, kind, addr, group, mode=CACHE, payload=(), count=True):
    """Whole-line operation; returns an :class:`AccessResult`.

    ``busy`` is 1 cycle per line plus 1 per word written back.
    """
    op = MemOp(kind, addr, tuple(payload))
    if kind in (FETCH_LINE, LOAD_LINE, PREFETCH_LINE, STORE_LINE):
        if mode == SCRATCHPAD and kind == PREFETCH_LINE:
            return AccessResult(HIT)
        return access(bank, op, mode, group, count)
    if bank.reserved_by is not None:
        return AccessResult(STALLED, busy=0)
    ba = bank.locate(addr, group)
    s = ba.set
    if mode == SCRATCHPAD:
        return AccessResult(HIT)
    if kind == FLUSH_LINE:
        bank.stats.flushes += 1
        wb = bank.write_back_line(s) if bank.tags[s] == addr else None
        return AccessResult(HIT, busy=1 + _wb_busy(wb, bank.words_per_line), writeback=wb)
    if kind == INVALIDATE_LINE:
        if bank.tags[s] == addr:
            if bank.dirty[s]:
                bank.stats.discards += 1
            bank.tags[s] = None
            bank.dirty[s] = False
        return AccessResult(HIT)
    raise BankError(f"unknown line operation {kind!r}")


def flush_group(banks, group, sink=None):
    """Write back every dirty line held by the group's banks.

    Returns the stall: one cycle per word written back plus one per line.
    ``sink(line_addr, words)`` receives each writeback.
    """
    if group.mode == SCRATCHPAD:
        return 0
    cost = 0
    for b in group.banks:
        bank = banks[b]
        for s in range(bank.n_lines):
            wb = bank.write_back_line(s)
            if wb is not None:
                bank.stats.flushes += 1
                cost += bank.words_per_line + 1
                if sink is not None:
                    sink(*wb)
    return cost


def flush_cost(banks, group):
    """Cost :func:`flush_group` would charge, without changing anything."""
    if group.mode == SCRATCHPAD:
        return 0
    return sum(banks[b].dirty_lines() * (banks[b].words_per_line + 1) for b in group.banks)


class BankPort:
    """Serializes operations at one bank and enforces packet-scoped atomicity.

    A packet that does not end with its first operation reserves the bank;
    operations of other packets stall until the end-of-packet operation.
    """

    def __init__(self, bank, group, mode=CACHE, bound=100_000, backing=None):
        self.bank = bank
        self.group = group
        self.mode = mode
        self.bound = bound
        self.held_for = 0
        # line address -> words; stands in for the next level on misses
        self.backing = backing if backing is not None else {}

    def tick(self):
        if self.bank.reserved_by is not None:
            self.held_for += 1
            if self.held_for > self.bound:
                raise LivelockError(
                    f"bank {self.bank.bank_id} held by packet {self.bank.reserved_by} "
                    f"for {self.held_for} cycles")

    def submit(self, op):
        bank = self.bank
        if bank.reserved_by is not None and op.packet_id != bank.reserved_by:
            return AccessResult(STALLED, busy=0)
        if bank.reserved_by is None and op.packet_id is not None and not op.end_of_packet:
            bank.reserved_by = op.packet_id
            self.held_for = 0
        if op.kind in WORD_OPS or op.kind in (LOAD_LINE, FETCH_LINE, STORE_LINE, PREFETCH_LINE):
            res = access(bank, op, self.mode, self.group)
            if res.outcome == MISS:
                if res.writeback is not None:
                    self.backing[res.writeback[0]] = list(res.writeback[1])
                ba = bank.locate(op.address, self.group)
                words = self.backing.get(res.refill, [0] * bank.words_per_line)
                bank.fill(ba.set, res.refill, words)
                hit = access(bank, op, self.mode, self.group, count=False)
                res = AccessResult(MISS, hit.words, res.busy, res.refill, res.writeback)
        else:
            saved, bank.reserved_by = bank.reserved_by, None
            res = line_op(bank, op.kind, op.address, self.group, self.mode)
            bank.reserved_by = saved
        if op.end_of_packet and bank.reserved_by == op.packet_id:
            bank.reserved_by = None
            self.held_for = 0
        return res


def atomic_packet(bank, ops, group, mode=CACHE, backing=None):
    """Run ``ops`` (sharing one packet id, last one ending the packet) in order."""
    if not ops:
        return []
    pid = ops[0].packet_id
    if any(op.packet_id != pid for op in ops):
        raise ValueError("all operations of a packet must share its packet id")
    if not ops[-1].end_of_packet:
        raise ValueError("last operation must carry end-of-packet")
    port = BankPort(bank, group, mode, backing=backing)
    return [port.submit(op) for op in ops]
