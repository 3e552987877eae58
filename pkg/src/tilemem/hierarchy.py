"""Directory, L2 tiles and the off-chip memory controller."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .config import ADDRESS_BITS, MEMCTRL, ConfigError, DirectoryConfig
from .mem import HIT, MISS, MemoryBank, WORD_BYTES

WAYS = 8


def directory_index(addr, cfg):
    return (addr >> cfg.index_bit_position) % cfg.entry_count


def directory_lookup(addr, cfg):
    """Return ``(target, substituted_addr)`` for the L1 miss at ``addr``.

    The target is an L2 tile or :data:`MEMCTRL`. When the entry carries
    substitute bits they overwrite the address's top ``log2(entries)`` bits.
    """
    entry = cfg.entries[directory_index(addr, cfg)]
    bits = cfg.index_bits
    if entry.substitute_bits is None or bits == 0:
        return entry.target, addr
    shift = ADDRESS_BITS - bits
    low = addr & ((1 << shift) - 1)
    return entry.target, (entry.substitute_bits << shift) | low


def choose_index_bits(cfg, position):
    """Copy of ``cfg`` indexing the directory from bit ``position``."""
    if position < 0 or position + cfg.index_bits > ADDRESS_BITS:
        raise ConfigError(f"index bit position {position} out of range")
    return replace(cfg, index_bit_position=position)


@dataclass(frozen=True)
class L2Result:
    outcome: str
    words: tuple = ()
    busy: int = 1
    refill: Optional[int] = None
    writeback: Optional[tuple] = None


@dataclass
class L2Stats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    writebacks: int = 0


class L2Tile:
    """A tile's eight banks probed in parallel as one 8-way set-associative cache.

    Way ``w`` of set ``s`` is line ``s`` of bank ``w``; replacement is LRU.
    """

    def __init__(self, tile=(0, 0), sets=64, words_per_line=8, ways=WAYS):
        self.tile = tuple(tile)
        self.sets = sets
        self.ways = ways
        self.line_bytes = words_per_line * WORD_BYTES
        self.banks = [MemoryBank(w, sets, words_per_line) for w in range(ways)]
        self.lru = [list(range(ways)) for _ in range(sets)]  # LRU first, MRU last
        self.stats = L2Stats()

    def set_index(self, line_addr):
        return (line_addr // self.line_bytes) % self.sets

    def find(self, line_addr):
        s = self.set_index(line_addr)
        for w in range(self.ways):
            if self.banks[w].tags[s] == line_addr:
                return s, w
        return s, None

    def resident_lines(self, s):
        return [b.tags[s] for b in self.banks if b.tags[s] is not None]

    def _touch(self, s, w):
        order = self.lru[s]
        order.remove(w)
        order.append(w)

    def _victim(self, s):
        for w in self.lru[s]:
            if self.banks[w].tags[s] is None:
                return w
        return self.lru[s][0]

    def install(self, line_addr, words, dirty=False):
        """Place a line, evicting the LRU way; return a dirty victim's writeback."""
        s, w = self.find(line_addr)
        wb = None
        if w is None:
            w = self._victim(s)
            bank = self.banks[w]
            if bank.tags[s] is not None:
                self.stats.evictions += 1
                if bank.dirty[s]:
                    wb = (bank.tags[s], tuple(bank.data[s]))
                    self.stats.writebacks += 1
            bank.tags[s] = line_addr
            bank.dirty[s] = dirty
            bank.data[s] = list(words)
        else:
            bank = self.banks[w]
            bank.data[s] = list(words)
            bank.dirty[s] = bank.dirty[s] or dirty
        self._touch(s, w)
        return wb

    def access(self, addr, kind, payload=(), count=True):
        """Read or write at ``addr``.

        ``kind`` is one of ``load_word``, ``load_line``, ``store_word``,
        ``store_line``. A read or word-store miss returns ``refill``; whole
        lines (including L1 writebacks) install without one.
        """
        line_addr = addr - addr % self.line_bytes
        if kind == "store_line":
            if count:
                s, w = self.find(line_addr)
                if w is None:
                    self.stats.misses += 1
                else:
                    self.stats.hits += 1
            return L2Result(HIT, writeback=self.install(line_addr, payload, dirty=True))
        s, w = self.find(line_addr)
        if w is None:
            if count:
                self.stats.misses += 1
            return L2Result(MISS, refill=line_addr)
        if count:
            self.stats.hits += 1
        self._touch(s, w)
        bank = self.banks[w]
        if kind == "load_word":
            return L2Result(HIT, (bank.data[s][(addr % self.line_bytes) // WORD_BYTES],))
        if kind == "load_line":
            return L2Result(HIT, tuple(bank.data[s]))
        if kind == "store_word":
            bank.data[s][(addr % self.line_bytes) // WORD_BYTES] = payload[0]
            bank.dirty[s] = True
            return L2Result(HIT)
        raise ValueError(f"unknown L2 operation {kind!r}")


def l2_access(tile, addr, op, payload=()):
    return tile.access(addr, op, payload)


class MainMemory:
    """Backing store of whole lines; unwritten lines read as zeros."""

    def __init__(self, words_per_line=8):
        self.words_per_line = words_per_line
        self.lines = {}

    def read(self, line_addr):
        return tuple(self.lines.get(line_addr, (0,) * self.words_per_line))

    def write(self, line_addr, words):
        self.lines[line_addr] = tuple(words)


class MemoryController:
    """Flat-latency controller accepting one request per cycle."""

    def __init__(self, latency=35, memory=None):
        self.latency = latency
        self.memory = memory if memory is not None else MainMemory()
        self.next_accept = 0
        self.accepted = 0
        self.queue_wait = 0

    def accept(self, arrival):
        t = max(arrival, self.next_accept)
        self.queue_wait += t - arrival
        self.next_accept = t + 1
        self.accepted += 1
        return t

    def request(self, arrival):
        """Cycle at which the response head leaves the controller."""
        return self.accept(arrival) + self.latency

    def write_back(self, arrival, line_addr, words):
        """Fire-and-forget: takes an acceptance slot, sends no response."""
        self.accept(arrival)
        self.memory.write(line_addr, words)


def memctrl_access(ctrl, arrival, op="read"):
    if op == "write":
        ctrl.accept(arrival)
        return None
    return ctrl.request(arrival)


def default_directory(l2_tiles, entry_count=16, index_bit_position=11):
    return DirectoryConfig.striped(l2_tiles, entry_count, index_bit_position)


__all__ = [
    "MEMCTRL", "WAYS", "L2Tile", "L2Result", "MainMemory", "MemoryController",
    "choose_index_bits", "directory_index", "directory_lookup", "l2_access",
    "memctrl_access", "default_directory",
]
