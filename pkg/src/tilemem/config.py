"""System configuration: memory groups, channel map table, directory, programs.

Also holds the configuration document parser and the L1 configuration
families used by the design-space sweeps.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

Tile = tuple  # (x, y)

CACHE = "cache"
SCRATCHPAD = "scratchpad"
MODES = (CACHE, SCRATCHPAD)

BYPASS_NONE = "none"
BYPASS_L1 = "skip-l1"
BYPASS_ALL = "skip-all"
BYPASS_MODES = (BYPASS_NONE, BYPASS_L1, BYPASS_ALL)

GROUP_SIZES = (1, 2, 4, 8)
ADDRESS_BITS = 32
CMT_SLOTS = 8
INST_SLOT = 0
DATA_SLOT = 1


class ConfigError(ValueError):
    """Raised for malformed or semantically invalid configurations."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class MemoryGroupConfig:
    base_bank: int
    size: int
    mode: str = CACHE
    bypass: str = BYPASS_NONE
    # (core index on the local tile, input buffer); None returns to the requester
    return_channel: Optional[tuple] = None

    def validate(self, banks_per_tile=8, cores_per_tile=8, buffers_per_core=8):
        if self.size not in GROUP_SIZES or self.size > banks_per_tile:
            raise ConfigError(f"group size {self.size} must be one of {GROUP_SIZES}")
        if self.base_bank < 0 or self.base_bank % self.size:
            raise ConfigError(
                f"alignment violation: base_bank {self.base_bank} not aligned to size {self.size}")
        if self.base_bank + self.size > banks_per_tile:
            raise ConfigError(
                f"group {self.base_bank}+{self.size} exceeds {banks_per_tile} banks")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.bypass not in BYPASS_MODES:
            raise ConfigError(f"unknown bypass {self.bypass!r}")
        if self.return_channel is not None:
            core, buf = self.return_channel
            if not (0 <= core < cores_per_tile and 0 <= buf < buffers_per_core):
                raise ConfigError(f"return channel {self.return_channel} names no buffer")
        return self

    @property
    def banks(self):
        return range(self.base_bank, self.base_bank + self.size)

    def overlaps(self, other):
        return (self.base_bank < other.base_bank + other.size
                and other.base_bank < self.base_bank + self.size)

    def __str__(self):
        return f"{self.base_bank},{self.size},{self.mode}"


REMOTE_CORE = "remote_core"
LOCAL_MULTICAST = "local_multicast"
MEMORY_GROUP = "memory_group"


@dataclass(frozen=True)
class ChannelMapEntry:
    """One logical-to-physical channel binding in a core's channel map table."""

    kind: str
    remote_core: Optional[tuple] = None  # (tile, core, input buffer)
    credit_limit: Optional[int] = None  # None: default credits / unlimited for local
    multicast_mask: int = 0
    multicast_buffer: int = 0
    group: Optional[MemoryGroupConfig] = None

    @classmethod
    def to_core(cls, tile, core, buffer, credits=None):
        return cls(REMOTE_CORE, remote_core=(tuple(tile), core, buffer), credit_limit=credits)

    @classmethod
    def to_multicast(cls, mask, buffer=0):
        return cls(LOCAL_MULTICAST, multicast_mask=mask, multicast_buffer=buffer)

    @classmethod
    def to_group(cls, group):
        return cls(MEMORY_GROUP, group=group)

    def validate(self):
        populated = [self.remote_core is not None, self.multicast_mask != 0,
                     self.group is not None]
        if sum(populated) != 1:
            raise ConfigError("channel map entry must populate exactly one kind")
        if self.kind == REMOTE_CORE:
            if self.remote_core is None:
                raise ConfigError("remote_core entry without destination")
            if self.credit_limit is not None and self.credit_limit < 1:
                raise ConfigError("credit_limit must be >= 1")
        elif self.kind == LOCAL_MULTICAST:
            if not 0 < self.multicast_mask < 256:
                raise ConfigError("multicast mask must be a non-zero 8-bit value")
        elif self.kind == MEMORY_GROUP:
            if self.group is None:
                raise ConfigError("memory_group entry without group")
            self.group.validate()
        else:
            raise ConfigError(f"unknown entry kind {self.kind!r}")
        return self


class ChannelMapTable:
    """Per-core table of channel map entries."""

    def __init__(self, slots=CMT_SLOTS):
        self.entries = [None] * slots

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, slot):
        return self.entries[slot]

    def group(self, slot):
        entry = self.entries[slot]
        if entry is None or entry.kind != MEMORY_GROUP:
            return None
        return entry.group

    def update(self, slot, entry, banks=None):
        """Replace the entry at ``slot``; return the cycles the update costs.

        ``banks`` is the tile's list of :class:`tilemem.mem.MemoryBank`. When
        the outgoing memory group loses banks or changes mode, its dirty
        lines are flushed and the flush cost is added to the single update
        cycle.
        """
        if not 0 <= slot < len(self.entries):
            raise ConfigError(f"channel map slot {slot} out of range")
        entry.validate()
        old = self.entries[slot]
        self.entries[slot] = entry
        cost = 1
        if banks is not None and old is not None and old.kind == MEMORY_GROUP:
            new = entry.group if entry.kind == MEMORY_GROUP else None
            if _group_changed(old.group, new):
                from .mem import flush_group
                cost += flush_group(banks, old.group)
        return cost


def _group_changed(old, new):
    if new is None:
        return True
    if (old.base_bank, old.size) != (new.base_bank, new.size):
        return True
    return old.mode != new.mode


def cmt_update(table, slot, entry, banks=None):
    return table.update(slot, entry, banks)


MEMCTRL = "mem"


@dataclass(frozen=True)
class DirectoryEntry:
    target: object = MEMCTRL  # a tile (x, y) or MEMCTRL
    substitute_bits: Optional[int] = None  # None leaves the address unchanged


@dataclass(frozen=True)
class DirectoryConfig:
    entry_count: int = 16
    index_bit_position: int = 11
    entries: tuple = ()

    def __post_init__(self):
        if not self.entries:
            object.__setattr__(self, "entries", (DirectoryEntry(),) * self.entry_count)

    @property
    def index_bits(self):
        return self.entry_count.bit_length() - 1

    def validate(self, l2_tiles=()):
        n = self.entry_count
        if n < 1 or n & (n - 1):
            raise ConfigError(f"directory entry_count {n} is not a power of two")
        if len(self.entries) != n:
            raise ConfigError("directory entry list length differs from entry_count")
        if self.index_bit_position < 0 or self.index_bit_position + self.index_bits > ADDRESS_BITS:
            raise ConfigError(f"index_bit_position {self.index_bit_position} out of range")
        l2 = {tuple(t) for t in l2_tiles}
        for i, e in enumerate(self.entries):
            if e.target != MEMCTRL and tuple(e.target) not in l2:
                raise ConfigError(f"directory entry {i} targets {e.target}, not an L2 tile")
            if e.substitute_bits is not None and not 0 <= e.substitute_bits < (1 << self.index_bits):
                raise ConfigError(f"directory entry {i} substitute bits out of range")
        return self

    @classmethod
    def striped(cls, l2_tiles, entry_count=16, index_bit_position=11):
        """Entries assigned round-robin over ``l2_tiles``; all memory if none."""
        l2_tiles = [tuple(t) for t in l2_tiles]
        if l2_tiles:
            entries = tuple(DirectoryEntry(l2_tiles[i % len(l2_tiles)]) for i in range(entry_count))
        else:
            entries = (DirectoryEntry(),) * entry_count
        return cls(entry_count, index_bit_position, entries)


@dataclass(frozen=True)
class ProgramGroups:
    inst: MemoryGroupConfig
    data: MemoryGroupConfig

    @property
    def unified(self):
        return self.inst == self.data


@dataclass(frozen=True)
class L1ConfigPoint:
    """Instruction/data groups for each program of a configuration family."""

    label: str
    programs: tuple  # of ProgramGroups

    @property
    def total_banks(self):
        used = set()
        for p in self.programs:
            used.update(p.inst.banks)
            used.update(p.data.banks)
        return len(used)

    def validate(self, banks_per_tile=8):
        groups = []
        for p in self.programs:
            groups += [p.inst.validate(banks_per_tile), p.data.validate(banks_per_tile)]
        _check_overlap_modes(groups)
        if self.total_banks > banks_per_tile:
            raise ConfigError(f"{self.label}: groups need more than {banks_per_tile} banks")
        return self


def _check_overlap_modes(groups):
    for a, b in itertools.combinations(groups, 2):
        if a.overlaps(b) and a.mode != b.mode:
            raise ConfigError(f"mixed-mode overlap between groups {a} and {b}")


@dataclass
class ProgramBinding:
    name: str
    tile: tuple = (1, 1)
    core: int = 0
    trace_path: Optional[str] = None
    trace: Optional[list] = None
    inst: MemoryGroupConfig = MemoryGroupConfig(0, 8)
    data: MemoryGroupConfig = MemoryGroupConfig(0, 8)
    channels: dict = field(default_factory=dict)  # slot -> ChannelMapEntry
    guaranteed_consumer: bool = False
    address_offset: Optional[int] = None


@dataclass
class SystemConfig:
    mesh_width: int = 4
    mesh_height: int = 4
    cores_per_tile: int = 8
    banks_per_tile: int = 8
    bank_bytes: int = 2048
    line_bytes: int = 32
    word_bytes: int = 4
    main_memory_latency: int = 35
    default_credits: int = 4
    buffer_depth: int = 4
    buffers_per_core: int = 8
    memctrl_tile: tuple = (0, 0)
    l2_tiles: tuple = ()
    directory: DirectoryConfig = field(default_factory=DirectoryConfig)
    programs: list = field(default_factory=list)
    watchdog: int = 1_000_000
    atomic_bound: int = 100_000

    @property
    def words_per_line(self):
        return self.line_bytes // self.word_bytes

    @property
    def lines_per_bank(self):
        return self.bank_bytes // self.line_bytes

    @property
    def tiles(self):
        return [(x, y) for y in range(self.mesh_height) for x in range(self.mesh_width)]

    @property
    def tile_roles(self):
        roles = {t: "idle" for t in self.tiles}
        for t in self.l2_tiles:
            roles[tuple(t)] = "l2"
        for p in self.programs:
            roles[tuple(p.tile)] = "compute"
        return roles

    def with_programs(self, programs):
        return replace(self, programs=list(programs))

    def validate(self):
        if self.mesh_width < 1 or self.mesh_height < 1:
            raise ConfigError("mesh dimensions must be positive")
        if self.line_bytes % self.word_bytes:
            raise ConfigError("line_bytes must be divisible by word_bytes")
        if self.bank_bytes % self.line_bytes:
            raise ConfigError("bank_bytes must be divisible by line_bytes")
        if self.default_credits < 1 or self.buffer_depth < 1:
            raise ConfigError("credits and buffer depth must be >= 1")
        tiles = set(self.tiles)
        if tuple(self.memctrl_tile) not in tiles:
            raise ConfigError(f"memory controller tile {self.memctrl_tile} is off the mesh")
        l2 = [tuple(t) for t in self.l2_tiles]
        if len(set(l2)) != len(l2):
            raise ConfigError("duplicate L2 tile")
        for t in l2:
            if t not in tiles:
                raise ConfigError(f"L2 tile {t} is off the mesh")
        self.directory.validate(l2)
        seen = set()
        by_tile = {}
        for p in self.programs:
            tile = tuple(p.tile)
            if tile not in tiles:
                raise ConfigError(f"program {p.name}: tile {tile} is off the mesh")
            if tile in l2:
                raise ConfigError(f"program {p.name}: tile {tile} is an L2 tile and hosts no programs")
            if not 0 <= p.core < self.cores_per_tile:
                raise ConfigError(f"program {p.name}: core {p.core} out of range")
            if (tile, p.core) in seen:
                raise ConfigError(f"program {p.name}: core {tile}/{p.core} already bound")
            seen.add((tile, p.core))
            for g in (p.inst, p.data):
                g.validate(self.banks_per_tile, self.cores_per_tile, self.buffers_per_core)
            by_tile.setdefault(tile, []).extend([p.inst, p.data])
            for slot, entry in p.channels.items():
                if not 0 <= slot < CMT_SLOTS or slot in (INST_SLOT, DATA_SLOT):
                    raise ConfigError(f"program {p.name}: channel slot {slot} is reserved or out of range")
                entry.validate()
                if entry.kind == REMOTE_CORE:
                    dtile, dcore, dbuf = entry.remote_core
                    if tuple(dtile) not in tiles or not 0 <= dcore < self.cores_per_tile \
                            or not 0 <= dbuf < self.buffers_per_core:
                        raise ConfigError(f"program {p.name}: channel {slot} names no buffer")
                elif entry.kind == MEMORY_GROUP:
                    by_tile[tile].append(entry.group)
        for groups in by_tile.values():
            _check_overlap_modes(groups)
        return self


# -- configuration families -------------------------------------------------

def _pow2_upto(n):
    return [s for s in GROUP_SIZES if s <= n]


def _place(sizes):
    """Assign naturally aligned bases to groups, largest first."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    bases = [0] * len(sizes)
    base = 0
    for i in order:
        bases[i] = base
        base += sizes[i]
    return bases


def enumerate_single_program_configs(banks=8):
    if banks not in GROUP_SIZES:
        raise ConfigError(f"banks must be one of {GROUP_SIZES}")
    points = []
    for s in _pow2_upto(banks):
        g = MemoryGroupConfig(0, s)
        points.append(L1ConfigPoint(f"U{s}", (ProgramGroups(g, g),)))
    for a in _pow2_upto(banks):
        for b in _pow2_upto(banks):
            if a + b > banks:
                continue
            ia, ib = _place([a, b])
            points.append(L1ConfigPoint(
                f"I{a}D{b}",
                (ProgramGroups(MemoryGroupConfig(ia, a), MemoryGroupConfig(ib, b)),)))
    return points


# Users of L1 groups in a two-program configuration.
AI, AD, BI, BD = "Ai", "Ad", "Bi", "Bd"

# Partitions of the four users into groups. A block with users from both
# programs is a shared cache; a block with both roles of one program is unified.
PAIR_STRUCTURES = (
    ("shared-unified", ((AI, AD, BI, BD),)),
    ("shared-split", ((AI, BI), (AD, BD))),
    ("shared-inst", ((AI, BI), (AD,), (BD,))),
    ("shared-data", ((AI,), (BI,), (AD, BD))),
    ("private-UU", ((AI, AD), (BI, BD))),
    ("private-US", ((AI, AD), (BI,), (BD,))),
    ("private-SU", ((AI,), (AD,), (BI, BD))),
    ("private-SS", ((AI,), (AD,), (BI,), (BD,))),
)

PAIR_BLOCKS = frozenset(frozenset(b) for _, blocks in PAIR_STRUCTURES for b in blocks)


def _pair_label(kind, blocks, sizes):
    parts = ["+".join(b) + f"={s}" for b, s in zip(blocks, sizes)]
    return f"{kind}:" + ",".join(parts)


def enumerate_pair_configs(banks=8):
    """Two-program L1 family.

    Each program gets a unified group or separate instruction and data
    groups; any group may be private or shared with the same region of the
    other program (a unified group can only be shared whole). Group sizes
    are powers of two and the distinct groups fit in ``banks`` banks.
    """
    if banks != 8:
        raise ConfigError("the pair family is defined for 8 banks")
    points = []
    for kind, blocks in PAIR_STRUCTURES:
        for sizes in itertools.product(GROUP_SIZES, repeat=len(blocks)):
            if sum(sizes) > banks:
                continue
            bases = _place(list(sizes))
            groups = {}
            for block, base, size in zip(blocks, bases, sizes):
                g = MemoryGroupConfig(base, size)
                for user in block:
                    groups[user] = g
            points.append(L1ConfigPoint(
                _pair_label(kind, blocks, sizes),
                (ProgramGroups(groups[AI], groups[AD]), ProgramGroups(groups[BI], groups[BD]))))
    return points


def fixed_pair_configs():
    """The two fixed configurations: 8-bank shared unified and 4+4 shared split."""
    family = {p.label: p for p in enumerate_pair_configs(8)}
    return (family["shared-unified:Ai+Ad+Bi+Bd=8"], family["shared-split:Ai+Bi=4,Ad+Bd=4"])


# -- configuration document parser -----------------------------------------

_SECTION = re.compile(r"^\[([a-z0-9_.]+)\]$")
_KEYVAL = re.compile(r"^([A-Za-z0-9_.]+)\s*=\s*(.*)$")


def _int(text, line):
    try:
        return int(text, 0)
    except ValueError:
        raise ConfigError(f"expected integer, got {text!r}", line) from None


def _tile(text, line):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected tile 'x,y', got {text!r}", line)
    return (_int(parts[0], line), _int(parts[1], line))


def parse_group(text, line=None):
    """``bank:base,size[,mode[,bypass]][,ret=core.buffer]``"""
    text = text.strip()
    if not text.startswith("bank:"):
        raise ConfigError(f"group must start with 'bank:', got {text!r}", line)
    fields = [f.strip() for f in text[5:].split(",")]
    if len(fields) < 2:
        raise ConfigError("group needs base and size", line)
    kw = dict(base_bank=_int(fields[0], line), size=_int(fields[1], line))
    for f in fields[2:]:
        if f in MODES:
            kw["mode"] = f
        elif f in BYPASS_MODES:
            kw["bypass"] = f
        elif f.startswith("ret="):
            core, _, buf = f[4:].partition(".")
            kw["return_channel"] = (_int(core, line), _int(buf or "0", line))
        else:
            raise ConfigError(f"unknown group field {f!r}", line)
    group = MemoryGroupConfig(**kw)
    try:
        return group.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), line) from None


def parse_channel(text, line=None):
    """``core:x,y,core,buffer[,credits=N]``, ``mcast:MASK[,buffer]`` or a group."""
    text = text.strip()
    if text.startswith("bank:"):
        return ChannelMapEntry.to_group(parse_group(text, line))
    kind, _, rest = text.partition(":")
    fields = [f.strip() for f in rest.split(",")]
    if kind == "core":
        credits = None
        if fields and fields[-1].startswith("credits="):
            credits = _int(fields.pop()[8:], line)
        if len(fields) != 4:
            raise ConfigError("core channel needs x,y,core,buffer", line)
        x, y, c, b = (_int(f, line) for f in fields)
        return ChannelMapEntry.to_core((x, y), c, b, credits)
    if kind == "mcast":
        mask = _int(fields[0], line)
        buf = _int(fields[1], line) if len(fields) > 1 else 0
        return ChannelMapEntry.to_multicast(mask, buf)
    raise ConfigError(f"unknown channel kind {kind!r}", line)


_SYSTEM_INT_KEYS = {
    "cores_per_tile", "banks_per_tile", "bank_bytes", "line_bytes", "word_bytes",
    "main_memory_latency", "default_credits", "buffer_depth", "buffers_per_core",
    "watchdog", "atomic_bound",
}


def parse_config(text, base_dir=None):
    """Parse a configuration document into a validated :class:`SystemConfig`."""
    sys_kw = {}
    dir_kw = {}
    dir_entries = {}
    programs = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        m = _SECTION.match(stripped)
        if m:
            section = m.group(1)
            if section.startswith("program."):
                idx = _int(section[8:], lineno)
                if idx in programs:
                    raise ConfigError(f"duplicate section [{section}]", lineno)
                programs[idx] = {"_line": lineno}
            elif section not in ("system", "directory"):
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        m = _KEYVAL.match(stripped)
        if not m:
            raise ConfigError(f"syntax error: {stripped!r}", lineno)
        key, value = m.group(1), m.group(2).strip()
        if section is None:
            raise ConfigError("key outside of a section", lineno)
        if section == "system":
            if key == "tiles":
                w, _, h = value.partition("x")
                sys_kw["mesh_width"], sys_kw["mesh_height"] = _int(w, lineno), _int(h, lineno)
            elif key in _SYSTEM_INT_KEYS:
                sys_kw[key] = _int(value, lineno)
            elif key == "memctrl":
                sys_kw["memctrl_tile"] = _tile(value, lineno)
            elif key == "l2_tiles":
                sys_kw["l2_tiles"] = tuple(_tile(v, lineno) for v in value.split()) if value else ()
            else:
                raise ConfigError(f"unknown system key {key!r}", lineno)
        elif section == "directory":
            if key == "entries":
                dir_kw["entry_count"] = _int(value, lineno)
            elif key == "index_bits_at":
                dir_kw["index_bit_position"] = _int(value, lineno)
            elif key.startswith("entry."):
                k = _int(key[6:], lineno)
                target_text, _, subst = value.partition(" ")
                subst = subst.strip()
                substitute = None
                if subst:
                    if not subst.startswith("subst="):
                        raise ConfigError(f"expected subst=, got {subst!r}", lineno)
                    substitute = _int(subst[6:], lineno)
                target = MEMCTRL if target_text == MEMCTRL else _tile(target_text, lineno)
                dir_entries[k] = (DirectoryEntry(target, substitute), lineno)
            else:
                raise ConfigError(f"unknown directory key {key!r}", lineno)
        else:
            prog = programs[_int(section[8:], lineno)]
            if key == "tile":
                prog["tile"] = _tile(value, lineno)
            elif key == "core":
                prog["core"] = _int(value, lineno)
            elif key == "trace":
                path = Path(value)
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                prog["trace_path"] = str(path)
            elif key in ("inst", "data"):
                prog[key] = parse_group(value, lineno)
            elif key == "name":
                prog["name"] = value
            elif key == "guaranteed_consumer":
                prog["guaranteed_consumer"] = value.lower() in ("1", "yes", "true", "on")
            elif key == "address_offset":
                prog["address_offset"] = _int(value, lineno)
            elif key.startswith("channel."):
                prog.setdefault("channels", {})[_int(key[8:], lineno)] = parse_channel(value, lineno)
            else:
                raise ConfigError(f"unknown program key {key!r}", lineno)

    l2_tiles = sys_kw.get("l2_tiles", ())
    count = dir_kw.get("entry_count", 16)
    position = dir_kw.get("index_bit_position", 11)
    if count < 1 or count & (count - 1):
        raise ConfigError(f"directory entry_count {count} is not a power of two")
    default = DirectoryConfig.striped(l2_tiles, count, position)
    entries = list(default.entries)
    for k, (entry, lineno) in dir_entries.items():
        if not 0 <= k < count:
            raise ConfigError(f"directory entry {k} out of range", lineno)
        entries[k] = entry
    sys_kw["directory"] = DirectoryConfig(count, position, tuple(entries))

    bindings = []
    for idx in sorted(programs):
        prog = dict(programs[idx])
        lineno = prog.pop("_line")
        prog.setdefault("name", f"program{idx}")
        if "data" in prog and "inst" not in prog:
            prog["inst"] = prog["data"]
        if "inst" in prog and "data" not in prog:
            prog["data"] = prog["inst"]
        try:
            bindings.append(ProgramBinding(**prog))
        except TypeError as exc:
            raise ConfigError(str(exc), lineno) from None
    cfg = SystemConfig(programs=bindings, **sys_kw)
    return cfg.validate()


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def format_group(g):
    parts = [str(g.base_bank), str(g.size), g.mode]
    if g.bypass != BYPASS_NONE:
        parts.append(g.bypass)
    if g.return_channel is not None:
        parts.append(f"ret={g.return_channel[0]}.{g.return_channel[1]}")
    return "bank:" + ",".join(parts)
