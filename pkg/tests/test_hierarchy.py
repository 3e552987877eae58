import random

import pytest
from hypothesis import given, strategies as st

from tilemem.config import MEMCTRL, ConfigError, DirectoryConfig, DirectoryEntry
from tilemem.hierarchy import (
    L2Tile, MainMemory, MemoryController, choose_index_bits, default_directory,
    directory_index, directory_lookup, memctrl_access,
)
from tilemem.mem import HIT, MISS

from oracles import LRUSetAssoc

ADDRS = st.integers(0, (1 << 32) - 4).map(lambda a: a & ~3)


class TestDirectory:
    def test_all_memory_by_default(self):
        d = DirectoryConfig()
        assert directory_lookup(0x12345678, d) == (MEMCTRL, 0x12345678)

    @given(ADDRS)
    def test_striped_index(self, addr):
        tiles = [(2, 1), (1, 2), (0, 1)]
        d = default_directory(tiles)
        target, out = directory_lookup(addr, d)
        assert target == tiles[((addr >> 11) & 15) % 3]
        assert out == addr

    @given(ADDRS, st.integers(0, 15))
    def test_substitution_replaces_top_bits(self, addr, sub):
        entries = tuple(DirectoryEntry(MEMCTRL, sub) for _ in range(16))
        d = DirectoryConfig(16, 11, entries)
        _, out = directory_lookup(addr, d)
        assert out >> 28 == sub
        assert out & ((1 << 28) - 1) == addr & ((1 << 28) - 1)

    def test_index_position(self):
        d = choose_index_bits(DirectoryConfig(), 20)
        assert directory_index(0x00300000, d) == 3
        with pytest.raises(ConfigError):
            choose_index_bits(d, 30)

    def test_two_entry_directory(self):
        d = DirectoryConfig(2, 5, (DirectoryEntry((1, 0)), DirectoryEntry(MEMCTRL, 1)))
        assert directory_lookup(0x40, d) == ((1, 0), 0x40)
        assert directory_lookup(0x20, d) == (MEMCTRL, 0x80000020)


class TestL2:
    def test_matches_lru_oracle(self):
        rng = random.Random(11)
        l2, ref = L2Tile(), LRUSetAssoc(sets=64, ways=8)
        mem = MainMemory()
        # Working sets a little over and under capacity so evictions matter.
        hot = [rng.randrange(1 << 14) * 32 for _ in range(600)]
        for i in range(120_000):
            a = rng.choice(hot) if rng.random() < 0.8 else rng.randrange(1 << 20) * 4
            res = l2.access(a, "load_word")
            assert (res.outcome == HIT) == ref.access(a), i
            if res.outcome == MISS:
                l2.install(res.refill, mem.read(res.refill))
        assert l2.stats.hits + l2.stats.misses == 120_000

    def test_store_word_hit_dirties_and_evicts_with_writeback(self):
        l2 = L2Tile(sets=1)
        for n in range(8):
            l2.install(n * 32, [n] * 8)
        assert l2.access(0, "store_word", (99,)).outcome == HIT
        # Touch lines 1..7 so line 0 becomes LRU again.
        for n in range(1, 8):
            l2.access(n * 32, "load_word")
        wb = l2.install(8 * 32, [8] * 8)
        assert wb == (0, (99, 0, 0, 0, 0, 0, 0, 0))
        assert l2.stats.writebacks == 1

    def test_store_line_installs_without_refill(self):
        l2 = L2Tile()
        res = l2.access(0x400, "store_line", tuple(range(8)))
        assert res.refill is None
        assert l2.access(0x404, "load_word").words == (1,)
        assert l2.access(0x400, "load_line").words == tuple(range(8))

    def test_read_miss_reports_line(self):
        assert L2Tile().access(0x1234, "load_word").refill == 0x1220


class TestController:
    def test_one_accept_per_cycle(self):
        mc = MemoryController(latency=35)
        assert [mc.request(10) for _ in range(4)] == [45, 46, 47, 48]
        assert mc.queue_wait == 0 + 1 + 2 + 3
        assert mc.request(100) == 135

    def test_writeback_takes_slot_without_response(self):
        mc = MemoryController()
        assert memctrl_access(mc, 5, "write") is None
        assert mc.request(5) == 6 + 35
        mc.write_back(50, 0x20, (1,) * 8)
        assert mc.memory.read(0x20) == (1,) * 8
        assert mc.memory.read(0x40) == (0,) * 8
