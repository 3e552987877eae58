"""On-chip networks: intra-tile crossbar and inter-tile wormhole mesh.

Two views of the same network live here. :class:`MeshNetwork` is a
cycle-stepped flit-level model (routers, input buffers, wormhole port
locks, end-to-end credits). :class:`LinkReservations` is the cheaper
analytic form the simulation engine uses: a packet holds each link on its
dimension-ordered path for one cycle per flit, starting when its head
reaches the link.
"""

from __future__ import annotations

import enum
import heapq
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional


class TrafficClass(enum.IntEnum):
    CORE = 0  # core <-> core
    L1_REQ = 1  # L1 -> L2 requests
    L2_RESP = 2  # L2 -> L1 responses
    MEM_REQ = 3  # L2 (or bypassing L1) -> memory controller
    MEM_RESP = 4  # memory controller -> L2 / L1


class NetworkError(RuntimeError):
    pass


class CreditWarning(UserWarning):
    pass


def hops(src, dst):
    return abs(src[0] - dst[0]) + abs(src[1] - dst[1])


def route_latency(src, dst):
    """Head latency on an idle network: one cycle per hop plus one for
    injection/ejection; one cycle within a tile."""
    return hops(src, dst) + 1


def round_trip(src, dst):
    return 2 * route_latency(src, dst)


def expected_throughput(credits, src, dst):
    return min(1.0, credits / round_trip(src, dst))


def xy_path(src, dst):
    """Directed links (from_tile, to_tile) under X-then-Y routing."""
    x, y = src
    links = []
    while x != dst[0]:
        nx = x + (1 if dst[0] > x else -1)
        links.append(((x, y), (nx, y)))
        x = nx
    while y != dst[1]:
        ny = y + (1 if dst[1] > y else -1)
        links.append(((x, y), (x, ny)))
        y = ny
    return links


@dataclass
class Flit:
    payload: object = 0
    end_of_packet: bool = True
    setup: bool = False
    teardown: bool = False
    mem_op: Optional[str] = None
    conn_id: Optional[int] = None
    cls: TrafficClass = TrafficClass.CORE
    packet_id: Optional[int] = None
    dst: Optional[tuple] = None  # endpoint buffer key (tile, endpoint, buffer)


@dataclass
class Connection:
    conn_id: int
    src: tuple  # (tile, endpoint)
    dst: tuple  # (tile, endpoint, buffer)
    credit_limit: Optional[int]  # None: intra-tile, no credits
    credits_available: int = 0
    in_flight: int = 0
    returning: int = 0
    debt: int = 0
    guaranteed_consumer: bool = False
    cls: TrafficClass = TrafficClass.CORE
    open: bool = True

    def __post_init__(self):
        if self.credit_limit is not None and self.credits_available == 0 and self.in_flight == 0:
            self.credits_available = self.credit_limit

    @property
    def credited(self):
        return self.credit_limit is not None

    @property
    def src_tile(self):
        return self.src[0]

    @property
    def dst_tile(self):
        return self.dst[0]

    def conserved(self):
        if not self.credited:
            return True
        return self.in_flight + self.credits_available + self.returning - self.debt == self.credit_limit

    def take_credit(self):
        if not self.open:
            raise NetworkError(f"send on torn-down connection {self.conn_id}")
        if not self.credited:
            return True
        if self.credits_available <= 0:
            return False
        self.credits_available -= 1
        self.in_flight += 1
        return True

    def flit_consumed(self):
        if self.credited:
            self.in_flight -= 1
            self.returning += 1

    def credit_arrived(self):
        self.returning -= 1
        if self.debt:
            self.debt -= 1
        else:
            self.credits_available += 1


def set_credits(conn, n):
    """Change a connection's credit limit; the available count moves by the
    same delta, floored at zero (the shortfall is absorbed by returning credits)."""
    if n < 1:
        raise ValueError("credit count must be >= 1")
    if not conn.credited:
        raise NetworkError("intra-tile connections do not use credits")
    delta = n - conn.credit_limit
    if delta == 0:
        return conn
    if delta > 0 and not conn.guaranteed_consumer:
        warnings.warn(
            f"connection {conn.conn_id}: raising credits to {n} is only safe when the "
            "destination is guaranteed to consume all data", CreditWarning, stacklevel=2)
    conn.credit_limit = n
    avail = conn.credits_available + delta
    if avail < 0:
        conn.debt += -avail
        avail = 0
    elif conn.debt and delta > 0:
        paid = min(conn.debt, avail)
        conn.debt -= paid
        avail -= paid
    conn.credits_available = avail
    return conn


def multicast(buffers, mask, word, capacity):
    """Deliver ``word`` to every buffer selected by ``mask`` or to none.

    ``buffers`` is indexed by core; returns the set of cores written.
    """
    if not 0 < mask < (1 << len(buffers)):
        raise ValueError("multicast mask must be non-zero")
    targets = [i for i in range(len(buffers)) if mask >> i & 1]
    if any(len(buffers[i]) >= capacity for i in targets):
        return set()
    for i in targets:
        buffers[i].append(word)
    return set(targets)


# -- cycle-stepped mesh ------------------------------------------------------

PORTS = ("L", "N", "E", "S", "W")
_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
_STEP = {"N": (0, -1), "S": (0, 1), "E": (1, 0), "W": (-1, 0)}


def _out_port(cur, dst):
    if dst[0] > cur[0]:
        return "E"
    if dst[0] < cur[0]:
        return "W"
    if dst[1] > cur[1]:
        return "S"
    if dst[1] < cur[1]:
        return "N"
    return "L"


class EndpointBuffer:
    def __init__(self, capacity):
        self.capacity = capacity
        self.flits = deque()
        self.reserved = 0  # admitted intra-tile flits not yet delivered

    def __len__(self):
        return len(self.flits)

    def has_space(self):
        return len(self.flits) + self.reserved < self.capacity


class MeshNetwork:
    """Flit-level mesh with one physical network per traffic class.

    Per cycle: callers send and consume, then :meth:`step` advances every
    flit at most one stage, computed from start-of-cycle buffer occupancy.
    """

    def __init__(self, width=4, height=4, buffer_depth=4, endpoint_depth=4, classes=TrafficClass):
        self.width = width
        self.height = height
        self.depth = buffer_depth
        self.endpoint_depth = endpoint_depth
        self.classes = tuple(classes)
        self.cycle = 0
        self.buffers = {}  # (tile, cls, port) -> deque
        self.owner = {}  # (tile, cls, out port) -> in port holding it
        self.rr = {}  # (tile, cls, out port) -> last winning port index
        self.active = set()  # (tile, cls) with buffered flits
        self.held = {}  # (tile, cls) -> flits buffered in that router
        self.endpoints = {}
        self.connections = {}
        self.credit_events = []  # heap of (arrival cycle, seq, conn)
        self._credit_seq = 0
        self.link_owner = {}  # (from, to, cls) -> packet id mid-flight
        self.violations = 0
        self.max_occupancy = 0
        self.link_flits = {}
        self._next_conn = 0
        self._next_packet = 0
        self._pending_mcast = []
        for x in range(width):
            for y in range(height):
                for c in self.classes:
                    for p in PORTS:
                        self.buffers[((x, y), c, p)] = deque()

    # -- setup
    def endpoint(self, key, capacity=None):
        if key not in self.endpoints:
            self.endpoints[key] = EndpointBuffer(capacity or self.endpoint_depth)
        return self.endpoints[key]

    def open_connection(self, src, dst, credits=None, cls=TrafficClass.CORE,
                        guaranteed_consumer=False):
        """``src`` = (tile, endpoint); ``dst`` = (tile, endpoint, buffer).

        Inter-tile connections default to as many credits as the target
        buffer has spaces.
        """
        self.endpoint(dst)
        if tuple(src[0]) == tuple(dst[0]):
            limit = None
        else:
            limit = credits if credits is not None else self.endpoints[dst].capacity
        conn = Connection(self._next_conn, src, dst, limit, cls=cls,
                          guaranteed_consumer=guaranteed_consumer)
        self.connections[conn.conn_id] = conn
        self._next_conn += 1
        return conn

    def close_connection(self, conn):
        conn.open = False

    def new_packet_id(self):
        self._next_packet += 1
        return self._next_packet

    # -- per-cycle operations
    def can_send(self, conn):
        if conn.credited:
            inj = self.buffers[(tuple(conn.src_tile), conn.cls, "L")]
            return conn.credits_available > 0 and len(inj) < self.depth
        return self.endpoints[conn.dst].has_space()

    def send_flit(self, conn, flit):
        """Offer a flit; returns True if accepted, False if the sender must retry."""
        if not conn.open:
            raise NetworkError(f"send on torn-down connection {conn.conn_id}")
        flit.conn_id = conn.conn_id
        flit.cls = conn.cls
        flit.dst = conn.dst
        if flit.packet_id is None:
            flit.packet_id = self.new_packet_id()
        tile = tuple(conn.src_tile)
        if conn.credited:
            inj = self.buffers[(tile, conn.cls, "L")]
            if conn.credits_available <= 0 or len(inj) >= self.depth:
                return False
            conn.take_credit()
        else:
            ep = self.endpoints[conn.dst]
            if not ep.has_space():
                return False
            ep.reserved += 1
            inj = self.buffers[(tile, conn.cls, "L")]
        inj.append(flit)
        self._hold((tile, conn.cls), 1)
        return True

    def inject(self, tile, flit, cls):
        """Uncredited injection (memory traffic); False if the local port is full."""
        inj = self.buffers[(tuple(tile), cls, "L")]
        if len(inj) >= self.depth:
            return False
        flit.cls = cls
        if flit.packet_id is None:
            flit.packet_id = self.new_packet_id()
        self.endpoint(flit.dst)
        inj.append(flit)
        self._hold((tuple(tile), cls), 1)
        return True

    def multicast(self, tile, mask, buffer, flit, cores=8):
        targets = [self.endpoint((tuple(tile), c, buffer)) for c in range(cores) if mask >> c & 1]
        if not targets:
            raise ValueError("multicast mask must be non-zero")
        if not all(t.has_space() for t in targets):
            return set()
        for t in targets:
            t.reserved += 1
        self._pending_mcast.append(targets + [flit])
        return {c for c in range(cores) if mask >> c & 1}

    def _hold(self, key, n):
        left = self.held.get(key, 0) + n
        self.held[key] = left
        if left:
            self.active.add(key)
        else:
            self.active.discard(key)

    def consume(self, key):
        """Remove the oldest flit from an endpoint buffer (None if empty).

        Credited connections send a credit back; it arrives after the
        return path latency.
        """
        ep = self.endpoints.get(key)
        if ep is None or not ep.flits:
            return None
        flit = ep.flits.popleft()
        conn = self.connections.get(flit.conn_id)
        if conn is not None and conn.credited:
            conn.flit_consumed()
            arrive = self.cycle + route_latency(tuple(conn.dst_tile), tuple(conn.src_tile))
            heapq.heappush(self.credit_events, (arrive, self._credit_seq, conn))
            self._credit_seq += 1
        return flit

    def step(self):
        moves = []
        eject_load = {}
        for tile, cls in sorted(self.active):
            self._arbitrate(tile, cls, moves, eject_load)
        for src_key, dst in moves:
            tile, cls, _ = src_key
            flit = self.buffers[src_key].popleft()
            self._hold((tile, cls), -1)
            if dst[0] == "eject":
                ep = self.endpoints[flit.dst]
                conn = self.connections.get(flit.conn_id)
                if conn is not None and not conn.credited:
                    ep.reserved -= 1
                ep.flits.append(flit)
                if len(ep.flits) > ep.capacity:
                    raise NetworkError(f"endpoint {flit.dst} overflow")
            else:
                _, ntile, port = dst
                link = (tile, ntile, cls)
                self.link_flits[link] = self.link_flits.get(link, 0) + 1
                holder = self.link_owner.get(link)
                if holder is not None and holder != flit.packet_id:
                    self.violations += 1
                self.link_owner[link] = None if flit.end_of_packet else flit.packet_id
                buf = self.buffers[(ntile, cls, port)]
                buf.append(flit)
                if len(buf) > self.depth:
                    raise NetworkError(f"router buffer {(ntile, cls, port)} overflow")
                self.max_occupancy = max(self.max_occupancy, len(buf))
                self._hold((ntile, cls), 1)
        for group in self._pending_mcast:
            flit = group.pop()
            for ep in group:
                ep.reserved -= 1
                ep.flits.append(flit)
        self._pending_mcast = []
        self.cycle += 1
        while self.credit_events and self.credit_events[0][0] <= self.cycle:
            _, _, conn = heapq.heappop(self.credit_events)
            conn.credit_arrived()

    def _arbitrate(self, tile, cls, moves, eject_load):
        wants = {}
        for i, p in enumerate(PORTS):
            buf = self.buffers[(tile, cls, p)]
            if buf:
                out = _out_port(tile, tuple(buf[0].dst[0]))
                wants.setdefault(out, []).append(i)
        for out, inputs in wants.items():
            okey = (tile, cls, out)
            holder = self.owner.get(okey)
            if holder is not None:
                if holder not in inputs:
                    continue
                winner = holder
            else:
                last = self.rr.get(okey, -1)
                winner = min(inputs, key=lambda i: (i - last - 1) % len(PORTS))
            in_key = (tile, cls, PORTS[winner])
            flit = self.buffers[in_key][0]
            if out == "L":
                ep = self.endpoints[flit.dst]
                pending = eject_load.get(flit.dst, 0)
                conn = self.connections.get(flit.conn_id)
                own_reservation = conn is not None and not conn.credited
                room = len(ep.flits) + pending + (ep.reserved - (1 if own_reservation else 0))
                if room >= ep.capacity:
                    continue
                eject_load[flit.dst] = pending + 1
                moves.append((in_key, ("eject",)))
            else:
                dx, dy = _STEP[out]
                ntile = (tile[0] + dx, tile[1] + dy)
                nbuf = self.buffers[(ntile, cls, _OPPOSITE[out])]
                if len(nbuf) >= self.depth:
                    continue
                moves.append((in_key, ("hop", ntile, _OPPOSITE[out])))
            self.rr[okey] = winner
            self.owner[okey] = None if flit.end_of_packet else winner

    def occupancy_ok(self):
        return (all(len(b) <= self.depth for b in self.buffers.values())
                and all(len(e.flits) <= e.capacity for e in self.endpoints.values()))

    def idle(self):
        return not self.active and not self._pending_mcast and not self.credit_events


# -- analytic link timing for the engine -------------------------------------

class LinkReservations:
    """Wormhole occupancy of mesh links, tracked as next-free cycles.

    A packet of ``n`` flits holds each link on its path for ``n`` cycles
    from the moment its head wins the link.
    """

    def __init__(self):
        self.free_at = {}
        self.busy = {}
        self.wait_cycles = 0

    def traverse(self, src, dst, cls, depart, nflits=1):
        """Return the head's arrival cycle at ``dst``."""
        if src == dst:
            return depart + 1
        head = depart
        for link in xy_path(src, dst):
            key = (link, int(cls))
            start = self.free_at.get(key, 0)
            if start > head:
                self.wait_cycles += start - head
            else:
                start = head
            self.free_at[key] = start + nflits
            self.busy[key] = self.busy.get(key, 0) + nflits
            head = start + 1
        return head + 1

    def utilization(self, cycles):
        if cycles <= 0:
            return {}
        return {k: v / cycles for k, v in sorted(self.busy.items())}
