"""Deterministic discrete-event simulation of a layered live-streaming swarm.

One logical server holds every chunk as soon as it is created and answers
requests according to the strategy's server policy.  Peers pull chunks
through per-layer sliding windows; transfers share node bandwidth with a
fluid fair-share model.  A tracker keeps the peer status tables and, for
strategies that use it, recomputes the max-flow allocation.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass
from typing import Callable

from mvp2p.flow import (
    EPS,
    SINK,
    SOURCE,
    Allocation,
    PeerSubsetStats,
    allocate,
    theoretical_optimal_share,
)
from mvp2p.layers import LayerGraph, LayerId, resolve_layer_spec
from mvp2p.scheduling import (
    REQ_ACTIVE,
    REQ_CANCELLED,
    REQ_DONE,
    REQ_QUEUED,
    REQ_SENT,
    SERVER,
    Request,
    WeightedChoice,
    playback_fraction,
    upload_admits,
)
from mvp2p.sim.config import ScenarioConfig
from mvp2p.sim.metrics import Metrics, Sample
from mvp2p.sim.topology import Topology, generate_topology
from mvp2p.sim.windows import SlidingWindows

NORMAL, STARTUP, SWITCH = 0, 1, 2
PRUNE_EVERY = 10
MAX_SKIPS = 32


# ---- population ---------------------------------------------------------
@dataclass(frozen=True)
class PeerSpec:
    pid: int
    observing: LayerId
    inbound: float
    outbound: float
    join_time: float
    depart_time: float | None


def _exact_counts(fractions: dict[float, float], n: int) -> list[float]:
    """Spread ``n`` draws over histogram bins by largest remainder."""
    bins = sorted(fractions)
    raw = [fractions[b] * n for b in bins]
    counts = [int(math.floor(x)) for x in raw]
    short = n - sum(counts)
    by_rest = sorted(range(len(bins)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in by_rest[:short]:
        counts[i] += 1
    out: list[float] = []
    for b, c in zip(bins, counts):
        out += [b] * c
    return out


def generate_population(config: ScenarioConfig, graph: LayerGraph) -> list[PeerSpec]:
    """Observing layers, bandwidths, join and departure times of all peers."""
    rng = random.Random(f"population:{config.seed}")
    n = config.peer_count
    layers = graph.sorted_layers()
    observing = [layers[rng.randrange(len(layers))] for _ in range(n)]
    if config.bandwidth_histogram:
        inbound = _exact_counts(dict(config.bandwidth_histogram), n)
        rng.shuffle(inbound)
    else:
        inbound = [float(config.inbound_bps)] * n
    outbound = [config.outbound_ratio * i for i in inbound]
    riders = rng.sample(range(n), round(config.free_rider_fraction * n)) if n else []
    for i in riders:
        outbound[i] = 0.0
    lo, hi = config.join_window
    joins = [rng.uniform(lo, hi) for _ in range(n)]
    leaving = set(rng.sample(range(n), round(config.departure_fraction * n))) if n else set()
    specs = []
    for i in range(n):
        depart = None
        if i in leaving:
            depart = rng.uniform(max(hi, joins[i]), config.horizon_s)
        specs.append(PeerSpec(i, observing[i], inbound[i], outbound[i], joins[i], depart))
    return specs


def population_stats(specs, observing_of=None) -> list[PeerSubsetStats]:
    counts: dict[LayerId, int] = {}
    out: dict[LayerId, float] = {}
    for s in specs:
        layer = observing_of(s) if observing_of else s.observing
        counts[layer] = counts.get(layer, 0) + 1
        out[layer] = out.get(layer, 0.0) + s.outbound
    return [PeerSubsetStats(l, counts[l], out[l]) for l in sorted(counts)]


# ---- runtime objects ----------------------------------------------------
class Transfer:
    __slots__ = ("sender", "receiver", "req", "bits", "remaining", "rate", "last",
                 "version", "rescue", "done", "cap")

    def __init__(self, sender, receiver, req: Request, now: float, rescue: bool) -> None:
        self.sender = sender
        self.receiver = receiver
        self.req = req
        self.bits = req.bits
        self.remaining = req.bits
        self.rate = 0.0
        self.last = now
        self.version = 0
        self.rescue = rescue
        self.done = False
        self.cap = 0.0

    def remaining_at(self, now: float) -> float:
        return max(0.0, self.remaining - self.rate * (now - self.last))


class Server:
    pid = SERVER
    active = True
    subset = -1

    def __init__(self, outbound: float) -> None:
        self.outbound = outbound
        self.unlimited = math.isinf(outbound)
        self.uploads: list[Transfer] = []
        self.queue: list[Request] = []
        self.sent: dict[int, int] = {}


class Peer:
    unlimited = False
    __slots__ = (
        "pid", "spec", "inbound", "outbound", "observing", "subset", "active",
        "windows", "have", "counts", "nbrs", "nd", "server_delay", "pending",
        "outstanding", "srv_outstanding", "uploads", "downloads", "n_rescue", "upload_bits", "up_rate", "queue",
        "backoff", "stage", "start_index", "switch_dons", "switch_index",
        "switch_time", "stream_bps", "p_seq", "ledger", "join_time", "sel_cache",
        "srv_full", "exhausted", "srv_refused",
    )

    def __init__(self, spec: PeerSpec, n_layers: int) -> None:
        self.pid = spec.pid
        self.spec = spec
        self.inbound = spec.inbound
        self.outbound = spec.outbound
        self.observing = spec.observing
        self.subset = -1
        self.active = False
        self.sel_cache: dict = {}
        # per-round scratch: server pipeline full, layers with nothing placeable
        self.srv_full = False
        self.exhausted: set[int] = set()
        self.srv_refused: set[int] = set()
        self.windows = SlidingWindows(n_layers)
        self.have: dict[int, float] = {}
        self.counts: dict[int, int] = {}
        self.nbrs: list[tuple[Peer, float]] = []
        self.nd: dict[int, float] = {}
        self.server_delay = 0.0
        self.pending: dict[int, Request] = {}
        self.outstanding = 0.0
        self.srv_outstanding = 0.0
        self.uploads: list[Transfer] = []
        self.downloads: list[Transfer] = []
        self.n_rescue = 0
        self.upload_bits = 0.0
        self.up_rate = 0.0
        self.queue: list[Request] = []
        self.backoff: dict[int, float] = {}
        self.stage = NORMAL
        self.start_index = 0
        self.switch_dons: tuple[int, ...] = ()
        self.switch_index = 0
        self.switch_time = 0.0
        self.stream_bps = 0.0
        self.p_seq = 1.0
        self.ledger = None
        self.join_time = spec.join_time


class AllocationView:
    """Allocation tables keyed by decoding-order ranks for fast lookup."""

    __slots__ = ("time", "allocation", "supply", "rho", "selection", "copies")

    def __init__(self, time: float, alloc: Allocation | None, graph: LayerGraph) -> None:
        don = graph.layer_don
        self.time = time
        self.allocation = alloc
        self.supply: dict[int, WeightedChoice] = {}
        self.rho: dict[int, dict[int, float]] = {}
        self.selection: dict[int, WeightedChoice] = {}
        self.copies: dict[int, int] = {}
        if alloc is None:
            return
        for subset, props in alloc.supply.items():
            weights = {don(l): f for l, f in props.items()}
            self.supply[don(subset)] = WeightedChoice(weights)
            self.rho[don(subset)] = weights
        for layer, props in alloc.selection.items():
            self.selection[don(layer)] = WeightedChoice({don(s): f for s, f in props.items()})
        for layer, n in alloc.copies.items():
            self.copies[don(layer)] = n


EMPTY_VIEW_CHOICE = WeightedChoice({})


class Tracker:
    """Peer status table plus the per-subset outbound aggregate."""

    def __init__(self) -> None:
        self.status: dict[int, tuple[LayerId, float]] = {}
        self.subsets: dict[LayerId, list] = {}

    def _add(self, layer: LayerId, out: float, sign: int) -> None:
        entry = self.subsets.setdefault(layer, [0, 0.0])
        entry[0] += sign
        entry[1] += sign * out
        if entry[0] == 0:
            entry[1] = 0.0

    def join(self, pid: int, layer: LayerId, outbound: float) -> None:
        if pid in self.status:
            raise KeyError(f"peer {pid} already joined")
        self.status[pid] = (layer, outbound)
        self._add(layer, outbound, +1)

    def depart(self, pid: int) -> None:
        layer, out = self.status.pop(pid)
        self._add(layer, out, -1)

    def switch(self, pid: int, layer: LayerId) -> None:
        old, out = self.status[pid]
        self._add(old, out, -1)
        self.status[pid] = (layer, out)
        self._add(layer, out, +1)

    def population(self) -> list[PeerSubsetStats]:
        return [PeerSubsetStats(l, c, max(0.0, o)) for l, (c, o) in sorted(self.subsets.items())]

    def consistent(self) -> bool:
        fresh: dict[LayerId, list] = {}
        for layer, out in self.status.values():
            e = fresh.setdefault(layer, [0, 0.0])
            e[0] += 1
            e[1] += out
        for layer, (c, o) in self.subsets.items():
            f = fresh.get(layer, [0, 0.0])
            if c != f[0] or abs(o - f[1]) > 1e-6 * max(1.0, abs(f[1])):
                return False
        return all(layer in self.subsets for layer in fresh)


def flow_is_valid(alloc: Allocation) -> bool:
    """Capacity and conservation checks on a solved network."""
    net, sol = alloc.network, alloc.solution
    tol = 1e-6 * max(1.0, max(net.capacity.values(), default=0.0))
    balance: dict = {}
    for edge, cap in net.capacity.items():
        f = sol.flow.get(edge, 0.0)
        if f < -tol or f > cap + tol:
            return False
        a, b = edge
        balance[a] = balance.get(a, 0.0) - f
        balance[b] = balance.get(b, 0.0) + f
    for node, bal in balance.items():
        if node not in (SOURCE, SINK) and abs(bal) > tol:
            return False
    return abs(-balance.get(SOURCE, 0.0) - sol.max_flow_value) <= tol * 10


# ---- simulation ---------------------------------------------------------
class Simulation:
    def __init__(
        self,
        config: ScenarioConfig,
        graph: LayerGraph | None = None,
        strategy=None,
        check_invariants: bool = False,
    ) -> None:
        from mvp2p.strategies import make_strategy

        self.config = config
        self.graph = graph or resolve_layer_spec(config.layer_spec)
        self.strategy = strategy or make_strategy(config.strategy)
        self.check = check_invariants
        g = self.graph
        self.n_layers = len(g)
        self.layer_of_don = list(g.decode_order)
        self.bits_of_don = [float(g.bitrate[l]) for l in g.decode_order]
        self.required_dons = {
            l: tuple(sorted(g.layer_don(x) for x in g.required_layers(l))) for l in g.layers
        }
        self.stream_of = {l: float(g.stream_bitrate(g.required_layers(l))) for l in g.layers}

        self.specs = generate_population(config, g)
        self.peers = [Peer(s, self.n_layers) for s in self.specs]
        self.server = Server(config.server_bps)
        self.topology: Topology | None = None
        if self.peers:
            deg = min(config.neighbor_count, len(self.peers) - 1)
            self.topology = generate_topology(
                len(self.peers), 1, deg, config.seed, config.delay_range
            )
            sid = self.topology.servers[0]
            for p in self.peers:
                p.nbrs = [(self.peers[q], self.topology.delay(p.pid, q))
                          for q in self.topology.neighbors[p.pid]]
                p.nd = {q.pid: d for q, d in p.nbrs}
                p.server_delay = self.topology.delay(p.pid, sid)

        self.rng = random.Random(f"protocol:{config.seed}")
        self.event_rng = random.Random(f"events:{config.seed}")
        self.tracker = Tracker()
        self.view: AllocationView = AllocationView(-math.inf, None, g)
        self.prev_view: AllocationView = self.view
        self.last_recalc = -math.inf
        self.recalc_pending = False
        self.copies: dict[int, int] = {}

        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.metrics = Metrics(window=(config.analysis_start, config.horizon_s))
        self._opt_weighted = 0.0
        self._opt_weight = 0.0
        self._req_seq = 0
        self.subset_epoch = 0  # bumped whenever a peer's supplying subset changes
        self.rtt = config.max_rtt_s
        self.playback_start = config.playback_start_s

    # ---- event queue ----------------------------------------------------
    def at(self, time: float, handler: Callable, payload=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, handler, payload))

    def run(self) -> Metrics:
        cfg = self.config
        for p in self.peers:
            self.at(p.spec.join_time, self._on_join, p)
            if p.spec.depart_time is not None:
                self.at(p.spec.depart_time, self._on_depart, p)
        self.at(0.0, self._on_second, 0)
        self.at(0.0, self._on_server_tick, None)
        t = cfg.analysis_start
        while t <= cfg.horizon_s + 1e-9:
            self.at(t, self._on_sample, None)
            t += cfg.sample_interval_s
        if self.strategy.uses_ledger:
            self.at(0.0, self._on_rechoke, None)
            self.at(0.0, self._on_optimistic, None)
        self.strategy.setup(self)

        heap = self._heap
        pop = heapq.heappop
        horizon = cfg.horizon_s
        while heap:
            time, _, handler, payload = heap[0]
            if time > horizon:
                break
            pop(heap)
            self.now = time
            handler(payload)
        self._finish()
        return self.metrics

    # ---- broadcaster and players ----------------------------------------
    def _on_second(self, t: int) -> None:
        """Create chunk ``t`` of every layer and play index ``t - start``."""
        n = self.n_layers
        play = t - int(self.playback_start)
        m = self.metrics
        for p in self.peers:
            if not p.active:
                continue
            w = p.windows
            w.live_edge = t
            if play < 0 or play < p.start_index:
                continue
            base = play * n
            for don in w.order:
                if w.covers(don, play):
                    arr = p.have.get(base + don)
                    if arr is None or arr > self.now + 1e-9:
                        m.missed_deadlines += 1
            if p.stage == STARTUP or (p.stage == SWITCH and p.switch_index <= play):
                p.stage = NORMAL
            w.advance(play + 1)
            cut = (play + 1) * n
            stale = [r for k, r in p.pending.items() if k < cut]
            for r in stale:
                self._cancel(r)
        if play >= 0 and play % PRUNE_EVERY == 0:
            self._prune((play - 2) * n)
        self.at(t + 1.0, self._on_second, t + 1)

    def _prune(self, cut: int) -> None:
        for p in self.peers:
            if p.active:
                p.have = {k: v for k, v in p.have.items() if k >= cut}
                p.counts = {k: v for k, v in p.counts.items() if k >= cut}
                p.srv_refused = {k for k in p.srv_refused if k >= cut}
        lo, hi = self.metrics.window
        hist = self.metrics.server_copy_histogram
        n = self.n_layers
        keep = {}
        for k, c in self.server.sent.items():
            if k >= cut:
                keep[k] = c
            elif lo <= k // n <= hi:
                hist[c] = hist.get(c, 0) + 1
        self.server.sent = keep
        self.copies = {k: v for k, v in self.copies.items() if k >= cut}

    # ---- peer lifecycle -------------------------------------------------
    def _exec_index(self) -> int:
        return int(math.floor(self.now - self.playback_start))

    def _on_join(self, p: Peer) -> None:
        cfg = self.config
        p.active = True
        p.subset = self.graph.layer_don(p.observing)
        self.subset_epoch += 1
        p.start_index = max(0, self._exec_index() + cfg.startup_delay_s)
        w = p.windows
        w.live_edge = int(math.floor(self.now))
        w.exec_index = p.start_index
        for don in self.required_dons[p.observing]:
            w.add_layer(don, p.start_index)
        self._set_stream(p)
        p.stage = STARTUP
        self.tracker.join(p.pid, p.observing, p.outbound)
        self._tracker_changed()
        self.strategy.on_join(self, p)
        if cfg.switch_rate_per_min > 0:
            self._schedule_switch(p, self.now + cfg.startup_delay_s)
        self.at(self.now, self._on_peer_tick, p)

    def _set_stream(self, p: Peer) -> None:
        p.stream_bps = self.stream_of[p.observing]
        p.p_seq = playback_fraction(p.stream_bps, p.inbound)

    def _on_depart(self, p: Peer) -> None:
        if not p.active:
            return
        p.active = False
        self.metrics.departures += 1
        for tr in list(p.uploads):
            self._cancel(tr.req)
        for tr in list(p.downloads):
            self._cancel(tr.req)
        for r in p.queue:
            if r.state == REQ_QUEUED:
                self._refuse(r)
        p.queue = []
        for r in list(p.pending.values()):
            self._cancel(r)
        for k in p.have:
            for q, _ in p.nbrs:
                c = q.counts.get(k)
                if c:
                    q.counts[k] = c - 1
            c = self.copies.get(k)
            if c:
                self.copies[k] = c - 1
        self.tracker.depart(p.pid)
        self._tracker_changed()
        self.strategy.on_depart(self, p)

    def _schedule_switch(self, p: Peer, earliest: float) -> None:
        rate = self.config.switch_rate_per_min / 60.0
        t = earliest + self.event_rng.expovariate(rate)
        self.at(t, self._on_switch, p)

    def _on_switch(self, p: Peer) -> None:
        if not p.active:
            return
        g = self.graph
        layers = g.sorted_layers()
        choices = [l for l in layers if l != p.observing]
        if not choices:
            return
        target = choices[self.event_rng.randrange(len(choices))]
        old = set(self.required_dons[p.observing])
        new = set(self.required_dons[target])
        # the new layers start at the first index a server fetch can still
        # deliver: never sooner than the switch delay
        cfg = self.config
        fresh_bits = sum(self.bits_of_don[d] for d in new - old)
        lead = max(cfg.switch_delay_s, 2 * p.server_delay + fresh_bits / p.inbound + cfg.tick_s)
        k0 = int(math.ceil(self.now + lead - self.playback_start))
        w = p.windows
        for don in sorted(old - new):
            w.retire_layer(don, k0)
        for don in sorted(new - old):
            w.add_layer(don, max(k0, w.exec_index))
        n = self.n_layers
        for r in [r for k, r in p.pending.items() if not w.covers(k % n, k // n)]:
            self._cancel(r)  # slots the new layer set no longer needs
        p.observing = target
        p.subset = g.layer_don(target)
        self.subset_epoch += 1
        self._set_stream(p)
        self.metrics.switches += 1
        fresh = tuple(sorted(new - old))
        if fresh:
            p.stage = SWITCH
            p.switch_dons = fresh
            p.switch_index = max(k0, w.exec_index)
            p.switch_time = self.now
        self.tracker.switch(p.pid, target)
        self._tracker_changed()
        self._schedule_switch(p, self.now)
        if fresh and p.stage == SWITCH:
            self._peer_round(p)

    # ---- tracker --------------------------------------------------------
    def _tracker_changed(self) -> None:
        if self.check and not self.tracker.consistent():
            self.metrics.tracker_violations += 1
        if not self.strategy.uses_flow_model:
            return
        if self.recalc_pending:
            return
        due = self.last_recalc + self.config.recalc_interval_s
        if self.now >= due:
            self._recalc()
        else:
            self.recalc_pending = True
            self.at(due, self._on_recalc, None)

    def _on_recalc(self, _) -> None:
        self.recalc_pending = False
        self._recalc()

    def _recalc(self) -> None:
        self.last_recalc = self.now
        pop = self.tracker.population()
        if not any(s.peer_count for s in pop):
            return
        alloc = allocate(self.graph, pop)
        self.metrics.recalculations += 1
        if not flow_is_valid(alloc):
            self.metrics.flow_violations += 1
        self.prev_view = self.view
        self.view = AllocationView(self.now, alloc, self.graph)

    def view_for(self, p: Peer) -> AllocationView:
        """Latest allocation that has reached this peer."""
        v = self.view
        if v.time + p.server_delay <= self.now:
            return v
        return self.prev_view

    # ---- peer rounds ----------------------------------------------------
    def _on_peer_tick(self, p: Peer) -> None:
        if not p.active:
            return
        self._peer_round(p)
        if p.queue:
            self._serve_queue(p)
        self.at(self.now + self.config.tick_s, self._on_peer_tick, p)

    def _peer_round(self, p: Peer) -> None:
        cfg = self.config
        w = p.windows
        w.urgent_limit = int(math.floor(self.now + cfg.urgent_range_s - self.playback_start))
        self._rescue(p)
        budget = p.inbound * cfg.request_window_s
        strategy = self.strategy
        skipped = []
        counts = p.counts
        p.srv_full = p.srv_outstanding >= budget
        p.exhausted.clear()
        dead = 0
        while p.outstanding < budget:
            pick = strategy.next_chunk(self, p)
            if pick is None:
                break
            key, emergent = pick
            if key < 0:
                # the strategy already knows this pick cannot be placed
                dead += 1
                if len(skipped) + dead >= MAX_SKIPS:
                    break
                continue
            if (not counts.get(key) and (p.srv_full or (not emergent and key in p.srv_refused))
                    and self.slack(p, key) >= 0):
                # no neighbour announces it and the server will not take it now
                target = None
            else:
                target = strategy.select_supplier(self, p, key, emergent)
            rescue = target == SERVER and self.slack(p, key) < 0
            if target is None or (target == SERVER and not rescue and p.srv_outstanding >= budget):
                # server pipeline full: leave the slot for a later round
                w.mark_requested(key)
                skipped.append(key)
                if len(skipped) + dead >= MAX_SKIPS:
                    break
                continue
            self._send(p, key, target, emergent, rescue)
            p.srv_full = p.srv_outstanding >= budget
        for key in skipped:
            w.mark_missing(key)

    def slack(self, p: Peer, key: int) -> float:
        """Deadline slack of a chunk if a peer attempt failed first."""
        idx, don = divmod(key, self.n_layers)
        bits = self.bits_of_don[don]
        srv = bits / self.server.outbound if not self.server.unlimited else 0.0
        return (self.playback_start + idx - self.now - 2 * self.rtt
                - max(bits / p.inbound, srv))

    def _rescue(self, p: Peer) -> None:
        """Hand chunks whose slack is gone to the server."""
        now = self.now
        n = self.n_layers
        margin = self._rescue_margin(p)
        due = now + margin - self.playback_start
        tick = self.config.tick_s
        for r in list(p.pending.values()):
            if r.key // n >= due:
                continue
            if r.supplier == SERVER:
                if r.state == REQ_ACTIVE:
                    self._reserve(p, r.transfer)
                continue
            if r.state == REQ_ACTIVE:
                tr = r.transfer
                deadline = self.playback_start + r.key // n
                finish = now + tr.remaining_at(now) / tr.rate + self._delay(tr) if tr.rate > 0 else math.inf
                # keep it while a rescue at the next check would still be in time
                if finish <= deadline and (finish <= now + tick or self.slack(p, r.key) > tick):
                    self._reserve(p, tr)
                    continue
            key = r.key
            self._cancel(r)
            self._send(p, key, SERVER, True, True)
        w = p.windows
        limit = math.ceil(now + self._rescue_margin(p) - self.playback_start) - 1
        for don in w.order:
            while True:
                idx = w.first_missing(don)
                if idx is None or idx > limit:
                    break
                self._send(p, idx * n + don, SERVER, True, True)

    def _reserve(self, p: Peer, tr: Transfer) -> None:
        """Give a deadline-bound download the inbound rate it needs."""
        if not tr.rescue:
            tr.rescue = True
            p.n_rescue += 1
            self._rebalance(tr.sender, p)

    def _rescue_margin(self, p: Peer) -> float:
        """Lead time a server rescue of one whole chunk index needs.

        The slack formula prices a single chunk, but every layer of an index
        is rescued at the same moment and they share the inbound link, so the
        margin uses the bits of the whole index plus one scheduling tick.
        """
        bits = sum(self.bits_of_don[d] for d in p.windows.order)
        srv = bits / self.server.outbound if not self.server.unlimited else 0.0
        return 2 * self.rtt + max(bits / p.inbound, srv) + 2 * self.config.tick_s

    def _delay(self, tr: Transfer) -> float:
        if tr.sender is self.server:
            return tr.receiver.server_delay
        return _pair_delay(tr.sender, tr.receiver)

    def available(self, p: Peer, q: Peer, delay: float, key: int) -> bool:
        if not q.active or q.outbound <= 0:
            return False
        t = q.have.get(key)
        if t is None or t + delay > self.now:
            return False
        if saturated(q, self.config.upload_window_s):
            return False
        b = p.backoff.get(q.pid)
        return b is None or b <= self.now

    def holders(self, p: Peer, key: int) -> list[Peer]:
        now = self.now
        cap_window = self.config.upload_window_s
        backoff = p.backoff
        out = []
        for q, d in p.nbrs:
            t = q.have.get(key)
            if t is None or t + d > now or not q.active or q.outbound <= 0:
                continue
            if saturated(q, cap_window):
                continue
            b = backoff.get(q.pid)
            if b is not None and b > now:
                continue
            out.append(q)
        return out

    def _send(self, p: Peer, key: int, target: int, emergent: bool, rescue: bool) -> None:
        idx, don = divmod(key, self.n_layers)
        w = p.windows
        if not w.covers(don, idx):
            self.metrics.closure_violations += 1
        bits = self.bits_of_don[don]
        rho = self.view_for(p).rho.get(p.subset)
        rho = rho.get(don, 0.0) if rho else 0.0
        self._req_seq += 1
        r = Request(p.pid, target, key, bits, emergent, idx <= w.urgent_limit, rescue,
                    p.outbound * rho, rho, 0, self._req_seq)
        p.pending[key] = r
        w.mark_requested(key)
        if target == SERVER:
            p.srv_outstanding += bits
        else:
            p.outstanding += bits
        self.metrics.requests += 1
        if target == SERVER:
            self.metrics.server_requests += 1
            delay = p.server_delay
        else:
            delay = _pair_delay(p, self.peers[target])
        self.at(self.now + delay, self._on_request, r)

    # ---- supplier side --------------------------------------------------
    def _on_request(self, r: Request) -> None:
        if r.state != REQ_SENT:
            return
        p = self.peers[r.requester]
        if not p.active:
            r.state = REQ_CANCELLED
            return
        r.rarity = self.copies.get(r.key, 0)
        if r.supplier == SERVER:
            s = self.server
            if r.rescue or not self.strategy.server_queues:
                if r.rescue and not s.unlimited and self._backlog(s) > s.outbound * self.config.upload_window_s:
                    self.metrics.capacity_violations += 1
                s.sent[r.key] = s.sent.get(r.key, 0) + 1
                self._start(s, r)
            else:
                r.state = REQ_QUEUED
                s.queue.append(r)
            return
        q = self.peers[r.supplier]
        have = q.have.get(r.key)
        if not q.active or have is None or have > self.now:
            self._refuse(r)
            return
        self.strategy.peer_receives(self, q, r)

    def _backlog(self, node) -> float:
        now = self.now
        return sum(tr.remaining_at(now) for tr in node.uploads)

    def upload_room(self, q) -> tuple[float, float]:
        """Bits the supplier can still commit to over one upload window.

        Uploads held back by slow receivers leave outbound idle, so spare
        fluid rate counts as room even when the committed backlog is large.
        """
        window = self.config.upload_window_s
        cap = q.outbound * window
        spare = (q.outbound - q.up_rate) * window
        return max(cap - self._backlog(q), spare), cap

    def accept_or_refuse(self, q: Peer, r: Request, ok: bool) -> None:
        if r.state not in (REQ_SENT, REQ_QUEUED):
            return
        if ok and self.peers[r.requester].active:
            self._start(q, r)
        else:
            self._refuse(r)

    def _serve_queue(self, q: Peer) -> None:
        queue = [r for r in q.queue if r.state == REQ_QUEUED]
        q.queue = []
        if queue:
            self.strategy.serve_queue(self, q, queue)

    def _on_server_tick(self, _) -> None:
        s = self.server
        if s.queue:
            queue = [r for r in s.queue if r.state == REQ_QUEUED]
            s.queue = []
            if queue:
                self.strategy.serve_server_queue(self, queue)
        self.at(self.now + self.config.tick_s, self._on_server_tick, None)

    def _refuse(self, r: Request) -> None:
        r.state = REQ_DONE
        self.metrics.refusals += 1
        p = self.peers[r.requester]
        delay = p.server_delay if r.supplier == SERVER else _pair_delay(p, self.peers[r.supplier])
        self.at(self.now + delay, self._on_refusal, r)

    def _on_refusal(self, r: Request) -> None:
        p = self.peers[r.requester]
        if p.pending.get(r.key) is r:
            del p.pending[r.key]
            _release(p, r)
            p.windows.mark_missing(r.key)
        if r.supplier != SERVER:
            p.backoff[r.supplier] = self.now + self.config.refuse_backoff_s
        elif not r.emergent:
            # the server's copy quota only fills up: do not ask again
            p.srv_refused.add(r.key)

    def _cancel(self, r: Request) -> None:
        """Withdraw a request (or abort its transfer) on both ends at once."""
        if r.state == REQ_ACTIVE:
            tr = r.transfer
            self._detach(tr)
        r.state = REQ_CANCELLED
        p = self.peers[r.requester]
        if p.pending.get(r.key) is r:
            del p.pending[r.key]
            _release(p, r)
            p.windows.mark_missing(r.key)

    # ---- fluid transfers ------------------------------------------------
    # A receiver first reserves for each server rescue the rate that lands it
    # one tick before its deadline, then splits the rest of its inbound
    # equally over its other downloads.  Each sender water-fills its
    # outbound over its uploads under those receiver caps.
    def _start(self, sender, r: Request) -> None:
        p = self.peers[r.requester]
        tr = Transfer(sender, p, r, self.now, r.rescue and sender is self.server)
        r.state = REQ_ACTIVE
        r.transfer = tr
        p.downloads.append(tr)
        if tr.rescue:
            p.n_rescue += 1
        if not sender.unlimited:
            sender.uploads.append(tr)
        if sender is not self.server:
            sender.upload_bits += tr.bits
            self.strategy.on_upload_start(self, sender, p, tr)
        self._rebalance(sender, p)

    def _detach(self, tr: Transfer) -> None:
        tr.done = True
        tr.version += 1
        p = tr.receiver
        p.downloads.remove(tr)
        if tr.rescue:
            p.n_rescue -= 1
        s = tr.sender
        if not s.unlimited:
            s.uploads.remove(tr)
        if s is not self.server:
            s.upload_bits -= tr.bits
            s.up_rate -= tr.rate
        tr.rate = 0.0
        self._rebalance(s, p)

    def _receiver_caps(self, p: Peer) -> None:
        downs = p.downloads
        if not downs:
            return
        inbound = p.inbound
        if not p.n_rescue:
            share = inbound / len(downs)
            for tr in downs:
                tr.cap = share
            return
        now = self.now
        guard = self.config.tick_s
        n = self.n_layers
        start = self.playback_start
        # deadline-bound transfers get the rate they need, earliest deadline first
        rescues = sorted((tr for tr in downs if tr.rescue), key=lambda tr: tr.req.key // n)
        reserved = 0.0
        for tr in rescues:
            left = start + tr.req.key // n - now - self._delay(tr) - guard
            rem = tr.remaining_at(now)
            need = rem / left if left > 0 and rem > 1e-6 * tr.bits else inbound
            free = inbound - reserved
            tr.cap = need if need < free else free
            reserved += tr.cap
        rest = len(downs) - len(rescues)
        if rest:
            share = (inbound - reserved) / rest
            for tr in downs:
                if not tr.rescue:
                    tr.cap = share

    def _rebalance(self, sender, p: Peer) -> None:
        self._receiver_caps(p)
        senders = [] if sender.unlimited else [sender]
        for tr in p.downloads:
            s = tr.sender
            if s.unlimited:
                self._retime(tr, tr.cap)
            elif s is not sender and s not in senders:
                senders.append(s)
        for s in senders:
            self._fill(s)

    def _fill(self, node) -> None:
        ups = node.uploads
        k = len(ups)
        if k == 0:
            return
        if k == 1:
            tr = ups[0]
            c = tr.cap
            self._retime(tr, c if c < node.outbound else node.outbound)
            return
        order = sorted(ups, key=lambda tr: tr.cap)
        left = node.outbound
        for j, tr in enumerate(order):
            c = tr.cap
            share = left / (k - j)
            rate = c if c < share else share
            left -= rate
            self._retime(tr, rate)

    def _retime(self, tr: Transfer, rate: float) -> None:
        old = tr.rate
        if abs(rate - old) <= 1e-9 * rate:
            return
        now = self.now
        if old > 0:
            tr.remaining -= old * (now - tr.last)
            if tr.remaining < 0:
                tr.remaining = 0.0
        tr.last = now
        tr.rate = rate
        tr.version += 1
        s = tr.sender
        if s is not self.server:
            s.up_rate += rate - old
        if rate > 0:
            self.at(now + tr.remaining / rate, self._on_complete, (tr, tr.version))

    def _on_complete(self, payload) -> None:
        tr, version = payload
        if tr.done or version != tr.version:
            return
        self._detach(tr)
        r = tr.req
        r.state = REQ_DONE
        p = tr.receiver
        key = r.key
        now = self.now
        from_server = tr.sender is self.server
        arrival = now + (p.server_delay if from_server else _pair_delay(tr.sender, p))
        if p.pending.get(key) is r:
            del p.pending[key]
            _release(p, r)
        p.windows.mark_received(key)
        if key not in p.have:
            p.have[key] = arrival
            for q, _ in p.nbrs:
                c = q.counts
                c[key] = c.get(key, 0) + 1
            self.copies[key] = self.copies.get(key, 0) + 1
        m = self.metrics
        lo, hi = m.window
        if lo <= now <= hi:
            bits = r.bits
            m.total_bits += bits
            don = key % self.n_layers
            if from_server:
                m.server_bits += bits
                if r.rescue:
                    m.rescue_server_bits += bits
                name = str(self.layer_of_don[don])
                m.layer_server_bits[name] = m.layer_server_bits.get(name, 0.0) + bits
            else:
                name = str(self.layer_of_don[don])
                sub = str(self.layer_of_don[tr.sender.subset])
                per = m.subset_supply_bits.setdefault(name, {})
                per[sub] = per.get(sub, 0.0) + bits
        if not from_server:
            self.strategy.on_delivery(self, tr.sender, p, r.bits)
        if p.stage == STARTUP:
            w = p.windows
            if all(w.all_received(i) for i in range(p.start_index, p.start_index + self.config.startup_delay_s)):
                p.stage = NORMAL
                m.startup_times[p.pid] = now - p.join_time
        elif p.stage == SWITCH:
            base = p.switch_index * self.n_layers
            if all((base + d) in p.windows.received for d in p.switch_dons):
                p.stage = NORMAL
                m.switch_times.append(now - p.switch_time)

    # ---- tit-for-tat timers ---------------------------------------------
    def _on_rechoke(self, _) -> None:
        self.strategy.rechoke(self)
        self.at(self.now + self.config.rechoke_interval_s, self._on_rechoke, None)

    def _on_optimistic(self, _) -> None:
        self.strategy.rotate_optimistic(self)
        self.at(self.now + self.config.optimistic_interval_s, self._on_optimistic, None)

    # ---- metrics --------------------------------------------------------
    def _current_population(self) -> list[PeerSubsetStats]:
        return [s for s in self.tracker.population() if s.peer_count > 0]

    def _on_sample(self, _) -> None:
        m = self.metrics
        pop = self._current_population()
        opt = None
        if pop:
            opt = theoretical_optimal_share(self.graph, pop)
            demand = sum(self.stream_of[s.observing] * s.peer_count for s in pop)
            self._opt_weighted += opt * demand
            self._opt_weight += demand
        m.samples.append(Sample(self.now, m.server_bits, m.total_bits, m.missed_deadlines, opt))

    def _finish(self) -> None:
        m = self.metrics
        if self._opt_weight > 0:
            m.optimal_share = self._opt_weighted / self._opt_weight
        pop = self._current_population()
        if pop:
            m.final_optimal_share = theoretical_optimal_share(self.graph, pop)
        self._prune(1 << 62)
        alloc = self.view.allocation
        if alloc is not None:
            m.model_selection = {
                str(l): {str(s): f for s, f in props.items()}
                for l, props in sorted(alloc.selection.items())
            }


def _release(p: Peer, r: Request) -> None:
    if r.supplier == SERVER:
        p.srv_outstanding -= r.bits
    else:
        p.outstanding -= r.bits


def saturated(q: Peer, window: float) -> bool:
    """No spare fluid rate and a full window of committed upload bits."""
    out = q.outbound
    return q.upload_bits >= out * window and q.up_rate >= out * (1.0 - 1e-9)


def _pair_delay(a: Peer, b: Peer) -> float:
    return a.nd[b.pid]


def run(config: ScenarioConfig, graph: LayerGraph | None = None,
        check_invariants: bool = False) -> Metrics:
    """Simulate one scenario to its horizon and return its metrics."""
    return Simulation(config, graph, check_invariants=check_invariants).run()
