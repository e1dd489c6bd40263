"""The two peer strategies plugged into the simulator.

Both share the simulator's windows, deadline rescue and transfer model; they
differ only in chunk choice, supplier choice and how suppliers order their
request queues.
"""

from __future__ import annotations

from mvp2p.scheduling import (
    REQ_CANCELLED,
    REQ_QUEUED,
    SERVER,
    WeightedChoice,
    balanced_key,
    peer_process_queue,
    select_supplier_partial,
    server_process_queue,
    upload_admits,
)
from mvp2p.sim.engine import saturated
from mvp2p.srt import TitForTatLedger, srt_next_key, srt_select_supplier

STARTUP, SWITCH = 1, 2
DEAD = (-1, False)  # a pick the round should count as skipped
_EMPTY = WeightedChoice({})


class Strategy:
    name = ""
    uses_flow_model = False
    uses_ledger = False
    server_queues = False

    def setup(self, sim) -> None:
        pass

    def on_join(self, sim, p) -> None:
        pass

    def on_depart(self, sim, p) -> None:
        pass

    def on_upload_start(self, sim, sender, receiver, tr) -> None:
        pass

    def on_delivery(self, sim, sender, receiver, bits: float) -> None:
        pass

    def rechoke(self, sim) -> None:
        pass

    def rotate_optimistic(self, sim) -> None:
        pass


class MVP2PStrategy(Strategy):
    """Max-flow driven scheduling, selection and queue ordering."""

    name = "mvp2p"
    uses_flow_model = True
    server_queues = True

    def next_chunk(self, sim, p):
        w = p.windows
        seq = w.sequential_next()
        if seq is not None and seq // sim.n_layers <= w.urgent_limit:
            return seq, True
        if p.stage == STARTUP:
            return None if seq is None else (seq, True)
        if p.stage == SWITCH:
            key = w.sequential_next(p.switch_dons)
            if key is not None:
                return key, True
        dist = sim.view_for(p).supply.get(p.subset)
        rng = sim.rng
        if p.p_seq >= 1.0 or rng.random() < p.p_seq or not dist:
            return None if seq is None else (seq, False)
        # balanced pick, inlined to skip layers already found unplaceable
        don = dist.sample(rng)
        if don in p.exhausted:
            return DEAD
        key = w.rarest((don,), p.counts)
        if key is None:
            return None if seq is None else (seq, False)
        if not p.counts.get(key) and (p.srv_full or key in p.srv_refused):
            # rarest-first found only chunks no neighbour has: server-only
            p.exhausted.add(don)
        return key, False

    def select_supplier(self, sim, p, key, emergent):
        don = key % sim.n_layers
        sel = sim.view_for(p).selection.get(don) or _EMPTY
        rng = sim.rng
        if emergent:
            slack = sim.slack(p, key)
            if slack < 0:
                return SERVER
            groups: dict[int, list[int]] = {}
            for q in sim.holders(p, key):
                groups.setdefault(q.subset, []).append(q.pid)
            return select_supplier_partial(slack, groups, sel, rng)
        if not sel:
            return SERVER
        # draw among subsets that have a neighbour announcing the chunk
        now = sim.now
        window = sim.config.upload_window_s
        backoff = p.backoff
        held: dict[int, list] = {}
        for q, d in self._designated(sim, p, don, sel):
            t = q.have.get(key)
            if t is None or t + d > now or not q.active:
                continue
            free = q.outbound > 0 and not saturated(q, window)
            if free:
                b = backoff.get(q.pid)
                free = b is None or b <= now
            held.setdefault(q.subset, []).append(q.pid if free else None)
        if not held:
            return None if key in p.srv_refused else SERVER
        weights = sel.weights
        subsets = sorted(held)
        x = rng.random() * sum(weights[s] for s in subsets)
        for subset in subsets:
            x -= weights[subset]
            if x < 0:
                break
        found = [pid for pid in held[subset] if pid is not None]
        if not found:
            return None  # holders exist but are saturated: retry next round
        return found[rng.randrange(len(found))] if len(found) > 1 else found[0]

    @staticmethod
    def _designated(sim, p, don, sel):
        """Neighbours in a subset designated to supply layer ``don``, cached
        until the allocation or some peer's subset changes."""
        hit = p.sel_cache.get(don)
        if hit is not None and hit[0] is sel and hit[1] == sim.subset_epoch:
            return hit[2]
        weights = sel.weights
        nbrs = [(q, d) for q, d in p.nbrs if q.subset in weights]
        p.sel_cache[don] = (sel, sim.subset_epoch, nbrs)
        return nbrs

    def peer_receives(self, sim, q, r) -> None:
        """Urgent requests are answered at once, the rest on the next tick."""
        if r.urgent:
            cap = q.outbound * sim.config.upload_window_s
            room = (q.outbound - q.up_rate) * sim.config.upload_window_s
            sim.accept_or_refuse(q, r, upload_admits(r.bits, room, cap))
        else:
            r.state = REQ_QUEUED
            q.queue.append(r)

    def serve_queue(self, sim, q, queue) -> None:
        room, cap = sim.upload_room(q)
        for r, ok in peer_process_queue(queue, room, cap):
            sim.accept_or_refuse(q, r, ok)

    def serve_server_queue(self, sim, queue) -> None:
        s = sim.server
        copies = sim.view.copies
        n = sim.n_layers
        for r, ok in server_process_queue(queue, copies, s.sent, lambda k: k % n):
            if ok:
                if not r.rescue and s.sent[r.key] > copies.get(r.key % n, 1):
                    sim.metrics.nonrescue_over_quota += 1
                if sim.peers[r.requester].active:
                    sim._start(s, r)
                else:
                    r.state = REQ_CANCELLED
            else:
                sim._refuse(r)


class SRTStrategy(Strategy):
    """Sequential in the urgent range, rarest-first beyond, tit-for-tat."""

    name = "srt"
    uses_ledger = True

    def setup(self, sim) -> None:
        for p in sim.peers:
            p.ledger = TitForTatLedger(
                [q.pid for q, _ in p.nbrs], sim.config.unchoke_slots, sim.config.optimistic_slots
            )
        self.rng = sim.rng

    def on_join(self, sim, p) -> None:
        p.ledger.rechoke(sim.rng, self._eligible(p))
        p.ledger.rotate_optimistic(sim.rng, self._eligible(p))

    def on_depart(self, sim, p) -> None:
        for q, _ in p.nbrs:
            q.ledger.drop(p.pid)

    def next_chunk(self, sim, p):
        key = srt_next_key(p.windows, p.counts)
        if key is None:
            return None
        return key, key // sim.n_layers <= p.windows.urgent_limit

    def select_supplier(self, sim, p, key, emergent):
        slack = sim.slack(p, key)
        if slack < 0:
            return SERVER
        holders = sim.holders(p, key)
        if not holders:
            return SERVER
        me = p.pid
        unchoked_by = {q.pid for q in holders if q.ledger.is_unchoked(me)}
        return srt_select_supplier([q.pid for q in holders], unchoked_by, p.ledger, sim.rng, slack)

    def peer_receives(self, sim, q, r) -> None:
        if not q.ledger.is_unchoked(r.requester):
            sim._refuse(r)
        else:
            r.state = REQ_QUEUED
            q.queue.append(r)

    def serve_queue(self, sim, q, queue) -> None:
        room, cap = sim.upload_room(q)
        for r in sorted(queue, key=lambda r: r.seq):
            ok = q.ledger.is_unchoked(r.requester) and upload_admits(r.bits, room, cap)
            if ok:
                room -= r.bits
            sim.accept_or_refuse(q, r, ok)

    def serve_server_queue(self, sim, queue) -> None:
        for r in queue:
            sim._start(sim.server, r)

    def on_delivery(self, sim, sender, receiver, bits: float) -> None:
        receiver.ledger.record_received(sender.pid, bits)
        sender.ledger.record_sent(receiver.pid, bits)

    def _eligible(self, p):
        return {q.pid for q, _ in p.nbrs if q.active}

    def rechoke(self, sim) -> None:
        for p in sim.peers:
            if p.active:
                p.ledger.rechoke(sim.rng, self._eligible(p))

    def rotate_optimistic(self, sim) -> None:
        for p in sim.peers:
            if p.active:
                p.ledger.rotate_optimistic(sim.rng, self._eligible(p))


STRATEGIES = {"mvp2p": MVP2PStrategy, "srt": SRTStrategy}


def make_strategy(name: str) -> Strategy:
    try:
        return STRATEGIES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}") from None
