"""Baseline strategy: sequential in the urgent range, rarest-first beyond it,
and BitTorrent-style tit-for-tat supplier choice."""

from __future__ import annotations

import random
from typing import Collection, Iterable, Mapping, Sequence

from mvp2p.layers import LayerGraph
from mvp2p.scheduling import SERVER
from mvp2p.sim.windows import ChunkId, SlidingWindows


class TitForTatLedger:
    """Per-neighbour byte counters and the resulting unchoke set.

    Counters cover the current window plus the one before it; ``rechoke``
    closes a window.  ``slots`` neighbours are unchoked by bytes received
    from them, and ``optimistic`` more are drawn at random.
    """

    __slots__ = ("neighbors", "slots", "optimistic", "received", "sent",
                 "last_received", "regular", "lucky")

    def __init__(self, neighbors: Iterable[int], slots: int = 4, optimistic: int = 1) -> None:
        if slots < 0 or optimistic < 0:
            raise ValueError("slot counts must be non-negative")
        self.neighbors = sorted(neighbors)
        self.slots = slots
        self.optimistic = optimistic
        self.received: dict[int, float] = {}
        self.sent: dict[int, float] = {}
        self.last_received: dict[int, float] = {}
        self.regular: set[int] = set()
        self.lucky: set[int] = set()

    @property
    def unchoked(self) -> set[int]:
        return self.regular | self.lucky

    def is_unchoked(self, peer: int) -> bool:
        return peer in self.regular or peer in self.lucky

    def record_received(self, peer: int, bits: float) -> None:
        self.received[peer] = self.received.get(peer, 0.0) + bits

    def record_sent(self, peer: int, bits: float) -> None:
        self.sent[peer] = self.sent.get(peer, 0.0) + bits

    def recent(self, peer: int) -> float:
        """Bits received from ``peer`` over roughly the last window."""
        return self.received.get(peer, 0.0) + self.last_received.get(peer, 0.0)

    def rechoke(self, rng: random.Random, eligible: Collection[int] | None = None) -> None:
        """Unchoke the best reciprocators of the window that just ended."""
        pool = [p for p in self.neighbors if eligible is None or p in eligible]
        window = self.received
        ranked = sorted((p for p in pool if window.get(p, 0.0) > 0),
                        key=lambda p: (-window[p], p))
        chosen = ranked[: self.slots]
        if len(chosen) < self.slots:
            rest = [p for p in pool if p not in chosen]
            chosen += rng.sample(rest, min(self.slots - len(chosen), len(rest)))
        self.regular = set(chosen)
        self.lucky -= self.regular
        self.last_received = window
        self.received = {}
        self.sent = {}

    def rotate_optimistic(self, rng: random.Random, eligible: Collection[int] | None = None) -> None:
        pool = [p for p in self.neighbors
                if p not in self.regular and (eligible is None or p in eligible)]
        self.lucky = set(rng.sample(pool, min(self.optimistic, len(pool))))

    def drop(self, peer: int) -> None:
        if peer in self.neighbors:
            self.neighbors.remove(peer)
        self.regular.discard(peer)
        self.lucky.discard(peer)


def srt_next_key(windows: SlidingWindows, counts: Mapping[int, int]) -> int | None:
    key = windows.urgent_gap()
    if key is not None:
        return key
    return windows.rarest(windows.order, counts)


def srt_next_chunk(
    windows: SlidingWindows, graph: LayerGraph, copies: Mapping[ChunkId, int]
) -> ChunkId | None:
    """Urgent gap first (sequential), otherwise the rarest missing chunk."""
    counts = {windows.key(c.index, graph.layer_don(c.layer)): n for c, n in copies.items()}
    key = srt_next_key(windows, counts)
    if key is None:
        return None
    idx, don = windows.split(key)
    return ChunkId(graph.decode_order[don], idx)


def srt_select_supplier(
    holders: Sequence[int],
    unchoked_by: Collection[int],
    ledger: TitForTatLedger,
    rng: random.Random,
    slack: float = 0.0,
) -> int:
    """Prefer holders that unchoked us, best reciprocators first.

    ``unchoked_by`` lists neighbours whose unchoke set contains us.  With no
    such holder a random holder is tried; with no holder at all, or when
    only a server fetch can meet the deadline, the server.
    """
    if slack < 0 or not holders:
        return SERVER
    friends = [h for h in holders if h in unchoked_by]
    if friends:
        best = max(ledger.recent(h) for h in friends)
        top = [h for h in friends if ledger.recent(h) == best]
        return top[rng.randrange(len(top))] if len(top) > 1 else top[0]
    return holders[rng.randrange(len(holders))]
