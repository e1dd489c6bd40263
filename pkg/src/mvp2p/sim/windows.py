"""Per-peer sliding windows over chunk slots.

Layers are addressed internally by their decoding-order rank (DON) and a
chunk by the integer key ``index * n_layers + don``, which keeps the hot
scheduling loops free of tuple allocation.
"""

from __future__ import annotations

from typing import Iterable, Mapping, NamedTuple

from mvp2p.layers import LayerGraph, LayerId


class ChunkId(NamedTuple):
    layer: LayerId
    index: int

    def __str__(self) -> str:
        return f"{self.layer}#{self.index}"


class SlidingWindows:
    """Missing / requested / received state of every required layer.

    ``start[don]`` is the first chunk index the peer needs for that layer.
    Indices from the execution index up to the live edge (newest created
    chunk) are in scope; those whose deadline is within the urgent range
    (``index <= urgent_limit``) form the urgent part of the window.
    """

    __slots__ = (
        "n_layers", "start", "end", "lo", "received", "requested",
        "exec_index", "live_edge", "urgent_limit", "order",
    )

    def __init__(self, n_layers: int, exec_index: int = 0) -> None:
        self.n_layers = n_layers
        self.start: dict[int, int] = {}
        self.end: dict[int, int] = {}
        self.lo: dict[int, int] = {}
        self.received: set[int] = set()
        self.requested: set[int] = set()
        self.exec_index = exec_index
        self.live_edge = -1
        self.urgent_limit = -1
        self.order: list[int] = []

    # ---- construction helpers -------------------------------------------
    @classmethod
    def for_layers(
        cls,
        graph: LayerGraph,
        layers: Iterable[LayerId],
        start_index: int,
        live_edge: int,
        urgent_limit: int,
        received: Iterable[ChunkId] = (),
        requested: Iterable[ChunkId] = (),
    ) -> "SlidingWindows":
        w = cls(len(graph), exec_index=start_index)
        for layer in layers:
            w.add_layer(graph.layer_don(layer), start_index)
        w.live_edge = live_edge
        w.urgent_limit = urgent_limit
        for c in received:
            w.received.add(w.key(c.index, graph.layer_don(c.layer)))
        for c in requested:
            w.requested.add(w.key(c.index, graph.layer_don(c.layer)))
        return w

    def key(self, index: int, don: int) -> int:
        return index * self.n_layers + don

    def split(self, key: int) -> tuple[int, int]:
        return divmod(key, self.n_layers)

    def add_layer(self, don: int, first_index: int) -> None:
        end = self.end.pop(don, None)
        if don in self.start and (end is None or first_index <= end):
            return  # already wanted, or still retiring: simply keep it
        self.start[don] = first_index
        self.lo[don] = first_index
        self.order = sorted(self.start)

    def retire_layer(self, don: int, end_index: int) -> None:
        """Stop needing a layer from ``end_index`` on; earlier slots stay due."""
        if don not in self.start:
            return
        if end_index <= max(self.start[don], self.exec_index):
            self.drop_layer(don)
        else:
            self.end[don] = end_index

    def drop_layer(self, don: int) -> None:
        self.start.pop(don, None)
        self.end.pop(don, None)
        self.lo.pop(don, None)
        self.order = sorted(self.start)

    def covers(self, don: int, index: int) -> bool:
        """Whether the chunk ``index`` of layer ``don`` is needed for playback."""
        start = self.start.get(don)
        if start is None or index < start:
            return False
        end = self.end.get(don)
        return end is None or index < end

    # ---- slot state -----------------------------------------------------
    def is_missing(self, key: int) -> bool:
        return key not in self.received and key not in self.requested

    def mark_requested(self, key: int) -> None:
        self.requested.add(key)

    def mark_received(self, key: int) -> None:
        self.requested.discard(key)
        self.received.add(key)

    def mark_missing(self, key: int) -> None:
        """Revert a request (refused, cancelled or timed out)."""
        self.requested.discard(key)
        idx, don = divmod(key, self.n_layers)
        lo = self.lo.get(don)
        if lo is not None and idx < lo:
            self.lo[don] = idx

    def advance(self, exec_index: int) -> None:
        """Move the execution index; slots behind it leave the window."""
        self.exec_index = exec_index
        for don, end in list(self.end.items()):
            if end <= exec_index:
                self.drop_layer(don)
        for don in self.order:
            if self.lo[don] < exec_index:
                self.lo[don] = exec_index
        n = self.n_layers
        cut = exec_index * n
        if len(self.received) > 64 * n:
            self.received = {k for k in self.received if k >= cut - n}

    # ---- queries --------------------------------------------------------
    def first_missing(self, don: int) -> int | None:
        """Lowest missing index of a layer within the window, or None."""
        lo = self.lo[don]
        start = self.start[don]
        if lo < start:
            lo = start
        if lo < self.exec_index:
            lo = self.exec_index
        n = self.n_layers
        received = self.received
        requested = self.requested
        edge = self.live_edge
        end = self.end.get(don)
        if end is not None and end - 1 < edge:
            edge = end - 1
        k = lo * n + don
        while lo <= edge and (k in received or k in requested):
            lo += 1
            k += n
        self.lo[don] = lo
        return lo if lo <= edge else None

    def sequential_next(self, layers: Iterable[int] | None = None) -> int | None:
        """Earliest-deadline missing chunk; ties go to the lower DON."""
        # first_missing inlined: this is the hottest loop of a simulation
        n = self.n_layers
        received = self.received
        requested = self.requested
        start = self.start
        lo_of = self.lo
        end_of = self.end
        floor = self.exec_index
        live = self.live_edge
        best_idx = None
        best_don = -1
        for don in (self.order if layers is None else layers):
            first = start.get(don)
            if first is None:
                continue
            lo = lo_of[don]
            if lo < first:
                lo = first
            if lo < floor:
                lo = floor
            edge = live
            if end_of:
                end = end_of.get(don)
                if end is not None and end - 1 < edge:
                    edge = end - 1
            k = lo * n + don
            while lo <= edge and (k in received or k in requested):
                lo += 1
                k += n
            lo_of[don] = lo
            if lo <= edge and (best_idx is None or lo < best_idx):
                best_idx = lo
                best_don = don
        if best_idx is None:
            return None
        return best_idx * n + best_don

    def urgent_gap(self) -> int | None:
        """Sequential pick restricted to the urgent range."""
        key = self.sequential_next()
        if key is not None and key // self.n_layers <= self.urgent_limit:
            return key
        return None

    def missing_keys(self, don: int) -> list[int]:
        first = self.first_missing(don)
        if first is None:
            return []
        n = self.n_layers
        return [
            k for k in range(first * n + don, self._edge(don) * n + don + 1, n)
            if k not in self.received and k not in self.requested
        ]

    def _edge(self, don: int) -> int:
        end = self.end.get(don)
        if end is not None and end - 1 < self.live_edge:
            return end - 1
        return self.live_edge

    def rarest(self, dons: Iterable[int], counts: Mapping[int, int]) -> int | None:
        """Missing chunk with the fewest known copies among neighbours.

        Chunks no neighbour holds rank after every chunk some neighbour
        holds, since only the server can supply them.  Remaining ties go to
        the smaller chunk index, then the lower DON.
        """
        best = None
        best_rank = None
        n = self.n_layers
        received = self.received
        requested = self.requested
        get = counts.get
        for don in dons:
            if don not in self.start:
                continue
            first = self.first_missing(don)
            if first is None:
                continue
            last = self._edge(don) * n + don
            for k in range(first * n + don, last + 1, n):
                if k in received or k in requested:
                    continue
                c = get(k, 0)
                rank = (c if c > 0 else 1 << 30, k // n, don)
                if best_rank is None or rank < best_rank:
                    best_rank = rank
                    best = k
                    if c == 1:
                        break
        return best

    def all_received(self, index: int) -> bool:
        n = self.n_layers
        return all(
            index * n + d in self.received for d in self.order if self.covers(d, index)
        )
